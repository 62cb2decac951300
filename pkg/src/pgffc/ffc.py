"""
Feedforward synthesis with an identified closed-loop model.

The central problem optimizes the full feedforward sequence ``U_ff`` so that
the model-predicted closed-loop output follows a target::

    min  ||target - Yhat(U_ff)||^2 + ||gamma * Delta * U_ff||^2
    s.t. lower <= U_ff <= upper

with ``Delta`` the first-difference matrix. Bounds on the predicted input and
output are handled as soft quadratic penalties. Variants: receding horizon,
basis-function parameterization, and the iterative-learning loop that
re-targets the problem with measured plant errors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.linalg import toeplitz
from scipy.sparse import diags

from .model import (InitialWindow, LiftedLinear, PgnnModel, simulate_model_closed_loop)
from .optim import LeastSquaresProblem, SolveReport, SolverOptions, solve
from .plant import FeedbackController
from .signals import NormSpec, ReferenceSpec, Signal, norm, reference_derivatives

log = logging.getLogger(__name__)

FHOFC_SOLVER = SolverOptions(max_iterations=100, gtol=1e-10, xtol=1e-14, ftol=1e-14)


def difference_matrix(n: int) -> np.ndarray:
    """``n x n`` matrix with 1 on the diagonal and -1 on the subdiagonal."""
    return diags([np.ones(n), -np.ones(n - 1)], [0, -1], shape=(n, n)).toarray()


@dataclass(frozen=True)
class RegularizerSpec:
    gamma: float = 0.0

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be nonnegative, got {self.gamma}")

    def matrix(self, n: int) -> np.ndarray:
        return self.gamma * difference_matrix(n)


def _bound_pair(lo, hi, n):
    lo = np.full(n, -np.inf) if lo is None else np.broadcast_to(np.asarray(lo, float), (n,)).copy()
    hi = np.full(n, np.inf) if hi is None else np.broadcast_to(np.asarray(hi, float), (n,)).copy()
    if np.any(lo > hi):
        raise ValueError("constraint lower bound exceeds upper bound")
    return lo, hi


@dataclass(frozen=True)
class ConstraintSets:
    """Hard box on ``U_ff``; soft boxes on the predicted ``Uhat`` and ``Yhat``.

    Bounds are scalars or per-sample arrays; ``None`` means unbounded.
    """

    uff_lower: object = None
    uff_upper: object = None
    u_lower: object = None
    u_upper: object = None
    y_lower: object = None
    y_upper: object = None
    penalty_weight: float = 1e3

    def __post_init__(self):
        for lo, hi in ((self.uff_lower, self.uff_upper), (self.u_lower, self.u_upper),
                       (self.y_lower, self.y_upper)):
            if lo is not None and hi is not None and np.any(np.asarray(lo) > np.asarray(hi)):
                raise ValueError("constraint lower bound exceeds upper bound")
        if self.penalty_weight < 0:
            raise ValueError("penalty weight must be nonnegative")

    @property
    def has_soft(self) -> bool:
        return any(b is not None for b in (self.u_lower, self.u_upper, self.y_lower, self.y_upper))

    def resolved(self, n: int) -> dict:
        return {"uff": _bound_pair(self.uff_lower, self.uff_upper, n),
                "u": _bound_pair(self.u_lower, self.u_upper, n),
                "y": _bound_pair(self.y_lower, self.y_upper, n)}

    def to_dict(self) -> dict:
        def enc(v):
            return None if v is None else np.asarray(v, float).tolist()
        return {"uff_lower": enc(self.uff_lower), "uff_upper": enc(self.uff_upper),
                "u_lower": enc(self.u_lower), "u_upper": enc(self.u_upper),
                "y_lower": enc(self.y_lower), "y_upper": enc(self.y_upper),
                "penalty_weight": self.penalty_weight}


def _values(x) -> np.ndarray:
    if isinstance(x, Signal):
        return x.values
    return np.asarray(x, dtype=float).reshape(-1)


@dataclass(frozen=True)
class FhofcProblem:
    model: PgnnModel
    controller: FeedbackController
    reference: Signal
    target: Signal | None = None
    window: InitialWindow | None = None
    regularizer: RegularizerSpec = RegularizerSpec()
    constraints: ConstraintSets = ConstraintSets()
    norm_spec: NormSpec = NormSpec()
    solver: SolverOptions = FHOFC_SOLVER

    def __post_init__(self):
        if self.target is not None and self.target.n_samples != self.reference.n_samples:
            raise ValueError("target and reference differ in length")

    @property
    def n_samples(self) -> int:
        return self.reference.n_samples

    @property
    def target_values(self) -> np.ndarray:
        return (self.target or self.reference).values

    def initial_window(self) -> InitialWindow:
        if self.window is not None:
            return self.window
        return InitialWindow.at_rest(self.model.orders, self.reference.values[0])

    def with_target(self, target) -> "FhofcProblem":
        fs = self.reference.sample_rate
        t = target if isinstance(target, Signal) else Signal(_values(target), fs, ("target",))
        return replace(self, target=t)


@dataclass
class FhofcResult:
    U_ff: Signal
    Y_hat: Signal
    U_hat: Signal
    report: SolveReport
    inversion_error: float
    meta: dict = field(default_factory=dict)


class _Objective:
    """Stacked residual over a simulation window.

    ``U_ff = expand @ x`` (identity when ``expand`` is None, followed by zero
    padding up to the simulation length). Tracking rows are ``rows``; the
    regularizer acts on the first ``n_reg`` entries of ``U_ff``, differencing
    the first one against ``u_prev``.
    """

    def __init__(self, model, controller, r_sim, target_rows, rows, window, gamma, n_reg,
                 u_prev=0.0, expand=None, n_x=None, soft=None, penalty_weight=0.0):
        self.model, self.controller, self.window = model, controller, window
        self.r_sim = np.ascontiguousarray(r_sim, dtype=float)
        self.n_sim = self.r_sim.size
        self.target_rows = np.asarray(target_rows, dtype=float)
        self.rows = rows
        self.expand = None if expand is None else np.asarray(expand, dtype=float)
        self.n_x = n_x if n_x is not None else (self.expand.shape[1] if self.expand is not None
                                                 else self.n_sim)
        self.gamma, self.n_reg, self.u_prev = gamma, n_reg, u_prev
        self.G = gamma * difference_matrix(n_reg) if gamma > 0 else None
        self.soft = soft or {}
        self.sqrt_w = np.sqrt(penalty_weight)
        self.T_C = None
        if "u" in self.soft:
            h = controller.impulse_response(self.n_sim)
            self.T_C = toeplitz(h, np.zeros(self.n_sim))

    def uff(self, x) -> np.ndarray:
        u = self.expand @ x if self.expand is not None else x
        if u.size < self.n_sim:
            u = np.concatenate([u, np.zeros(self.n_sim - u.size)])
        return u

    def dU_dx(self) -> np.ndarray:
        if self.expand is not None:
            E = self.expand
        else:
            E = np.eye(self.n_x)
        if E.shape[0] < self.n_sim:
            E = np.vstack([E, np.zeros((self.n_sim - E.shape[0], E.shape[1]))])
        return E

    def __call__(self, x, jac):
        x = np.asarray(x, dtype=float)
        u = self.uff(x)
        sim = simulate_model_closed_loop(self.model, self.controller, self.r_sim, u, self.window,
                                         jac_uff=jac)
        y, uh = sim.Y_hat.values, sim.U_hat.values
        parts = [self.target_rows - y[self.rows]]
        if self.G is not None:
            d = self.G @ u[:self.n_reg]
            d[0] -= self.gamma * self.u_prev
            parts.append(d)
        soft_rows = []
        for key, sig in (("y", y), ("u", uh)):
            if key in self.soft:
                lo, hi = self.soft[key]
                viol = sig - np.clip(sig, lo, hi)
                parts.append(self.sqrt_w * viol)
                soft_rows.append((key, viol != 0))
        r = np.concatenate(parts)
        if not jac:
            return r
        Ux = self.dU_dx()
        dY = sim.dY_duff @ Ux
        blocks = [-dY[self.rows]]
        if self.G is not None:
            blocks.append(self.G @ Ux[:self.n_reg])
        for key, active in soft_rows:
            if key == "y":
                blocks.append(self.sqrt_w * active[:, None] * dY)
            else:
                dU = Ux - self.T_C @ dY
                blocks.append(self.sqrt_w * active[:, None] * dU)
        return r, np.vstack(blocks)


def _soft_sets(constraints: ConstraintSets, sl: slice, n: int) -> dict:
    res = constraints.resolved(n)
    soft = {}
    for key in ("y", "u"):
        lo, hi = res[key]
        if np.isfinite(lo).any() or np.isfinite(hi).any():
            soft[key] = (lo[sl], hi[sl])
    return soft


def _result(problem: FhofcProblem, uff: np.ndarray, report: SolveReport, **meta) -> FhofcResult:
    fs = problem.reference.sample_rate
    sim = simulate_model_closed_loop(problem.model, problem.controller, problem.reference.values, uff,
                                     problem.initial_window())
    inv = norm(problem.target_values - sim.Y_hat.values, problem.norm_spec)
    return FhofcResult(Signal(uff, fs, ("uff",)), sim.Y_hat, sim.U_hat, report, inv, meta)


def solve_fhofc(problem: FhofcProblem, u0=None) -> FhofcResult:
    """Full-horizon optimal feedforward (zero warm start by default)."""
    n = problem.n_samples
    x0 = np.zeros(n) if u0 is None else _values(u0).copy()
    if x0.size != n:
        raise ValueError(f"u0 has {x0.size} samples, expected {n}")
    lo, hi = problem.constraints.resolved(n)["uff"]
    obj = _Objective(problem.model, problem.controller, problem.reference.values,
                     problem.target_values, slice(None), problem.initial_window(),
                     problem.regularizer.gamma, n,
                     soft=_soft_sets(problem.constraints, slice(None), n),
                     penalty_weight=problem.constraints.penalty_weight)
    report = solve(LeastSquaresProblem(obj, n, lo, hi), x0, problem.solver)
    log.info("FHOFC: %s after %d iterations, cost %.4e", report.reason, report.iterations, report.cost)
    return _result(problem, report.x, report, gamma=problem.regularizer.gamma)


def fhofc_cost(problem: FhofcProblem, uff) -> float:
    """Objective value ``0.5 ||residual||^2`` at a given feedforward signal."""
    n = problem.n_samples
    obj = _Objective(problem.model, problem.controller, problem.reference.values,
                     problem.target_values, slice(None), problem.initial_window(),
                     problem.regularizer.gamma, n,
                     soft=_soft_sets(problem.constraints, slice(None), n),
                     penalty_weight=problem.constraints.penalty_weight)
    r = obj(_values(uff), False)
    return 0.5 * float(r @ r)


# --------------------------------------------------------------------------
# basis functions


@dataclass(frozen=True)
class BasisParameterization:
    """Feedforward restricted to ``U_ff = Psi c``."""

    Psi: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        Psi = np.array(self.Psi, dtype=float)
        if Psi.ndim == 1:
            Psi = Psi[:, None]
        n, m = Psi.shape
        if m < 1 or m > n:
            raise ValueError(f"basis must have 1 <= N_bf <= N_k columns, got {Psi.shape}")
        if not np.all(np.isfinite(Psi)):
            raise ValueError("basis contains non-finite entries")
        # rank test on column-normalized basis so units do not matter
        s = np.linalg.norm(Psi, axis=0)
        if np.any(s == 0) or np.linalg.matrix_rank(Psi / s) < m:
            raise ValueError("basis columns are linearly dependent")
        Psi.setflags(write=False)
        object.__setattr__(self, "Psi", Psi)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"psi{i}" for i in range(m)))

    @property
    def n_basis(self) -> int:
        return self.Psi.shape[1]

    def signal(self, c, sample_rate: float) -> Signal:
        return Signal(self.Psi @ np.asarray(c, dtype=float), sample_rate, ("uff",))


def derivative_basis(spec: ReferenceSpec, sample_rate: float) -> BasisParameterization:
    """Sampled velocity, acceleration, jerk and snap of the reference."""
    d = reference_derivatives(spec, sample_rate)
    return BasisParameterization(d[:, 1:5], ("velocity", "acceleration", "jerk", "snap"))


def solve_fhofc_basis(problem: FhofcProblem, basis: BasisParameterization, c0=None):
    """Optimize the basis coefficients; returns ``(c, FhofcResult)``.

    Any ``U_ff`` box becomes a soft penalty here, since it does not map to a
    box on the coefficients.
    """
    n = problem.n_samples
    if basis.Psi.shape[0] != n:
        raise ValueError(f"basis has {basis.Psi.shape[0]} rows, horizon is {n}")
    soft = _soft_sets(problem.constraints, slice(None), n)
    lo, hi = problem.constraints.resolved(n)["uff"]
    Psi = basis.Psi
    if np.isfinite(lo).any() or np.isfinite(hi).any():
        soft["uff"] = (lo, hi)
    obj = _Objective(problem.model, problem.controller, problem.reference.values,
                     problem.target_values, slice(None), problem.initial_window(),
                     problem.regularizer.gamma, n, expand=Psi,
                     soft={k: v for k, v in soft.items() if k != "uff"},
                     penalty_weight=problem.constraints.penalty_weight)
    if "uff" in soft:
        base, (ulo, uhi), w = obj, soft["uff"], np.sqrt(problem.constraints.penalty_weight)

        def evaluate(c, jac):
            u = Psi @ c
            viol = u - np.clip(u, ulo, uhi)
            out = base(c, jac)
            if not jac:
                return np.concatenate([out, w * viol])
            r, J = out
            return np.concatenate([r, w * viol]), np.vstack([J, w * (viol != 0)[:, None] * Psi])
    else:
        evaluate = obj
    x0 = np.zeros(basis.n_basis) if c0 is None else np.asarray(c0, dtype=float)
    report = solve(LeastSquaresProblem(evaluate, basis.n_basis), x0, problem.solver)
    return report.x, _result(problem, Psi @ report.x, report, basis=list(basis.names),
                             coefficients=report.x.tolist())


# --------------------------------------------------------------------------
# receding horizon


def _extend(x: np.ndarray, n: int) -> np.ndarray:
    """Pad by holding the last value."""
    if x.size >= n:
        return x[:n]
    return np.concatenate([x, np.full(n - x.size, x[-1])])


def solve_receding_horizon(problem: FhofcProblem, h: int) -> FhofcResult:
    """Commit the first sample of an ``h``-step window optimization at every ``k``.

    At sample ``k`` the window covers outputs ``k+n_k+1 .. k+n_k+h``; the
    reference and target are extended past the horizon by holding their last
    values. Returns a result whose report belongs to the last window.
    """
    orders = problem.model.orders
    n_k = orders.n_k
    if h < n_k + 1:
        raise ValueError(f"horizon h = {h} must be at least n_k + 1 = {n_k + 1}")
    n = problem.n_samples
    n_sim = n_k + h + 1
    r_ext = _extend(problem.reference.values, n + n_sim)
    t_ext = _extend(problem.target_values, n + n_sim)
    lo_all, hi_all = problem.constraints.resolved(n + n_sim)["uff"]
    lo_all[n:], hi_all[n:] = lo_all[n - 1], hi_all[n - 1]
    gamma = problem.regularizer.gamma
    window = problem.initial_window()
    uff = np.zeros(n)
    u_prev = 0.0
    x_warm = np.zeros(h)
    report = None
    iterations = 0
    for k in range(n):
        rows = slice(n_k + 1, n_k + 1 + h)
        soft = _soft_sets(problem.constraints, slice(k, k + n_sim), n + n_sim)
        obj = _Objective(problem.model, problem.controller, r_ext[k:k + n_sim],
                         t_ext[k + n_k + 1:k + n_k + 1 + h], rows, window, gamma, h,
                         u_prev=u_prev, n_x=h, soft=soft,
                         penalty_weight=problem.constraints.penalty_weight)
        lsq = LeastSquaresProblem(obj, h, lo_all[k:k + h], hi_all[k:k + h])
        report = solve(lsq, x_warm, problem.solver)
        iterations += report.iterations
        uff[k] = u_prev = report.x[0]
        x_warm = np.concatenate([report.x[1:], report.x[-1:]])
        step = simulate_model_closed_loop(problem.model, problem.controller, r_ext[k:k + 1],
                                          uff[k:k + 1], window)
        window = step.final_window
    return _result(problem, uff, report, horizon=h, total_iterations=iterations)


# --------------------------------------------------------------------------
# inverse model


def inverse_model_feedforward(model: PgnnModel, R, window: InitialWindow | None = None) -> Signal:
    """Exact inverse of a linear model with ``b_1 != 0``.

    Picks ``u_ff(k)`` so that the model output equals ``r(k+n_k+1)``; past
    outputs are taken equal to the reference (held at ``r(0)`` before the
    start) and the reference is held at its last value beyond the horizon.
    The feedback path stays silent because the predicted error is zero.
    """
    if not model.is_linear:
        raise ValueError("the analytic inverse needs a linear model")
    orders = model.orders
    n_a, n_b, n_k = orders.n_a, orders.n_b, orders.n_k
    a, b = model.theta_phy[:n_a], model.theta_phy[n_a:]
    if n_b < 1 or b[0] == 0:
        raise ValueError("model is not invertible: leading input coefficient is zero")
    r = _values(R)
    fs = R.sample_rate if isinstance(R, Signal) else 1.0
    n = r.size
    window = window or InitialWindow.at_rest(orders, r[0])
    window.check(orders)
    r_pad = np.concatenate([np.full(n_a, r[0]), _extend(r, n + n_k + 1)])
    # u history: window inputs (oldest first) followed by the new samples
    u = np.concatenate([np.asarray(window.past_u, float)[::-1], np.zeros(n)])
    m = orders.n_u_hist
    for k in range(n):
        t = k + n_k + 1
        acc = r_pad[n_a + t]
        for i in range(1, n_a + 1):
            acc -= a[i - 1] * r_pad[n_a + t - i]
        for j in range(2, n_b + 1):
            acc -= b[j - 1] * u[m + t - n_k - j]
        u[m + k] = acc / b[0]
    return Signal(u[m:], fs, ("uff",))


# --------------------------------------------------------------------------
# iterative learning


@dataclass
class IlState:
    iteration: int
    U_ff: Signal
    target: Signal
    E: Signal
    Y_hat: Signal
    alpha: float
    history: list = field(default_factory=list)
    reports: list = field(default_factory=list)

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"learning gain must lie in (0, 1], got {self.alpha}")


PlantHandle = Callable[[Signal], Signal]


def _measure(problem: FhofcProblem, plant: PlantHandle, uff: Signal):
    y = plant(uff)
    e = problem.reference.values - _values(y)
    sim = simulate_model_closed_loop(problem.model, problem.controller, problem.reference.values,
                                     uff.values, problem.initial_window())
    fs = problem.reference.sample_rate
    return Signal(e, fs, ("e",)), sim.Y_hat


def il_initialize(problem: FhofcProblem, plant: PlantHandle, alpha: float, u0=None) -> IlState:
    """Iteration 0: apply ``u0`` (default: the FHOFC solution for target R)."""
    report = None
    if u0 is None:
        res = solve_fhofc(problem)
        uff, report = res.U_ff, res.report
    else:
        uff = u0 if isinstance(u0, Signal) else Signal(_values(u0), problem.reference.sample_rate,
                                                       ("uff",))
    E, Y_hat = _measure(problem, plant, uff)
    return IlState(0, uff, problem.reference, E, Y_hat, alpha, [norm(E, problem.norm_spec)],
                   [report.to_dict() if report else None])


def il_fhofc_step(state: IlState, plant: PlantHandle, problem: FhofcProblem) -> IlState:
    """One learning iteration: re-target with the measured error, re-solve, apply."""
    fs = problem.reference.sample_rate
    target = Signal(state.Y_hat.values + state.alpha * state.E.values, fs, ("target",))
    res = solve_fhofc(problem.with_target(target), state.U_ff)
    E, Y_hat = _measure(problem, plant, res.U_ff)
    return IlState(state.iteration + 1, res.U_ff, target, E, Y_hat, state.alpha,
                   state.history + [norm(E, problem.norm_spec)],
                   state.reports + [res.report.to_dict()])


def run_il_fhofc(problem: FhofcProblem, plant: PlantHandle, alpha: float, iterations: int,
                 u0=None) -> IlState:
    state = il_initialize(problem, plant, alpha, u0)
    for _ in range(iterations):
        state = il_fhofc_step(state, plant, problem)
        log.info("IL iteration %d: error %.4e", state.iteration, state.history[-1])
    return state


def linear_ilc_update(U_ff, E, lifted: LiftedLinear, alpha: float, rcond: float = 1e-12) -> Signal:
    """Lifted update ``U_ff + alpha * M E`` with ``T_G M = I + T_G T_C`` in least squares."""
    u = _values(U_ff)
    e = _values(E)
    n = u.size
    if e.size != n or lifted.T_G.shape != (n, n):
        raise ValueError("lifted model, U_ff and E must share the horizon")
    rhs = e + lifted.T_G @ (lifted.T_C @ e)
    sv = np.linalg.svd(lifted.T_G, compute_uv=False)
    rank = int(np.sum(sv > rcond * sv[0])) if sv[0] > 0 else 0
    if rank == 0:
        raise np.linalg.LinAlgError("lifted plant model is numerically zero")
    du, *_ = np.linalg.lstsq(lifted.T_G, rhs, rcond=rcond)
    fs = U_ff.sample_rate if isinstance(U_ff, Signal) else 1.0
    return Signal(u + alpha * du, fs, ("uff",))
