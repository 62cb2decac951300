"""
Bound-constrained Levenberg-Marquardt for nonlinear least squares.

Minimizes ``0.5 * ||r(x)||^2`` subject to ``lower <= x <= upper``. Steps are
computed on the free variables in Jacobian-column-scaled coordinates and
projected onto the box. Variables sitting on a bound with the gradient
pointing outward are frozen for the iteration.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

TERMINATION_REASONS = ("gradient", "step", "cost", "max_iterations", "time_limit")


@dataclass
class LeastSquaresProblem:
    """``evaluate(x, jacobian)`` returns ``r`` or ``(r, J)`` when ``jacobian`` is true."""

    evaluate: Callable
    n: int
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        self.lower = np.full(self.n, -np.inf) if self.lower is None else np.broadcast_to(
            np.asarray(self.lower, dtype=float), (self.n,)).copy()
        self.upper = np.full(self.n, np.inf) if self.upper is None else np.broadcast_to(
            np.asarray(self.upper, dtype=float), (self.n,)).copy()
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")


@dataclass(frozen=True)
class SolverOptions:
    max_iterations: int = 200
    gtol: float = 1e-8
    xtol: float = 1e-10
    ftol: float = 1e-12
    damping: float = 1e-3
    damping_up: float = 2.0
    damping_down: float = 1.0 / 3.0
    max_damping: float = 1e16
    time_limit: float | None = None
    seed: int = 0

    def __post_init__(self):
        if min(self.gtol, self.xtol, self.ftol, self.damping) <= 0:
            raise ValueError("tolerances and damping must be positive")


@dataclass
class SolveReport:
    x: np.ndarray
    cost: float
    iterations: int
    reason: str
    gradient_norm: float
    projected_start: bool = False
    evaluations: int = 0
    cost_history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"cost": self.cost, "iterations": self.iterations, "reason": self.reason,
                "gradient_norm": self.gradient_norm, "projected_start": self.projected_start,
                "evaluations": self.evaluations, "cost_history": list(self.cost_history)}


def _scaled_gradient(g, col_norm, rnorm, free):
    if rnorm == 0.0 or not free.any():
        return 0.0
    ok = free & (col_norm > 0)
    if not ok.any():
        return 0.0
    return float(np.max(np.abs(g[ok]) / (col_norm[ok] * rnorm)))


def solve(problem: LeastSquaresProblem, x0, options: SolverOptions = SolverOptions()) -> SolveReport:
    lo, hi = problem.lower, problem.upper
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != problem.n:
        raise ValueError(f"x0 has {x0.size} entries, problem has {problem.n}")
    x = np.clip(x0, lo, hi)
    projected = bool(np.any(x != x0))
    if projected:
        log.warning("initial point projected onto the bounds")

    r, J = problem.evaluate(x, True)
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(J))):
        raise ValueError("residual or Jacobian is not finite at the initial point")
    cost = 0.5 * float(r @ r)
    history = [cost]
    evals = 1
    mu = options.damping
    t_start = time.perf_counter()
    reason = "max_iterations"
    gnorm = np.inf
    it = 0
    small_cost_run = 0
    # scaling never shrinks (as in MINPACK), so flat directions cannot blow up
    diag = np.zeros(problem.n)

    while True:
        g = J.T @ r
        col_norm = np.sqrt(np.einsum("ij,ij->j", J, J))
        free = ~(((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0)))
        gnorm = _scaled_gradient(g, col_norm, np.sqrt(2 * cost), free)
        if gnorm <= options.gtol:
            reason = "gradient"
            break
        if it >= options.max_iterations:
            reason = "max_iterations"
            break
        if options.time_limit is not None and time.perf_counter() - t_start > options.time_limit:
            reason = "time_limit"
            break
        it += 1

        diag = np.maximum(diag, col_norm)
        idx = np.flatnonzero(free)
        scale = np.where(diag[idx] > 0, diag[idx], 1.0)
        Js = J[:, idx] / scale
        lam, V = np.linalg.eigh(Js.T @ Js)
        lam = np.maximum(lam, 0.0)
        gs = V.T @ (Js.T @ r)

        accepted = False
        nu = options.damping_up
        while mu <= options.max_damping:
            step = np.zeros_like(x)
            step[idx] = -(V @ (gs / (lam + mu))) / scale
            x_new = np.clip(x + step, lo, hi)
            try:
                r_new = problem.evaluate(x_new, False)
                evals += 1
                ok = np.all(np.isfinite(r_new))
            except FloatingPointError as exc:
                log.debug("trial point rejected: %s", exc)
                ok = False
            if ok:
                cost_new = 0.5 * float(r_new @ r_new)
                lin = r + J @ (x_new - x)
                predicted = cost - 0.5 * float(lin @ lin)
                if cost_new < cost:
                    rho = (cost - cost_new) / predicted if predicted > 0 else 0.0
                    accepted = True
                    break
            mu *= nu
            nu *= 2.0
        if not accepted:
            reason = "step"
            break

        dx = x_new - x
        small_step = np.linalg.norm(dx) <= options.xtol * (options.xtol + np.linalg.norm(x))
        # one stalled step can still leave the iterate far from the minimizer
        small_cost_run = small_cost_run + 1 if (cost - cost_new) <= options.ftol * cost else 0
        x, cost = x_new, cost_new
        history.append(cost)
        # gain-ratio damping update (Nielsen)
        mu = max(mu * max(options.damping_down, 1.0 - (2.0 * rho - 1.0) ** 3), 1e-20)
        r, J = problem.evaluate(x, True)
        evals += 1
        if small_step:
            reason = "step"
            break
        if small_cost_run >= 2:
            reason = "cost"
            break

    if reason != "gradient":
        g = J.T @ r
        free = ~(((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0)))
        gnorm = _scaled_gradient(g, np.sqrt(np.einsum("ij,ij->j", J, J)), np.sqrt(2 * cost), free)
    log.debug("LM finished: %s after %d iterations, cost %.6e", reason, it, cost)
    return SolveReport(x, cost, it, reason, float(gnorm), projected, evals, history)


def check_jacobian(problem: LeastSquaresProblem, x, step=1e-6, order: int = 2) -> float:
    """Largest per-column relative error between the Jacobian and central differences.

    A scalar ``step`` is relative (``step * max(1, |x_j|)``); an array gives
    absolute per-variable steps. ``order=4`` uses the five-point stencil, for
    residuals whose curvature swamps the second-order estimate.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    x = np.asarray(x, dtype=float)
    _, J = problem.evaluate(x, True)
    steps = np.broadcast_to(step, x.shape) if np.ndim(step) else step * np.maximum(1.0, np.abs(x))

    def diff(j, h):
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        return problem.evaluate(xp, False) - problem.evaluate(xm, False)

    worst = 0.0
    for j in range(x.size):
        h = float(steps[j])
        if order == 2:
            fd = diff(j, h) / (2 * h)
        else:
            fd = (8 * diff(j, h) - diff(j, 2 * h)) / (12 * h)
        denom = max(np.linalg.norm(fd), np.linalg.norm(J[:, j]))
        if denom > 0:
            worst = max(worst, float(np.linalg.norm(fd - J[:, j]) / denom))
    return worst
