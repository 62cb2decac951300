"""
Physics-guided neural network (PGNN) input-output model in closed loop.

One step of the model is::

    yhat(k) = theta_phy . phi(k) + W2 tanh(W1 phi(k) + B1) + B2
    phi(k)  = [yhat(k-1) .. yhat(k-n_a), uhat(k-n_k-1) .. uhat(k-n_k-n_b)]

and the loop is closed with the discrete feedback controller,
``uhat(k) = C(q)(r(k) - yhat(k)) + u_ff(k)``. Exact first-order
sensitivities with respect to the parameters and to the feedforward
sequence are propagated forward alongside the simulation.

Parameter vector layout: ``theta = [theta_phy, col(W1), B1, W2, B2]`` where
``col`` stacks columns. A model with ``n_1 = 0`` is the pure linear model and
has no network parameters at all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.linalg import solve_triangular, toeplitz

from .io import read_json, write_json
from .plant import FeedbackController
from .signals import Signal


class ModelDivergence(FloatingPointError):
    """Raised when a closed-loop model simulation produces non-finite values."""

    def __init__(self, step: int, value: float):
        super().__init__(f"model simulation diverged at step {step} (yhat = {value})")
        self.step = step


@dataclass(frozen=True)
class DynOrders:
    n_a: int = 4
    n_b: int = 4
    n_k: int = 0

    def __post_init__(self):
        if min(self.n_a, self.n_b, self.n_k) < 0 or self.n_a + self.n_b < 1:
            raise ValueError(f"invalid dynamic orders {self}")

    @property
    def n_phi(self) -> int:
        return self.n_a + self.n_b

    @property
    def n_u_hist(self) -> int:
        """Past inputs needed before k = 0."""
        return self.n_k + self.n_b


@dataclass(frozen=True)
class PgnnModel:
    orders: DynOrders
    theta_phy: np.ndarray
    W1: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    B1: np.ndarray = field(default_factory=lambda: np.zeros(0))
    W2: np.ndarray = field(default_factory=lambda: np.zeros(0))
    B2: float = 0.0

    def __post_init__(self):
        n_phi = self.orders.n_phi
        theta_phy = np.array(self.theta_phy, dtype=float).reshape(-1)
        W1 = np.array(self.W1, dtype=float).reshape(-1, n_phi) if np.size(self.W1) else np.zeros((0, n_phi))
        B1 = np.array(self.B1, dtype=float).reshape(-1)
        W2 = np.array(self.W2, dtype=float).reshape(-1)
        if theta_phy.size != n_phi:
            raise ValueError(f"theta_phy has {theta_phy.size} entries, expected {n_phi}")
        n1 = W1.shape[0]
        if B1.size != n1 or W2.size != n1:
            raise ValueError(f"inconsistent hidden width: W1 {W1.shape}, B1 {B1.size}, W2 {W2.size}")
        if n1 == 0 and self.B2 != 0:
            raise ValueError("the linear model (n_1 = 0) has no output bias")
        for arr in (theta_phy, W1, B1, W2):
            arr.setflags(write=False)
        object.__setattr__(self, "theta_phy", theta_phy)
        object.__setattr__(self, "W1", W1)
        object.__setattr__(self, "B1", B1)
        object.__setattr__(self, "W2", W2)
        object.__setattr__(self, "B2", float(self.B2))

    @property
    def n_1(self) -> int:
        return self.W1.shape[0]

    @property
    def n_theta(self) -> int:
        n1, n_phi = self.n_1, self.orders.n_phi
        return n_phi + (n1 * n_phi + 2 * n1 + 1 if n1 else 0)

    @property
    def is_linear(self) -> bool:
        return self.n_1 == 0

    @property
    def theta(self) -> np.ndarray:
        parts = [self.theta_phy]
        if self.n_1:
            parts += [self.W1.reshape(-1, order="F"), self.B1, self.W2, [self.B2]]
        return np.concatenate(parts)

    def with_theta(self, theta) -> "PgnnModel":
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_theta:
            raise ValueError(f"theta has {theta.size} entries, expected {self.n_theta}")
        n1, n_phi = self.n_1, self.orders.n_phi
        if not n1:
            return PgnnModel(self.orders, theta)
        i = n_phi
        W1 = theta[i:i + n1 * n_phi].reshape((n1, n_phi), order="F")
        i += n1 * n_phi
        B1 = theta[i:i + n1]
        W2 = theta[i + n1:i + 2 * n1]
        return PgnnModel(self.orders, theta[:n_phi], W1, B1, W2, theta[-1])

    @classmethod
    def linear(cls, theta_phy, orders: DynOrders = DynOrders()) -> "PgnnModel":
        return cls(orders, theta_phy)

    @classmethod
    def from_arx(cls, a, b, n_k: int = 0) -> "PgnnModel":
        """Linear model ``y(k) = sum a_i y(k-i) + sum b_j u(k-n_k-j)``."""
        a, b = np.atleast_1d(a), np.atleast_1d(b)
        return cls(DynOrders(a.size, b.size, n_k), np.concatenate([a, b]))

    def to_dict(self) -> dict:
        o = self.orders
        return {
            "orders": {"n_a": o.n_a, "n_b": o.n_b, "n_k": o.n_k},
            "theta_phy": self.theta_phy.tolist(),
            "W1": self.W1.tolist(),
            "B1": self.B1.tolist(),
            "W2": [self.W2.tolist()],
            "B2": self.B2,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PgnnModel":
        try:
            orders = DynOrders(**d["orders"])
            return cls(orders, d["theta_phy"], d.get("W1") or np.zeros((0, orders.n_phi)),
                       d.get("B1", []), np.asarray(d.get("W2") or [[]], dtype=float).reshape(-1),
                       float(d.get("B2", 0.0)))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed model description: {exc!r}") from None

    def save(self, path, meta: dict | None = None) -> None:
        d = self.to_dict()
        d["meta"] = meta or {}
        write_json(path, d)

    @classmethod
    def load(cls, path) -> "PgnnModel":
        return cls.from_dict(read_json(path))


def predict_one_step(model: PgnnModel, phi) -> float:
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (model.orders.n_phi,):
        raise ValueError(f"regressor has shape {phi.shape}, expected ({model.orders.n_phi},)")
    y = float(model.theta_phy @ phi)
    if model.n_1:
        y += float(model.W2 @ np.tanh(model.W1 @ phi + model.B1)) + model.B2
    return y


@dataclass(frozen=True)
class InitialWindow:
    """Model state before sample 0.

    ``past_y = [yhat(-1), ..., yhat(-n_a)]``,
    ``past_u = [uhat(-1), ..., uhat(-n_k-n_b)]``, plus the controller state.
    """

    past_y: np.ndarray
    past_u: np.ndarray
    controller_state: float = 0.0

    @classmethod
    def zeros(cls, orders: DynOrders) -> "InitialWindow":
        return cls(np.zeros(orders.n_a), np.zeros(orders.n_u_hist))

    @classmethod
    def at_rest(cls, orders: DynOrders, r0: float) -> "InitialWindow":
        """Past outputs held at ``r(0)``, past inputs zero."""
        return cls(np.full(orders.n_a, float(r0)), np.zeros(orders.n_u_hist))

    def check(self, orders: DynOrders) -> None:
        if np.size(self.past_y) != orders.n_a or np.size(self.past_u) != orders.n_u_hist:
            raise ValueError(f"window lengths ({np.size(self.past_y)}, {np.size(self.past_u)}) do "
                             f"not match orders (n_a={orders.n_a}, n_k+n_b={orders.n_u_hist})")


@dataclass
class ClosedLoopSim:
    Y_hat: Signal
    U_hat: Signal
    dY_dtheta: np.ndarray | None = None
    dY_duff: np.ndarray | None = None
    final_window: InitialWindow | None = None


def _as_array(x):
    if isinstance(x, Signal):
        if x.n_channels != 1:
            raise ValueError("model simulation is SISO")
        return x.values
    return np.asarray(x, dtype=float).reshape(-1)


@njit(cache=True)
def _closed_loop_kernel(theta_phy, W1, B1, W2, B2, n_a, n_b, m_u, a, b, cf, df, r, uff,
                        ybuf, ubuf, w, n_th, jac_uff, SY, SU):
    """Recurrent simulation with forward sensitivities, in place on the buffers.

    Returns ``(k, w)`` where ``k`` is the first non-finite step or -1.
    """
    n = r.size
    n1 = W1.shape[0]
    n_phi = n_a + n_b
    n_cols = SY.shape[1]
    phi = np.empty(n_phi)
    h = np.empty(n1)
    s = np.empty(n1)
    g = np.empty(n_phi)
    Sy = np.empty(n_cols)
    Sw = np.zeros(n_cols)
    for k in range(n):
        for i in range(n_a):
            phi[i] = ybuf[k + n_a - 1 - i]
        for j in range(n_b):
            phi[n_a + j] = ubuf[k + n_b - 1 - j]
        y = 0.0
        for i in range(n_phi):
            y += theta_phy[i] * phi[i]
        if n1 > 0:
            for q in range(n1):
                z = B1[q]
                for i in range(n_phi):
                    z += W1[q, i] * phi[i]
                h[q] = np.tanh(z)
                y += W2[q] * h[q]
            y += B2
        if not np.isfinite(y):
            ybuf[n_a + k] = y
            return k, w
        e = r[k] - y
        u = cf * w + df * e + uff[k]
        ybuf[n_a + k] = y
        ubuf[m_u + k] = u

        if n_cols > 0:
            for i in range(n_phi):
                g[i] = theta_phy[i]
            for q in range(n1):
                s[q] = W2[q] * (1.0 - h[q] * h[q])
                for i in range(n_phi):
                    g[i] += s[q] * W1[q, i]
            # sensitivities w.r.t. u_ff(j) vanish for j >= k
            n_live = n_th + k if jac_uff else n_th
            for c in range(n_live):
                acc = 0.0
                for i in range(n_a):
                    acc += g[i] * SY[k + n_a - 1 - i, c]
                for j in range(n_b):
                    acc += g[n_a + j] * SU[k + n_b - 1 - j, c]
                Sy[c] = acc
            for c in range(n_live, n_cols):
                Sy[c] = 0.0
            if n_th > 0:
                for i in range(n_phi):
                    Sy[i] += phi[i]
                if n1 > 0:
                    base = n_phi
                    for i in range(n_phi):
                        for q in range(n1):
                            Sy[base + i * n1 + q] += s[q] * phi[i]
                    base += n1 * n_phi
                    for q in range(n1):
                        Sy[base + q] += s[q]
                        Sy[base + n1 + q] += h[q]
                    Sy[base + 2 * n1] += 1.0
            for c in range(n_cols):
                SY[n_a + k, c] = Sy[c]
                SU[m_u + k, c] = cf * Sw[c] - df * Sy[c]
                Sw[c] = a * Sw[c] - b * Sy[c]
            if jac_uff:
                SU[m_u + k, n_th + k] += 1.0
        w = a * w + b * e
    return -1, w


def simulate_model_closed_loop(model: PgnnModel, controller: FeedbackController, R, U_ff,
                               window: InitialWindow | None = None, jac_theta: bool = False,
                               jac_uff: bool = False) -> ClosedLoopSim:
    """Simulate the model in closed loop, optionally with exact Jacobians.

    ``dY_dtheta`` has shape ``(N, n_theta)``; ``dY_duff`` has shape ``(N, N)``
    with entry ``(i, j) = d yhat(i) / d u_ff(j)``.
    """
    if isinstance(R, Signal) and isinstance(U_ff, Signal):
        if R.sample_rate != U_ff.sample_rate:
            raise ValueError("R and U_ff sample rates differ")
        if not math.isclose(R.sample_rate, controller.sample_rate, rel_tol=1e-12):
            raise ValueError("signal rate does not match the controller rate")
    fs = R.sample_rate if isinstance(R, Signal) else controller.sample_rate
    r, uff = _as_array(R), _as_array(U_ff)
    if r.size != uff.size:
        raise ValueError(f"R has {r.size} samples but U_ff has {uff.size}")
    orders = model.orders
    if window is None:
        window = InitialWindow.at_rest(orders, r[0] if r.size else 0.0)
    window.check(orders)
    n, n_a, n_b, m_u = r.size, orders.n_a, orders.n_b, orders.n_u_hist
    ybuf = np.zeros(n_a + n)
    ybuf[:n_a] = np.asarray(window.past_y, dtype=float)[::-1]
    ubuf = np.zeros(m_u + n)
    ubuf[:m_u] = np.asarray(window.past_u, dtype=float)[::-1]

    n_th = model.n_theta if jac_theta else 0
    n_cols = n_th + (n if jac_uff else 0)
    SY = np.zeros((n_a + n, n_cols))
    SU = np.zeros((m_u + n, n_cols))
    status, w = _closed_loop_kernel(
        model.theta_phy, model.W1, model.B1, model.W2, model.B2, n_a, n_b, m_u,
        controller.a, controller.b, controller.c_fb, controller.d_fb,
        np.ascontiguousarray(r), np.ascontiguousarray(uff), ybuf, ubuf,
        float(window.controller_state), n_th, jac_uff, SY, SU)
    if status >= 0:
        raise ModelDivergence(status, ybuf[n_a + status])

    Y = Signal(ybuf[n_a:], fs, ("yhat",))
    U = Signal(ubuf[m_u:], fs, ("uhat",))
    final = InitialWindow(ybuf[n:][::-1].copy(), ubuf[n:][::-1].copy(), w)
    sim = ClosedLoopSim(Y, U, final_window=final)
    if jac_theta:
        sim.dY_dtheta = SY[n_a:, :n_th]
    if jac_uff:
        sim.dY_duff = SY[n_a:, n_th:]
    return sim


# --------------------------------------------------------------------------
# lifted form of the linear closed loop


@dataclass
class LiftedLinear:
    """Finite-horizon matrices with ``Yhat = T_r R + T_u U_ff + offset``.

    ``T_G`` maps the plant input ``Uhat`` to ``Yhat`` (open loop, zero
    window), ``T_C`` maps the error ``R - Yhat`` to the feedback input.
    """

    T_r: np.ndarray
    T_u: np.ndarray
    offset: np.ndarray
    T_G: np.ndarray
    T_C: np.ndarray

    def output(self, R, U_ff) -> np.ndarray:
        return self.T_r @ _as_array(R) + self.T_u @ _as_array(U_ff) + self.offset


def _lower_toeplitz(first_col, n):
    col = np.zeros(n)
    m = min(n, len(first_col))
    col[:m] = first_col[:m]
    return toeplitz(col, np.zeros(n))


def lift_linear(model: PgnnModel, controller: FeedbackController, n: int,
                window: InitialWindow | None = None) -> LiftedLinear:
    """Build the lifted closed-loop matrices of a linear model over ``n`` samples."""
    if not model.is_linear:
        raise ValueError("lift_linear needs a linear model (n_1 = 0)")
    orders = model.orders
    n_a, n_b, n_k = orders.n_a, orders.n_b, orders.n_k
    a_coef, b_coef = model.theta_phy[:n_a], model.theta_phy[n_a:]
    window = window or InitialWindow.zeros(orders)
    window.check(orders)

    # open loop: T_A Y = T_B U + f, f collecting the pre-sample history
    T_A = _lower_toeplitz(np.concatenate([[1.0], -a_coef]), n)
    T_B = _lower_toeplitz(np.concatenate([np.zeros(n_k + 1), b_coef]), n)
    f = np.zeros(n)
    past_y, past_u = np.asarray(window.past_y, float), np.asarray(window.past_u, float)
    for k in range(min(n, max(n_a, n_k + n_b))):
        for i in range(1, n_a + 1):
            if k - i < 0:
                f[k] += a_coef[i - 1] * past_y[i - k - 1]
        for j in range(1, n_b + 1):
            idx = k - n_k - j
            if idx < 0:
                f[k] += b_coef[j - 1] * past_u[-idx - 1]
    T_G = solve_triangular(T_A, T_B, lower=True)
    y_free = solve_triangular(T_A, f, lower=True)

    T_C = _lower_toeplitz(controller.impulse_response(n), n)
    u_init = controller.c_fb * controller.a ** np.arange(n) * window.controller_state
    L = np.eye(n) + T_G @ T_C
    T_u = solve_triangular(L, T_G, lower=True)
    T_r = solve_triangular(L, T_G @ T_C, lower=True)
    offset = solve_triangular(L, T_G @ u_init + y_free, lower=True)
    return LiftedLinear(T_r, T_u, offset, T_G, T_C)
