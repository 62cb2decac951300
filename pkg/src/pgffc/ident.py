"""
Closed-loop simulation-error identification of PGNN models.

Stage 1 fits the linear physical model (warm-started from an equation-error
least-squares fit). Stage 2 fits the full PGNN with the regularized cost

    ||Y^d - Yhat^d(theta)||^2 + weight * ||theta_phy - theta_phy*||^2

where ``theta_phy*`` is the stage-1 result and the network weights are not
regularized.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .model import DynOrders, InitialWindow, PgnnModel, simulate_model_closed_loop
from .optim import LeastSquaresProblem, SolveReport, SolverOptions, check_jacobian, solve
from .plant import ClosedLoopDataset, FeedbackController
from .signals import NormSpec, norm

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class IdentConfig:
    orders: DynOrders = DynOrders()
    n_1: int = 32
    reg_weight: float = 1.0
    init_scale: float = 0.5
    seed: int = 0
    solver: SolverOptions = SolverOptions(max_iterations=400)
    stage1_solver: SolverOptions = SolverOptions()


@dataclass
class IdentifiedModel:
    model: PgnnModel
    identification_error: float
    report: SolveReport | None
    theta_phy_star: np.ndarray
    meta: dict = field(default_factory=dict)


def applied_input(dataset: ClosedLoopDataset, controller: FeedbackController) -> np.ndarray:
    """Plant input ``u^d = C(q)(r^d - y^d) + u_ff^d`` as applied during the experiment."""
    e = dataset.R_d.values - dataset.Y_d.values
    u = np.empty_like(e)
    w = dataset.w0
    for k, ek in enumerate(e):
        u[k] = controller.c_fb * w + controller.d_fb * ek
        w = controller.a * w + controller.b * ek
    return u + dataset.U_ff_d.values


def dataset_window(dataset: ClosedLoopDataset, controller: FeedbackController,
                   orders: DynOrders) -> tuple[int, InitialWindow]:
    """Seed window from the first recorded samples.

    Returns ``n_w`` and the model state at sample ``n_w``: measured outputs and
    applied inputs before ``n_w`` plus the controller state reached on the
    measured error.
    """
    n_w = max(orders.n_a, orders.n_u_hist)
    y, u = dataset.Y_d.values, applied_input(dataset, controller)
    e = dataset.R_d.values - y
    w = dataset.w0
    for k in range(n_w):
        w = controller.a * w + controller.b * e[k]
    past_y = y[n_w - orders.n_a:n_w][::-1]
    past_u = u[n_w - orders.n_u_hist:n_w][::-1]
    return n_w, InitialWindow(past_y.copy(), past_u.copy(), w)


def simulate_on_dataset(model: PgnnModel, controller: FeedbackController, dataset: ClosedLoopDataset,
                        jacobian: bool = False):
    """Model output over the dataset horizon (seed samples copied from the data).

    Returns ``Yhat^d`` and, when requested, ``dYhat^d/dtheta`` (zero rows for
    the seed samples).
    """
    n_w, window = dataset_window(dataset, controller, model.orders)
    sim = simulate_model_closed_loop(model, controller, dataset.R_d.values[n_w:],
                                     dataset.U_ff_d.values[n_w:], window, jac_theta=jacobian)
    y_hat = np.concatenate([dataset.Y_d.values[:n_w], sim.Y_hat.values])
    if not jacobian:
        return y_hat, None
    J = np.zeros((dataset.n_samples, model.n_theta))
    J[n_w:] = sim.dY_dtheta
    return y_hat, J


def identification_error(model: PgnnModel, controller: FeedbackController, dataset: ClosedLoopDataset,
                         norm_spec: NormSpec = NormSpec()) -> float:
    y_hat, _ = simulate_on_dataset(model, controller, dataset)
    return norm(dataset.Y_d.values - y_hat, norm_spec)


def equation_error_fit(dataset: ClosedLoopDataset, controller: FeedbackController,
                       orders: DynOrders) -> np.ndarray:
    """One-step-ahead linear least squares on measured outputs and applied inputs."""
    y, u = dataset.Y_d.values, applied_input(dataset, controller)
    n_a, n_b, n_k = orders.n_a, orders.n_b, orders.n_k
    n_w = max(n_a, n_k + n_b)
    rows = np.arange(n_w, y.size)
    Phi = np.column_stack([y[rows - i] for i in range(1, n_a + 1)]
                          + [u[rows - n_k - j] for j in range(1, n_b + 1)])
    # column scaling: outputs are metres, inputs newtons
    s = np.linalg.norm(Phi, axis=0)
    s[s == 0] = 1.0
    theta, *_ = np.linalg.lstsq(Phi / s, y[rows], rcond=None)
    return theta / s


def _ident_problem(template: PgnnModel, controller, dataset, theta_star=None, weight=1.0):
    y_d = dataset.Y_d.values
    n_phi = template.orders.n_phi
    reg = np.sqrt(weight)

    def evaluate(theta, jac):
        model = template.with_theta(theta)
        y_hat, J = simulate_on_dataset(model, controller, dataset, jacobian=jac)
        r = y_d - y_hat
        if theta_star is not None:
            r = np.concatenate([r, reg * (theta[:n_phi] - theta_star)])
        if not jac:
            return r
        J = -J
        if theta_star is not None:
            Jr = np.zeros((n_phi, theta.size))
            Jr[:, :n_phi] = reg * np.eye(n_phi)
            J = np.vstack([J, Jr])
        return r, J

    return LeastSquaresProblem(evaluate, template.n_theta)


def identify_physical(dataset: ClosedLoopDataset, controller: FeedbackController,
                      config: IdentConfig = IdentConfig(),
                      norm_spec: NormSpec = NormSpec()) -> IdentifiedModel:
    """Stage 1: linear model by closed-loop simulation-error minimization."""
    orders = config.orders
    theta0 = equation_error_fit(dataset, controller, orders)
    template = PgnnModel(orders, theta0)
    problem = _ident_problem(template, controller, dataset)
    report = solve(problem, theta0, config.stage1_solver)
    model = template.with_theta(report.x)
    err = identification_error(model, controller, dataset, norm_spec)
    log.info("stage 1: identification error %.4e (%s, %d it)", err, report.reason, report.iterations)
    return IdentifiedModel(model, err, report, model.theta_phy.copy(),
                           {"stage": 1, "equation_error_theta": theta0.tolist()})


def regressor_scale(dataset: ClosedLoopDataset, controller: FeedbackController,
                    orders: DynOrders) -> np.ndarray:
    """RMS of each regressor entry over the dataset."""
    y, u = dataset.Y_d.values, applied_input(dataset, controller)
    y_rms = np.sqrt(np.mean(y**2)) or 1.0
    u_rms = np.sqrt(np.mean(u**2)) or 1.0
    return np.array([y_rms] * orders.n_a + [u_rms] * orders.n_b)


def initial_pgnn(theta_phy_star, orders: DynOrders, n_1: int, scale: float, seed: int,
                 phi_scale=None) -> PgnnModel:
    """PGNN equal to the physical model: random first layer, zero output layer."""
    rng = np.random.default_rng(seed)
    n_phi = orders.n_phi
    phi_scale = np.ones(n_phi) if phi_scale is None else np.asarray(phi_scale, dtype=float)
    W1 = rng.uniform(-scale, scale, (n_1, n_phi)) / np.sqrt(n_phi) / phi_scale
    B1 = rng.uniform(-scale, scale, n_1) / np.sqrt(n_phi)
    if n_1 == 0:
        return PgnnModel(orders, theta_phy_star)
    return PgnnModel(orders, theta_phy_star, W1, B1, np.zeros(n_1), 0.0)


def embed_pgnn(base: PgnnModel, n_1: int, scale: float, seed: int, phi_scale=None) -> PgnnModel:
    """Wider PGNN reproducing ``base`` exactly: its neurons plus fresh ones with zero output weight."""
    if n_1 < base.n_1:
        raise ValueError(f"cannot embed {base.n_1} hidden units into {n_1}")
    fresh = initial_pgnn(base.theta_phy, base.orders, n_1 - base.n_1, scale, seed, phi_scale)
    if base.n_1 == 0:
        return fresh
    if fresh.n_1 == 0:
        return base
    return PgnnModel(base.orders, base.theta_phy, np.vstack([base.W1, fresh.W1]),
                     np.concatenate([base.B1, fresh.B1]), np.concatenate([base.W2, fresh.W2]), base.B2)


def stage2_problem(dataset, controller, theta_phy_star, config: IdentConfig, init_model=None):
    phi_scale = regressor_scale(dataset, controller, config.orders)
    if init_model is None:
        template = initial_pgnn(theta_phy_star, config.orders, config.n_1, config.init_scale,
                                config.seed, phi_scale)
    else:
        template = embed_pgnn(init_model, config.n_1, config.init_scale, config.seed, phi_scale)
    problem = _ident_problem(template, controller, dataset, np.asarray(theta_phy_star, dtype=float),
                             config.reg_weight)
    return template, problem


def identify_pgnn(dataset: ClosedLoopDataset, controller: FeedbackController, theta_phy_star,
                  config: IdentConfig = IdentConfig(), norm_spec: NormSpec = NormSpec(),
                  init_model: PgnnModel | None = None) -> IdentifiedModel:
    """Stage 2: full PGNN with the physical parameters anchored at ``theta_phy_star``.

    ``init_model`` (a narrower PGNN) is embedded into the initial network
    instead of starting from a purely random first layer.
    """
    template, problem = stage2_problem(dataset, controller, theta_phy_star, config, init_model)
    report = solve(problem, template.theta, config.solver)
    model = template.with_theta(report.x)
    err = identification_error(model, controller, dataset, norm_spec)
    log.info("stage 2 (n_1=%d): identification error %.4e (%s, %d it)", config.n_1, err,
             report.reason, report.iterations)
    return IdentifiedModel(model, err, report, np.asarray(theta_phy_star, dtype=float).copy(),
                           {"stage": 2, "n_1": config.n_1, "seed": config.seed,
                            "reg_weight": config.reg_weight, "init_cost": report.cost_history[0],
                            "warm_start_n_1": init_model.n_1 if init_model is not None else None})


def identify_sweep(dataset: ClosedLoopDataset, controller: FeedbackController, theta_phy_star,
                   widths, config: IdentConfig = IdentConfig(), norm_spec: NormSpec = NormSpec(),
                   nested: bool = True) -> list[IdentifiedModel]:
    """Stage 2 for increasing hidden widths.

    With ``nested`` each fit starts from the previous (narrower) result, so the
    fitted cost cannot increase with the width.
    """
    widths = list(widths)
    if not widths:
        raise ValueError("empty width list")
    order = sorted(range(len(widths)), key=lambda i: widths[i])
    out: list = [None] * len(widths)
    prev = None
    for i in order:
        cfg = replace(config, n_1=widths[i])
        out[i] = identify_pgnn(dataset, controller, theta_phy_star, cfg, norm_spec,
                               prev if nested else None)
        prev = out[i].model
    return out


def stage2_jacobian_error(dataset, controller, theta_phy_star, config: IdentConfig,
                          init_model: PgnnModel | None = None) -> float:
    """Finite-difference check of the stage-2 residual Jacobian at its initial point."""
    template, problem = stage2_problem(dataset, controller, theta_phy_star, config, init_model)
    theta = template.theta
    # parameters span many decades; size each step so the residual moves by
    # about 1e-3 of its norm, which balances truncation against cancellation
    r, J = problem.evaluate(theta, True)
    col = np.linalg.norm(J, axis=0)
    steps = np.where(col > 0, 1e-3 * np.linalg.norm(r) / np.where(col > 0, col, 1.0), 1e-6)
    return check_jacobian(problem, theta, steps, order=4)
