"""
Fast invariant suite behind ``pgffc verify`` and reused by the tests.

Each check takes the experiment config and returns ``(passed, detail)``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .bounds import compute_budget
from .ffc import (FhofcProblem, il_initialize, il_fhofc_step, inverse_model_feedforward,
                  linear_ilc_update, solve_receding_horizon)
from .io import read_json, sha256_file
from .model import DynOrders, InitialWindow, PgnnModel, lift_linear, simulate_model_closed_loop
from .optim import SolverOptions
from .plant import (FeedbackController, NoiseSpec, PlantParams, discretize_controller, realize,
                    simulate_closed_loop, zoh_linear_closed_loop)
from .signals import NormSpec, Signal, norm

TIGHT = SolverOptions(max_iterations=100, gtol=1e-14, xtol=1e-15, ftol=1e-15)


def random_pgnn(rng: np.random.Generator, orders=DynOrders(2, 3, 1), n_1: int = 5) -> PgnnModel:
    n_phi = orders.n_phi
    return PgnnModel(orders, 0.3 * rng.standard_normal(n_phi), rng.standard_normal((n_1, n_phi)),
                     rng.standard_normal(n_1), 0.1 * rng.standard_normal(n_1), 0.2)


def sensitivity_errors(seed: int, n: int = 50, h: float = 1e-6) -> tuple[float, float]:
    """Relative max errors of dY/dtheta and dY/dU_ff against central differences."""
    rng = np.random.default_rng(seed)
    model = random_pgnn(rng)
    ctl = FeedbackController(0.5, 0.1, -0.2, 0.05, 100.0)
    R, U = rng.standard_normal(n), rng.standard_normal(n)
    w = InitialWindow(rng.standard_normal(model.orders.n_a), rng.standard_normal(model.orders.n_u_hist), 0.1)
    sim = simulate_model_closed_loop(model, ctl, R, U, w, jac_theta=True, jac_uff=True)

    def y(m, u):
        return simulate_model_closed_loop(m, ctl, R, u, w).Y_hat.values

    th = model.theta
    J_th = np.empty_like(sim.dY_dtheta)
    for i in range(th.size):
        d = np.zeros_like(th)
        d[i] = h
        J_th[:, i] = (y(model.with_theta(th + d), U) - y(model.with_theta(th - d), U)) / (2 * h)
    J_u = np.empty((n, n))
    for i in range(n):
        d = np.zeros(n)
        d[i] = h
        J_u[:, i] = (y(model, U + d) - y(model, U - d)) / (2 * h)
    e_th = np.abs(J_th - sim.dY_dtheta).max() / np.abs(J_th).max()
    e_u = np.abs(J_u - sim.dY_duff).max() / np.abs(J_u).max()
    return float(e_th), float(e_u)


def check_sensitivities(cfg=None, seeds=range(10)):
    worst = max(max(sensitivity_errors(s)) for s in seeds)
    return worst < 1e-5, f"max relative error {worst:.2e}"


def linear_oracle_error(sample_rate: float = 100.0, seconds: float = 3.0, seed: int = 0) -> float:
    """Cogging-free RK4 closed loop against the exact ZOH discretization."""
    real = realize(PlantParams(c=0.0))
    ctl = discretize_controller(sample_rate)
    n = int(round(seconds * sample_rate))
    rng = np.random.default_rng(seed)
    R = Signal(np.cumsum(rng.standard_normal(n)) * 1e-3, sample_rate)
    U = Signal(rng.standard_normal(n), sample_rate)
    y = simulate_closed_loop(real, ctl, R, U, NoiseSpec(0.0))
    y_ref = zoh_linear_closed_loop(real, ctl, R, U)
    return float(np.abs(y.values - y_ref.values).max())


def check_linear_oracle(cfg=None):
    err = linear_oracle_error()
    return err < 1e-8, f"max deviation {err:.2e} m"


def toy_arx_pair():
    """Minimum-phase second-order model and a mismatched plant of the same form."""
    model = PgnnModel.from_arx([1.5, -0.56], [1e-4, 0.5e-4])
    plant = PgnnModel.from_arx([1.45, -0.52], [1.1e-4, 0.4e-4])
    return model, plant


def bound_sweep_min_slack(n_cases: int = 100, seed: int = 0, n: int = 60) -> float:
    """Smallest slack of the normalized error bound over random (theta, U_ff)."""
    rng = np.random.default_rng(seed)
    ctl = discretize_controller(100.0)
    _, plant = toy_arx_pair()
    t = np.arange(n) / 100.0
    R = 0.01 * (1 - np.cos(2 * np.pi * t))
    R_d = 0.01 * np.sin(2 * np.pi * t)
    worst = np.inf
    for _ in range(n_cases):
        model = PgnnModel(DynOrders(2, 2, 0), np.array([1.5, -0.56, 1e-4, 0.5e-4])
                          * (1 + 0.05 * rng.standard_normal(4)),
                          0.5 * rng.standard_normal((3, 4)) * np.array([100, 100, 0.1, 0.1]),
                          rng.standard_normal(3), 1e-4 * rng.standard_normal(3), 0.0)
        U = rng.standard_normal(n)
        U_d = rng.standard_normal(n)
        noise = 1e-6 * rng.standard_normal(n)
        Y = simulate_model_closed_loop(plant, ctl, R, U).Y_hat.values + noise
        Y_hat = simulate_model_closed_loop(model, ctl, R, U).Y_hat.values
        Y_d = simulate_model_closed_loop(plant, ctl, R_d, U_d).Y_hat.values
        Y_hat_d = simulate_model_closed_loop(model, ctl, R_d, U_d).Y_hat.values
        for spec in (NormSpec(2, True), NormSpec(1, False)):
            worst = min(worst, compute_budget(R, Y, Y_hat, Y_d, Y_hat_d, spec).slack)
    return float(worst)


def check_bound_sweep(cfg=None):
    slack = bound_sweep_min_slack()
    return slack >= -1e-12, f"min slack {slack:.3e}"


def receding_inverse_deviation(n: int = 200, seed: int = 0) -> float:
    """Receding horizon h = n_k + 1 with no regularizer against the inverse model."""
    model = PgnnModel.from_arx([0.9], [1e-4])
    ctl = discretize_controller(100.0)
    rng = np.random.default_rng(seed)
    r = np.cumsum(rng.standard_normal(n)) * 1e-3
    r[0] = 0.0
    R = Signal(r, 100.0)
    rh = solve_receding_horizon(FhofcProblem(model, ctl, R), model.orders.n_k + 1)
    inv = inverse_model_feedforward(model, R)
    return float(np.abs(rh.U_ff.values - inv.values).max())


def check_receding_inverse(cfg=None):
    dev = receding_inverse_deviation()
    return dev < 1e-9, f"max deviation {dev:.2e} N"


def il_ilc_deviation(alphas=(0.5, 1.0), iterations: int = 3, n: int = 100) -> float:
    """IL-FHOFC with no regularizer against lifted linear ILC, per iteration."""
    model, plant_model = toy_arx_pair()
    ctl = discretize_controller(100.0)
    t = np.arange(n) / 100.0
    R = Signal(0.01 * (1 - np.cos(2 * np.pi * t)) * (t < 0.8), 100.0)
    lifted = lift_linear(model, ctl, n, InitialWindow.at_rest(model.orders, 0.0))

    def plant(U):
        return simulate_model_closed_loop(plant_model, ctl, R, U).Y_hat

    worst = 0.0
    for alpha in alphas:
        problem = FhofcProblem(model, ctl, R, solver=TIGHT)
        state = il_initialize(problem, plant, alpha, np.zeros(n))
        for _ in range(iterations):
            expected = linear_ilc_update(state.U_ff, state.E, lifted, alpha)
            state = il_fhofc_step(state, plant, problem)
            worst = max(worst, float(np.abs(state.U_ff.values - expected.values).max()))
    return worst


def check_il_ilc(cfg=None):
    dev = il_ilc_deviation()
    return dev < 1e-8, f"max deviation {dev:.2e} N"


def check_epsilon_identity(cfg=None):
    rng = np.random.default_rng(3)
    y, y_hat = rng.standard_normal(300), rng.standard_normal(300)
    r = rng.standard_normal(300)
    eps = compute_budget(r, y, y_hat, y, y_hat).epsilon
    return abs(eps) <= 1e-14, f"epsilon {eps:.1e}"


FAST_CHECKS = (
    ("linear_plant_oracle", check_linear_oracle),
    ("sensitivity_jacobians", check_sensitivities),
    ("error_bound_sweep", check_bound_sweep),
    ("epsilon_identity", check_epsilon_identity),
    ("receding_horizon_inverse", check_receding_inverse),
    ("il_fhofc_vs_linear_ilc", check_il_ilc),
)


def artifact_checks(out: Path) -> list[tuple[str, bool, str]]:
    """Manifest integrity and loadability of the artifacts in ``out``."""
    from .plant import ClosedLoopDataset

    results = []
    try:
        manifest = read_json(out / "manifest.json")
    except Exception as exc:
        return [("manifest", False, f"{type(exc).__name__}: {exc}")]
    bad = []
    for name, entry in sorted(manifest.get("files", {}).items()):
        p = out / name
        if not p.exists():
            bad.append(f"{name} missing")
        elif p.stat().st_size != entry["size"] or sha256_file(p) != entry["sha256"]:
            bad.append(f"{name} modified")
    results.append(("manifest", not bad, "; ".join(bad) or f"{len(manifest.get('files', {}))} files"))
    for name in sorted(manifest.get("files", {})):
        if name.startswith("model_") and (out / name).exists():
            try:
                PgnnModel.load(out / name)
                results.append((f"load {name}", True, "ok"))
            except Exception as exc:
                results.append((f"load {name}", False, f"{type(exc).__name__}: {exc}"))
    if (out / "dataset.csv").exists():
        try:
            ds = ClosedLoopDataset.load(out / "dataset.csv", out / "dataset.json")
            results.append(("load dataset", True, f"{ds.n_samples} samples"))
        except Exception as exc:
            results.append(("load dataset", False, f"{type(exc).__name__}: {exc}"))
    return results
