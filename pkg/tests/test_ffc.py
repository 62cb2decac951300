import numpy as np
import pytest

from pgffc.checks import TIGHT, receding_inverse_deviation, il_ilc_deviation
from pgffc.ffc import (BasisParameterization, ConstraintSets, FhofcProblem, IlState, RegularizerSpec,
                       derivative_basis, difference_matrix, fhofc_cost, il_fhofc_step, il_initialize,
                       inverse_model_feedforward, linear_ilc_update, run_il_fhofc, solve_fhofc,
                       solve_fhofc_basis, solve_receding_horizon)
from pgffc.model import DynOrders, InitialWindow, LiftedLinear, PgnnModel, lift_linear, simulate_model_closed_loop
from pgffc.optim import SolverOptions
from pgffc.plant import FeedbackController
from pgffc.signals import ReferenceSpec, Signal, generate_reference

FS = 100.0


def smooth_reference(n=100):
    t = np.arange(n) / FS
    return Signal(0.01 * (1 - np.cos(2 * np.pi * t)) * (t < 0.8), FS)


def double_integrator(mass=20.0):
    """Exact ZOH discretization of 1 / (mass s^2)."""
    T = 1.0 / FS
    g = T ** 2 / (2 * mass)
    return PgnnModel.from_arx([2.0, -1.0], [g, g])


@pytest.fixture(scope="module")
def benchmark_reference():
    return generate_reference(ReferenceSpec(), FS)


def test_difference_matrix():
    D = difference_matrix(4)
    np.testing.assert_array_equal(D, [[1, 0, 0, 0], [-1, 1, 0, 0], [0, -1, 1, 0], [0, 0, -1, 1]])
    np.testing.assert_array_equal(RegularizerSpec(2.0).matrix(3), 2.0 * difference_matrix(3))
    with pytest.raises(ValueError):
        RegularizerSpec(-1.0)


def test_constraint_validation():
    with pytest.raises(ValueError):
        ConstraintSets(uff_lower=1.0, uff_upper=0.0)
    lo, hi = ConstraintSets(uff_upper=2.0).resolved(3)["uff"]
    assert np.all(np.isneginf(lo)) and np.all(hi == 2.0)


def test_target_length_checked(controller, toy_pair):
    with pytest.raises(ValueError):
        FhofcProblem(toy_pair[0], controller, smooth_reference(10), target=smooth_reference(11))


def test_linear_unregularized_matches_lifted_solve(controller, toy_pair):
    model, _ = toy_pair
    R = smooth_reference()
    res = solve_fhofc(FhofcProblem(model, controller, R))
    L = lift_linear(model, controller, R.n_samples, InitialWindow.at_rest(model.orders, R.values[0]))
    u_ls = np.linalg.lstsq(L.T_u, R.values - L.T_r @ R.values - L.offset, rcond=None)[0]
    assert res.inversion_error < 1e-8
    # u_ff(N-1) cannot influence the horizon, so compare the identifiable part
    np.testing.assert_allclose(res.U_ff.values[:-1], u_ls[:-1], atol=1e-9 * np.abs(u_ls).max())


def test_zero_reference_gives_zero_feedforward(controller, toy_pair):
    model, _ = toy_pair
    R = Signal(np.zeros(50), FS)
    res = solve_fhofc(FhofcProblem(model, controller, R, regularizer=RegularizerSpec(1e-6)))
    assert np.all(res.U_ff.values == 0.0)


def test_cost_never_worse_than_zero_start(controller, linear_fit, benchmark_reference):
    problem = FhofcProblem(linear_fit.model, controller, benchmark_reference, regularizer=RegularizerSpec(1e-6))
    res = solve_fhofc(problem)
    assert fhofc_cost(problem, res.U_ff) <= fhofc_cost(problem, np.zeros(300))
    assert res.report.cost == pytest.approx(fhofc_cost(problem, res.U_ff), rel=1e-12)


def test_inversion_error_monotone_in_gamma(controller, linear_fit, benchmark_reference):
    errs = [solve_fhofc(FhofcProblem(linear_fit.model, controller, benchmark_reference,
                                     regularizer=RegularizerSpec(g))).inversion_error
            for g in (0.0, 1e-6, 5e-5)]
    assert errs[0] <= errs[1] * (1 + 1e-6) and errs[1] <= errs[2] * (1 + 1e-6)


def test_hard_box_respected(controller, toy_pair):
    model, _ = toy_pair
    R = smooth_reference()
    free = solve_fhofc(FhofcProblem(model, controller, R))
    cap = 0.5 * np.abs(free.U_ff.values).max()
    res = solve_fhofc(FhofcProblem(model, controller, R, constraints=ConstraintSets(-cap, cap)))
    assert np.abs(res.U_ff.values).max() <= cap
    assert res.inversion_error > free.inversion_error


def test_soft_output_bound_reduces_violation(controller, toy_pair):
    model, _ = toy_pair
    R = smooth_reference()
    free = solve_fhofc(FhofcProblem(model, controller, R))
    cap = 0.9 * free.Y_hat.values.max()
    soft = solve_fhofc(FhofcProblem(model, controller, R,
                                    constraints=ConstraintSets(y_upper=cap, penalty_weight=1e4)))
    assert soft.Y_hat.values.max() < free.Y_hat.values.max()


def test_time_limit_reported(controller, linear_fit, benchmark_reference):
    res = solve_fhofc(FhofcProblem(linear_fit.model, controller, benchmark_reference,
                                   solver=SolverOptions(gtol=1e-30, xtol=1e-30, ftol=1e-30, time_limit=0.0)))
    assert res.report.reason == "time_limit"


# ---------------------------------------------------------------- basis


def test_basis_rank_check():
    with pytest.raises(ValueError):
        BasisParameterization(np.ones((10, 2)))
    with pytest.raises(ValueError):
        BasisParameterization(np.eye(3, 4))
    with pytest.raises(ValueError):
        BasisParameterization(np.zeros((5, 1)))


def test_identity_basis_matches_full(controller, toy_pair):
    model, _ = toy_pair
    R = smooth_reference(60)
    problem = FhofcProblem(model, controller, R, regularizer=RegularizerSpec(1e-6))
    full = solve_fhofc(problem)
    c, res = solve_fhofc_basis(problem, BasisParameterization(np.eye(60)))
    np.testing.assert_allclose(res.U_ff.values, full.U_ff.values, atol=1e-6 * np.abs(full.U_ff.values).max())
    np.testing.assert_allclose(c, res.U_ff.values)


@pytest.fixture(scope="module")
def basis_vs_full(controller, linear_fit, benchmark_reference):
    problem = FhofcProblem(linear_fit.model, controller, benchmark_reference, regularizer=RegularizerSpec(1e-6))
    full = solve_fhofc(problem)
    basis = derivative_basis(ReferenceSpec(), FS)
    c, res = solve_fhofc_basis(problem, basis)
    zero = fhofc_cost(problem, np.zeros(300))
    return problem, full, res, zero, basis


def test_derivative_basis_structure(basis_vs_full):
    problem, full, res, zero, basis = basis_vs_full
    assert basis.names == ("velocity", "acceleration", "jerk", "snap")
    # restricted feasible set: never below the full-horizon optimum, far below doing nothing
    assert res.report.cost >= full.report.cost
    assert res.report.cost < 1e-2 * zero
    c = res.meta["coefficients"]
    assert c[0] == pytest.approx(50.0, rel=0.1)  # viscous friction
    assert c[1] == pytest.approx(20.0, rel=0.1)  # mass


@pytest.mark.xfail(strict=False, reason="four derivative columns cannot express the flexible, "
                   "nonminimum-phase inverse; measured ratio is about 300")
def test_derivative_basis_within_10x_of_unstructured(basis_vs_full):
    _, full, res, _, _ = basis_vs_full
    assert res.inversion_error <= 10 * full.inversion_error


def test_acceleration_feedforward_recovers_mass(controller, benchmark_reference):
    mass = 20.0
    model = double_integrator(mass)
    accel = derivative_basis(ReferenceSpec(), FS).Psi[:, 1]
    c, res = solve_fhofc_basis(FhofcProblem(model, controller, benchmark_reference),
                               BasisParameterization(accel))
    assert c[0] == pytest.approx(mass, rel=0.05)


def test_basis_row_mismatch(controller, toy_pair):
    with pytest.raises(ValueError):
        solve_fhofc_basis(FhofcProblem(toy_pair[0], controller, smooth_reference(20)),
                          BasisParameterization(np.eye(10)))


# ---------------------------------------------------------------- receding horizon / inverse


def test_receding_horizon_matches_inverse():
    assert receding_inverse_deviation() < 1e-9


def test_horizon_validation(controller, toy_pair):
    with pytest.raises(ValueError):
        solve_receding_horizon(FhofcProblem(toy_pair[0], controller, smooth_reference(10)), 0)


def test_full_window_first_move_matches_fhofc(controller, toy_pair):
    model, _ = toy_pair
    n = 30
    R = smooth_reference(n)
    reg = RegularizerSpec(1e-6)
    rh = solve_receding_horizon(FhofcProblem(model, controller, R, regularizer=reg, solver=TIGHT), n)
    # the k = 0 window targets outputs 1..N, i.e. the full problem on R held one sample longer
    R_ext = Signal(np.append(R.values, R.values[-1]), FS)
    full = solve_fhofc(FhofcProblem(model, controller, R_ext, regularizer=reg, solver=TIGHT))
    assert rh.U_ff.values[0] == pytest.approx(full.U_ff.values[0], rel=1e-6)


def test_short_horizon_worse_on_nonminimum_phase(controller, linear_fit, benchmark_reference):
    problem = FhofcProblem(linear_fit.model, controller, benchmark_reference, regularizer=RegularizerSpec(1e-6))
    full = solve_fhofc(problem)
    short = solve_receding_horizon(problem, 5)
    assert short.inversion_error > full.inversion_error


def test_inverse_of_double_integrator(controller):
    mass = 20.0
    model = PgnnModel.from_arx([2.0, -1.0], [1.0 / mass])
    r = np.sin(np.linspace(0, 3, 80)) * 0.01
    u = inverse_model_feedforward(model, Signal(r, FS)).values
    # y(k+1) = 2 y(k) - y(k-1) + u(k) / m  =>  u(k) = m (r(k+1) - 2 r(k) + r(k-1))
    expected = mass * (r[2:] - 2 * r[1:-1] + r[:-2])
    np.testing.assert_allclose(u[1:-1], expected, atol=1e-15)


def test_inverse_settles_to_constant(controller):
    model = PgnnModel.from_arx([0.9], [0.1])
    u = inverse_model_feedforward(model, Signal(np.full(20, 0.3), FS)).values
    np.testing.assert_allclose(u, 0.3, rtol=1e-12)


def test_inverse_makes_model_track(controller):
    model = PgnnModel.from_arx([1.5, -0.56], [1e-4, 0.5e-4])
    r = 0.01 * np.sin(np.linspace(0, 3, 50))
    u = inverse_model_feedforward(model, Signal(r, FS))
    y = simulate_model_closed_loop(model, controller, r, u.values).Y_hat.values
    np.testing.assert_allclose(y, r, atol=1e-14)


def test_inverse_rejects_non_invertible(rng):
    with pytest.raises(ValueError):
        inverse_model_feedforward(PgnnModel.from_arx([0.5], [0.0]), Signal(np.zeros(5), FS))
    net = PgnnModel(DynOrders(1, 1), [0.5, 1.0], [[1.0, 1.0]], [0.0], [1.0])
    with pytest.raises(ValueError):
        inverse_model_feedforward(net, Signal(np.zeros(5), FS))


# ---------------------------------------------------------------- iterative learning


def model_plant(model, controller, R):
    return lambda U: simulate_model_closed_loop(model, controller, R, U).Y_hat


def test_il_state_gain_range():
    s = Signal(np.zeros(3), FS)
    with pytest.raises(ValueError):
        IlState(0, s, s, s, s, 0.0)
    with pytest.raises(ValueError):
        IlState(0, s, s, s, s, 1.5)


def test_il_target_is_reached_by_model(controller, toy_pair):
    model, plant = toy_pair
    R = smooth_reference()
    problem = FhofcProblem(model, controller, R, solver=TIGHT)
    state = il_initialize(problem, model_plant(plant, controller, R), 1.0)
    state = il_fhofc_step(state, model_plant(plant, controller, R), problem)
    y = simulate_model_closed_loop(model, controller, R.values, state.U_ff.values).Y_hat.values
    assert np.abs(state.target.values[1:] - y[1:]).max() < 1e-12


def test_perfect_model_converges_immediately(controller, toy_pair):
    model, _ = toy_pair
    R = smooth_reference()
    state = run_il_fhofc(FhofcProblem(model, controller, R, solver=TIGHT),
                         model_plant(model, controller, R), 1.0, 1)
    assert state.history[0] < 1e-10 and state.history[1] < 1e-10


def test_il_reduces_error_with_mismatch(controller, toy_pair):
    model, plant = toy_pair
    R = smooth_reference()
    state = run_il_fhofc(FhofcProblem(model, controller, R, solver=TIGHT),
                         model_plant(plant, controller, R), 1.0, 3)
    assert state.iteration == 3 and len(state.history) == 4
    assert all(b < a for a, b in zip(state.history, state.history[1:]))
    assert state.history[-1] < 0.05 * state.history[0]


def test_il_fhofc_matches_linear_ilc():
    assert il_ilc_deviation() < 1e-8


def test_ilc_unit_delay_shift():
    n = 6
    T_G = np.eye(n, k=-1)
    z = np.zeros((n, n))
    lifted = LiftedLinear(z, z, np.zeros(n), T_G, z)
    e = np.arange(1.0, n + 1)
    u0 = np.ones(n)
    out = linear_ilc_update(Signal(u0, FS), Signal(e, FS), lifted, 0.5).values
    # advanced error e(k+1); the last sample is unobservable and stays put
    np.testing.assert_allclose(out[:-1], u0[:-1] + 0.5 * e[1:])
    assert out[-1] == 1.0


def test_ilc_zero_gain_is_identity(controller, toy_pair):
    model, _ = toy_pair
    lifted = lift_linear(model, controller, 20)
    u = Signal(np.linspace(0, 1, 20), FS)
    e = Signal(np.ones(20), FS)
    once = linear_ilc_update(u, e, lifted, 0.0)
    twice = linear_ilc_update(once, e, lifted, 0.0)
    np.testing.assert_array_equal(twice.values, u.values)


def test_ilc_rejects_zero_model():
    n = 4
    z = np.zeros((n, n))
    with pytest.raises(np.linalg.LinAlgError):
        linear_ilc_update(np.zeros(n), np.ones(n), LiftedLinear(z, z, np.zeros(n), z, z), 1.0)
