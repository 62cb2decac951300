import math

import numpy as np
import pytest
from scipy import signal as sps

from pgffc.checks import linear_oracle_error
from pgffc.plant import (ClosedLoopDataset, DataGenSpec, NoiseSpec, PlantParams, discretize_controller,
                         excitation_signal, generate_training_data, realize, simulate_closed_loop)
from pgffc.signals import ReferenceSpec, Signal


def test_table_defaults():
    p = PlantParams()
    assert (p.m, p.l_x, p.l_y, p.J, p.f_v, p.k, p.d, p.l_m, p.c) == (
        20.0, 1.0, 1.0, 40.0 / 3.0, 50.0, 25000.0 / 3.0, 575.0 / 3.0, 0.05, 1.0)


def test_params_validation():
    with pytest.raises(ValueError):
        PlantParams(m=0.0)
    with pytest.raises(ValueError):
        PlantParams(k=-1.0)


def test_coefficients_by_hand():
    p = PlantParams()
    np.testing.assert_allclose(p.numerator(), [-20 / 3, 1000 / 3, 50000 / 3], rtol=1e-14)
    Jm = 20 * 40 / 3
    np.testing.assert_allclose(p.denominator()[0], Jm, rtol=1e-14)
    assert p.denominator()[-1] == 0.0


def test_realization_transfer_matches_coefficients():
    p = PlantParams()
    real = realize(p)
    num, den = sps.ss2tf(real.A, real.B.reshape(-1, 1), real.C.reshape(1, -1), np.zeros((1, 1)))
    np.testing.assert_allclose(num[0] / den[0], np.r_[0.0, 0.0, p.numerator()] / p.denominator()[0],
                               rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(den / den[0], p.denominator() / p.denominator()[0], rtol=1e-10, atol=1e-12)


def test_nonminimum_phase_zero():
    zeros = np.sort(np.roots(PlantParams().numerator()).real)
    np.testing.assert_allclose(zeros, [-30.9, 80.9], atol=0.05)
    # hand solution of (-20/3) s^2 + (1000/3) s + 50000/3 = 0
    disc = math.sqrt(50**2 + 4 * 2500)
    np.testing.assert_allclose(zeros, [(50 - disc) / 2, (50 + disc) / 2], rtol=1e-12)


def test_rigid_body_integrator():
    poles = np.roots(PlantParams().denominator())
    assert np.min(np.abs(poles)) < 1e-9


def test_minimum_phase_limit():
    p = PlantParams(l_y=0.0)
    assert p.numerator()[0] == p.J
    assert np.all(np.roots(p.numerator()).real < 0)


def test_controller_pole():
    ctl = discretize_controller(100.0)
    assert ctl.a == pytest.approx(math.exp(-20 * math.pi * 0.01), rel=1e-12)
    assert ctl.a == pytest.approx(0.533488, abs=1e-6)
    assert abs(ctl.a) < 1


def test_controller_dc_gain():
    ctl = discretize_controller(100.0)
    # discrete transfer c_fb b / (z - a) + d_fb evaluated at z = 1
    dc = ctl.c_fb * ctl.b / (1.0 - ctl.a) + ctl.d_fb
    assert dc == pytest.approx(1000.0, rel=1e-9)
    assert ctl.dc_gain() == pytest.approx(1000.0, rel=1e-9)


def test_controller_matches_scipy_zoh():
    ctl = discretize_controller(100.0)
    num, den, _ = sps.cont2discrete(([5e3, 5e3 * 4 * math.pi], [1.0, 20 * math.pi]), 0.01, "zoh")
    imp = ctl.impulse_response(20)
    _, ref = sps.dimpulse((num, den, 0.01), n=20)
    np.testing.assert_allclose(imp, np.squeeze(ref[0]), rtol=1e-10, atol=1e-9)


def test_controller_fast_sampling_limit():
    assert discretize_controller(1e6).a == pytest.approx(1.0, abs=1e-4)
    with pytest.raises(ValueError):
        discretize_controller(0.0)


def test_equilibrium(realization, controller):
    z = Signal(np.zeros(200), 100.0)
    y = simulate_closed_loop(realization, controller, z, z, NoiseSpec(0.0))
    assert np.all(y.values == 0.0)


def test_linear_oracle():
    assert linear_oracle_error() < 1e-8


def test_seed_determinism(realization, controller, rng):
    R = Signal(np.cumsum(rng.standard_normal(100)) * 1e-3, 100.0)
    U = Signal(rng.standard_normal(100), 100.0)
    a = simulate_closed_loop(realization, controller, R, U, NoiseSpec(1e-6, 7))
    b = simulate_closed_loop(realization, controller, R, U, NoiseSpec(1e-6, 7))
    c = simulate_closed_loop(realization, controller, R, U, NoiseSpec(1e-6, 8))
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_substep_convergence(realization, controller, rng):
    from pgffc.signals import generate_reference
    R = generate_reference(ReferenceSpec(), 100.0)
    U = Signal(20 * rng.standard_normal(R.n_samples), 100.0)
    y10 = simulate_closed_loop(realization, controller, R, U, substeps=10)
    y5 = simulate_closed_loop(realization, controller, R, U, substeps=5)
    assert np.abs(y10.values - y5.values).max() < 1e-9


def test_mismatch_errors(realization, controller):
    with pytest.raises(ValueError):
        simulate_closed_loop(realization, controller, Signal(np.zeros(5), 100.0), Signal(np.zeros(6), 100.0))
    with pytest.raises(ValueError):
        simulate_closed_loop(realization, controller, Signal(np.zeros(5), 50.0), Signal(np.zeros(5), 50.0))


def test_dataset_protocol(benchmark_dataset):
    ds = benchmark_dataset
    assert ds.n_samples == 4500
    t = ds.U_ff_d.times
    u = ds.U_ff_d.values
    inside = (t >= 10.0 - 1e-9) & (t < 40.0 - 1e-9)
    assert np.all(u[~inside] == 0.0)
    assert abs(np.var(u[inside]) / 400.0 - 1.0) < 0.05
    r = ds.R_d.values.reshape(15, 300)
    assert np.all(r == r[0])
    # closed loop stays bounded over the whole experiment
    assert np.abs(ds.Y_d.values).max() < 1e3


def test_dataset_rejects_bad_duration(realization, controller):
    with pytest.raises(ValueError):
        generate_training_data(realization, controller, DataGenSpec(duration=44.0))


def test_excitation_reproducible():
    a = excitation_signal(DataGenSpec(), 100.0)
    b = excitation_signal(DataGenSpec(), 100.0)
    assert np.array_equal(a.values, b.values)


def test_dataset_roundtrip(tmp_path, benchmark_dataset):
    ds = benchmark_dataset
    ds.save(tmp_path / "d.csv", tmp_path / "d.json")
    back = ClosedLoopDataset.load(tmp_path / "d.csv", tmp_path / "d.json")
    assert back.n_samples == ds.n_samples and back.noise == ds.noise
    np.testing.assert_allclose(back.Y_d.values, ds.Y_d.values, rtol=1e-11, atol=1e-300)
    np.testing.assert_allclose(back.U_ff_d.values, ds.U_ff_d.values, rtol=1e-11)
