"""
Ground-truth simulator of the rotating-translating mass benchmark.

The plant is a fourth-order linear transfer from the auxiliary force ``xi`` to
the position ``y``, with an output-dependent cogging force closing a
nonlinear loop around it::

    xi = u - c * sin(2*pi*y / l_m)

It runs in closed loop with the ZOH discretization of the lead-lag
controller ``C(s) = 5e3 (s + 4*pi) / (s + 20*pi)`` and measurement noise that
enters both the recorded output and the feedback path.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import expm

from .signals import ReferenceSpec, Signal, generate_reference


@dataclass(frozen=True)
class PlantParams:
    m: float = 20.0
    l_x: float = 1.0
    l_y: float = 1.0
    J: float = 40.0 / 3.0
    f_v: float = 50.0
    k: float = 25000.0 / 3.0
    d: float = 575.0 / 3.0
    l_m: float = 0.05
    c: float = 1.0

    def __post_init__(self):
        for name in ("m", "l_x", "J", "f_v", "k", "d", "l_m"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive, got {getattr(self, name)}")
        # c = 0 (cogging off) and l_y = 0 (minimum phase) are used as limiting cases
        if self.c < 0 or self.l_y < 0:
            raise ValueError("c and l_y must be nonnegative")

    def numerator(self) -> np.ndarray:
        """Coefficients of the xi -> y numerator, highest power first."""
        return np.array([
            self.J - self.l_y**2 * self.m,
            2 * self.l_x * self.d - self.l_y**2 * self.f_v,
            2 * self.l_x * self.k,
        ])

    def denominator(self) -> np.ndarray:
        return np.array([
            self.J * self.m,
            self.f_v * self.J + 2 * self.l_x * self.d * self.m,
            2 * (self.l_x * self.d * self.f_v + self.l_x * self.k * self.m),
            2 * self.l_x * self.k * self.f_v,
            0.0,
        ])


@dataclass(frozen=True)
class PlantRealization:
    """Controllable canonical form of the xi -> y transfer plus cogging data.

    ``A`` is a companion matrix whose last row holds ``-den[::-1] / den[0]``.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: float
    c: float
    l_m: float
    num: np.ndarray
    den: np.ndarray

    @property
    def n_states(self) -> int:
        return self.A.shape[0]


def realize(params: PlantParams = PlantParams()) -> PlantRealization:
    num, den = params.numerator(), params.denominator()
    n = den.size - 1
    lead = den[0]
    A = np.zeros((n, n))
    A[:-1, 1:] = np.eye(n - 1)
    A[-1, :] = -den[:0:-1] / lead
    B = np.zeros((n, 1))
    B[-1, 0] = 1.0
    C = np.zeros((1, n))
    C[0, : num.size] = num[::-1] / lead
    return PlantRealization(A, B, C, 0.0, params.c, params.l_m, num, den)


@dataclass(frozen=True)
class FeedbackController:
    """Discrete first-order controller ``u = c_fb w + d_fb e``, ``w+ = a w + b e``."""

    a: float
    b: float
    c_fb: float
    d_fb: float
    sample_rate: float

    def dc_gain(self) -> float:
        return self.c_fb * self.b / (1.0 - self.a) + self.d_fb

    def impulse_response(self, n: int) -> np.ndarray:
        h = np.zeros(n)
        h[0] = self.d_fb
        if n > 1:
            h[1:] = self.c_fb * self.b * self.a ** np.arange(n - 1)
        return h


def discretize_controller(sample_rate: float = 100.0, gain: float = 5e3,
                          zero: float = 4 * math.pi, pole: float = 20 * math.pi) -> FeedbackController:
    """Exact ZOH discretization of ``gain (s + zero) / (s + pole)``."""
    if not sample_rate > 0:
        raise ValueError("sample_rate must be positive")
    # gain (s+z)/(s+p) = gain + gain (z-p) / (s+p): one state x' = -p x + e
    T = 1.0 / sample_rate
    M = expm(np.array([[-pole, 1.0], [0.0, 0.0]]) * T)
    return FeedbackController(a=M[0, 0], b=M[0, 1], c_fb=gain * (zero - pole), d_fb=gain,
                              sample_rate=float(sample_rate))


@dataclass(frozen=True)
class NoiseSpec:
    std_dev: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.std_dev < 0:
            raise ValueError("std_dev must be nonnegative")


# Stream-splitting rule: SeedSequence(seed).spawn(2) gives stream 0 for the
# measurement noise v(k) and stream 1 for the excitation U_ff^d. PCG64 with
# numpy's ziggurat normals is platform independent.
NOISE_STREAM = 0
EXCITATION_STREAM = 1


def rng_stream(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed).spawn(2)[stream]))


def measurement_noise(noise: NoiseSpec, n: int) -> np.ndarray:
    if noise.std_dev == 0:
        return np.zeros(n)
    return noise.std_dev * rng_stream(noise.seed, NOISE_STREAM).standard_normal(n)


@dataclass
class ClosedLoopRun:
    """Measured output plus the internal signals of one closed-loop run."""

    y: Signal
    u: Signal
    x_final: np.ndarray
    w_final: float


def _check_pair(R: Signal, U_ff: Signal, controller: FeedbackController):
    if R.n_samples != U_ff.n_samples:
        raise ValueError(f"R has {R.n_samples} samples but U_ff has {U_ff.n_samples}")
    if R.sample_rate != U_ff.sample_rate:
        raise ValueError("R and U_ff sample rates differ")
    if not math.isclose(R.sample_rate, controller.sample_rate, rel_tol=1e-12):
        raise ValueError(f"signal rate {R.sample_rate} Hz does not match controller rate "
                         f"{controller.sample_rate} Hz")
    if R.n_channels != 1 or U_ff.n_channels != 1:
        raise ValueError("the benchmark plant is SISO")


def run_closed_loop(realization: PlantRealization, controller: FeedbackController, R: Signal,
                    U_ff: Signal, noise: NoiseSpec = NoiseSpec(0.0), x0=None, w0: float = 0.0,
                    substeps: int = 10) -> ClosedLoopRun:
    """Simulate the sampled loop; the plant is integrated with RK4 under ZOH input."""
    _check_pair(R, U_ff, controller)
    n = R.n_samples
    nx = realization.n_states
    r, uff = R.values, U_ff.values
    v = measurement_noise(noise, n)
    # companion structure: x_i' = x_{i+1}, x_n' = row . x + xi
    row = [float(a) for a in realization.A[-1]]
    cy = [float(c) for c in realization.C[0]]
    cog, kq = realization.c, 2 * math.pi / realization.l_m
    a, b, cf, df = controller.a, controller.b, controller.c_fb, controller.d_fb
    h = 1.0 / (controller.sample_rate * substeps)
    x = [0.0] * nx if x0 is None else [float(s) for s in x0]
    w = float(w0)
    y_meas = np.empty(n)
    u_all = np.empty(n)

    def deriv(x, u):
        y = sum(ci * xi for ci, xi in zip(cy, x))
        xi_in = u - cog * math.sin(kq * y)
        dx = x[1:]
        dx.append(sum(ai * xs for ai, xs in zip(row, x)) + xi_in)
        return dx

    for k in range(n):
        y = sum(ci * xi for ci, xi in zip(cy, x))
        ym = y + v[k]
        e = r[k] - ym
        u = cf * w + df * e + uff[k]
        w = a * w + b * e
        y_meas[k] = ym
        u_all[k] = u
        for _ in range(substeps):
            k1 = deriv(x, u)
            k2 = deriv([xi + 0.5 * h * d for xi, d in zip(x, k1)], u)
            k3 = deriv([xi + 0.5 * h * d for xi, d in zip(x, k2)], u)
            k4 = deriv([xi + h * d for xi, d in zip(x, k3)], u)
            x = [xi + h / 6.0 * (d1 + 2 * d2 + 2 * d3 + d4)
                 for xi, d1, d2, d3, d4 in zip(x, k1, k2, k3, k4)]
        if not all(math.isfinite(s) for s in x):
            raise FloatingPointError(f"plant state became non-finite at sample {k}")
    fs = R.sample_rate
    return ClosedLoopRun(Signal(y_meas, fs, ("y",)), Signal(u_all, fs, ("u",)), np.array(x), w)


def simulate_closed_loop(realization: PlantRealization, controller: FeedbackController, R: Signal,
                         U_ff: Signal, noise: NoiseSpec = NoiseSpec(0.0), x0=None,
                         substeps: int = 10) -> Signal:
    """Measured output ``y(k) + v(k)`` of the closed loop for references ``R`` and ``U_ff``."""
    return run_closed_loop(realization, controller, R, U_ff, noise, x0, substeps=substeps).y


def zoh_linear_closed_loop(realization: PlantRealization, controller: FeedbackController,
                           R: Signal, U_ff: Signal) -> Signal:
    """Cogging-free, noise-free closed loop through the exact ZOH plant discretization."""
    _check_pair(R, U_ff, controller)
    nx = realization.n_states
    T = 1.0 / controller.sample_rate
    M = np.zeros((nx + 1, nx + 1))
    M[:nx, :nx] = realization.A
    M[:nx, nx:] = realization.B
    E = expm(M * T)
    Ad, Bd = E[:nx, :nx], E[:nx, nx]
    x = np.zeros(nx)
    w = 0.0
    out = np.empty(R.n_samples)
    for k, (rk, uk) in enumerate(zip(R.values, U_ff.values)):
        y = float(realization.C[0] @ x)
        e = rk - y
        u = controller.c_fb * w + controller.d_fb * e + uk
        w = controller.a * w + controller.b * e
        x = Ad @ x + Bd * u
        out[k] = y
    return Signal(out, R.sample_rate, ("y",))


def zoh_transfer(realization: PlantRealization, sample_rate: float):
    """Discrete transfer ``u -> y`` of the linear part as ARX coefficients.

    Returns ``(a, b)`` with ``y(k) = sum a_i y(k-i) + sum b_j u(k-j)``,
    ``i, j = 1..n``.
    """
    from scipy.signal import cont2discrete, ss2tf

    sysd = cont2discrete((realization.A, realization.B, realization.C, np.zeros((1, 1))),
                         1.0 / sample_rate, method="zoh")
    num, den = ss2tf(sysd[0], sysd[1], sysd[2], sysd[3])
    num, den = np.atleast_1d(num.squeeze()), den / den[0]
    num = num / 1.0
    n = den.size - 1
    a = -den[1:]
    b = num[1:] if num.size == n + 1 else np.pad(num, (n - num.size, 0))
    return a, b


@dataclass(frozen=True)
class DataGenSpec:
    reference: ReferenceSpec = ReferenceSpec()
    repetitions: int = 15
    duration: float = 45.0
    excitation_start: float = 10.0
    excitation_stop: float = 40.0
    excitation_std: float = 20.0
    noise: NoiseSpec = NoiseSpec(1e-6, 0)
    excitation_seed: int = 1


@dataclass
class ClosedLoopDataset:
    Y_d: Signal
    R_d: Signal
    U_ff_d: Signal
    noise: NoiseSpec
    x0: np.ndarray = field(default_factory=lambda: np.zeros(4))
    w0: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = {self.Y_d.n_samples, self.R_d.n_samples, self.U_ff_d.n_samples}
        rates = {self.Y_d.sample_rate, self.R_d.sample_rate, self.U_ff_d.sample_rate}
        if len(n) != 1 or len(rates) != 1:
            raise ValueError("dataset signals must share N_d and sample_rate")

    @property
    def n_samples(self) -> int:
        return self.Y_d.n_samples

    @property
    def sample_rate(self) -> float:
        return self.Y_d.sample_rate

    def save(self, csv_path, json_path=None, extra: dict | None = None) -> None:
        from .io import write_json
        from .signals import write_csv

        write_csv(csv_path, [self.Y_d.renamed("y_d"), self.R_d.renamed("r_d"), self.U_ff_d.renamed("uff_d")])
        if json_path is not None:
            meta = dict(self.meta)
            meta.update({"noise": asdict(self.noise), "x0": self.x0, "w0": self.w0,
                         "sample_rate": self.sample_rate, "n_samples": self.n_samples})
            meta.update(extra or {})
            write_json(json_path, meta)

    @classmethod
    def load(cls, csv_path, json_path=None) -> "ClosedLoopDataset":
        from .io import read_json
        from .signals import read_csv

        meta = read_json(json_path) if json_path is not None else {}
        cols = read_csv(csv_path, meta.get("sample_rate"))
        try:
            y, r, u = cols["y_d"], cols["r_d"], cols["uff_d"]
        except KeyError as exc:
            raise ValueError(f"{csv_path}: missing dataset column {exc}") from None
        noise = NoiseSpec(**meta["noise"]) if "noise" in meta else NoiseSpec(0.0)
        x0 = np.asarray(meta.get("x0", np.zeros(4)), dtype=float)
        return cls(y, r, u, noise, x0, float(meta.get("w0", 0.0)), meta)


def excitation_signal(spec: DataGenSpec, sample_rate: float) -> Signal:
    n = int(round(spec.duration * sample_rate))
    t = np.arange(n) / sample_rate
    draws = spec.excitation_std * rng_stream(spec.excitation_seed, EXCITATION_STREAM).standard_normal(n)
    window = (t >= spec.excitation_start - 1e-9) & (t < spec.excitation_stop - 1e-9)
    return Signal(np.where(window, draws, 0.0), sample_rate, ("uff_d",))


def generate_training_data(realization: PlantRealization, controller: FeedbackController,
                           spec: DataGenSpec = DataGenSpec(), substeps: int = 10) -> ClosedLoopDataset:
    fs = controller.sample_rate
    ref = generate_reference(spec.reference, fs)
    n = int(round(spec.duration * fs))
    if ref.n_samples * spec.repetitions != n:
        raise ValueError(f"{spec.repetitions} x {ref.n_samples}-sample references do not fill "
                         f"{spec.duration} s ({n} samples)")
    R_d = Signal(np.tile(ref.values, spec.repetitions), fs, ("r_d",))
    U_ff_d = excitation_signal(spec, fs)
    Y_d = simulate_closed_loop(realization, controller, R_d, U_ff_d, spec.noise, substeps=substeps)
    return ClosedLoopDataset(Y_d.renamed("y_d"), R_d, U_ff_d, spec.noise,
                             np.zeros(realization.n_states), 0.0,
                             {"excitation_seed": spec.excitation_seed, "repetitions": spec.repetitions})
