"""
Finite-horizon signal containers, normalized p-norms and the jerk-limited
point-to-point reference used in the benchmark experiments.

A :class:`Signal` holds ``N_k`` samples of an ``n_ch`` dimensional quantity.
Its stacked form is the time-major column ``[s(0), s(1), ..., s(N_k-1)]``.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import brentq

from .io import atomic_write_text


@dataclass(frozen=True)
class Signal:
    """Sampled signal, ``data`` has shape ``(N_k, n_ch)``."""

    data: np.ndarray
    sample_rate: float
    names: tuple = field(default=())

    def __post_init__(self):
        data = np.array(self.data, dtype=float)
        if data.ndim == 1:
            data = data[:, None]
        if data.ndim != 2:
            raise ValueError(f"signal data must be 1-D or 2-D, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"signal needs N_k >= 1 and n_ch >= 1, got shape {data.shape}")
        if not self.sample_rate > 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        names = tuple(self.names) or tuple(f"ch{i}" for i in range(data.shape[1]))
        if len(names) != data.shape[1]:
            raise ValueError(f"{len(names)} channel names for {data.shape[1]} channels")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "sample_rate", float(self.sample_rate))
        object.__setattr__(self, "names", names)

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_samples) / self.sample_rate

    @property
    def values(self) -> np.ndarray:
        """Samples of a single-channel signal as a flat array."""
        if self.n_channels != 1:
            raise ValueError("values is only defined for single-channel signals")
        return self.data[:, 0]

    def __len__(self):
        return self.n_samples

    def renamed(self, *names: str) -> "Signal":
        return Signal(self.data, self.sample_rate, names)

    def to_csv(self, path) -> None:
        write_csv(path, [self])


def stack(signal: Signal) -> np.ndarray:
    """Time-major stacked column of length ``N_k * n_ch``."""
    return signal.data.reshape(-1).copy()


def unstack(vector, n_channels: int, sample_rate: float, names: Sequence[str] = ()) -> Signal:
    vector = np.asarray(vector, dtype=float)
    if vector.ndim != 1 or vector.size % n_channels:
        raise ValueError(f"cannot unstack length {vector.size} into {n_channels} channels")
    return Signal(vector.reshape(-1, n_channels), sample_rate, tuple(names))


@dataclass(frozen=True)
class NormSpec:
    p: int = 2
    normalized: bool = True

    def __post_init__(self):
        if int(self.p) != self.p or self.p < 1:
            raise ValueError(f"p must be a positive integer, got {self.p}")


def norm(signal, spec: NormSpec = NormSpec()) -> float:
    """p-norm of the stacked signal, divided by ``N**(1/p)`` when normalized.

    ``signal`` may be a :class:`Signal` or an array whose first axis is time.
    """
    if isinstance(signal, Signal):
        x = signal.data
    else:
        x = np.asarray(signal, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
    n = x.shape[0]
    x = x.reshape(-1)
    scale = float(np.max(np.abs(x))) if x.size else 0.0
    if scale == 0.0 or not np.isfinite(scale):
        value = scale
    else:
        # scaled to avoid under- and overflow of |x|^p
        value = scale * float(np.linalg.norm(x / scale, ord=spec.p))
    if spec.normalized:
        value /= n ** (1.0 / spec.p)
    return value


# --------------------------------------------------------------------------
# CSV


def write_csv(path, signals: Sequence[Signal]) -> None:
    """Write signals sharing length and rate as ``t,<names...>`` CSV."""
    if not signals:
        raise ValueError("nothing to write")
    n, fs = signals[0].n_samples, signals[0].sample_rate
    for s in signals:
        if s.n_samples != n or s.sample_rate != fs:
            raise ValueError("signals written to one CSV must share length and sample rate")
    names = [name for s in signals for name in s.names]
    data = np.hstack([s.data for s in signals])
    buf = io.StringIO()
    buf.write(",".join(["t", *names]) + "\n")
    t = np.arange(n) / fs
    for k in range(n):
        buf.write(f"{t[k]:.9f}," + ",".join(f"{v:.11e}" for v in data[k]) + "\n")
    atomic_write_text(path, buf.getvalue())


def read_csv(path, sample_rate: float | None = None) -> dict[str, Signal]:
    """Read a CSV written by :func:`write_csv` into one signal per column."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if not header or header[0] != "t":
        raise ValueError(f"{path}: first column must be 't'")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if sample_rate is None:
        if table.shape[0] < 2:
            raise ValueError(f"{path}: sample_rate needed for a single-row file")
        sample_rate = round(1.0 / (table[1, 0] - table[0, 0]), 6)
    return {name: Signal(table[:, i + 1], sample_rate, (name,)) for i, name in enumerate(header[1:])}


# --------------------------------------------------------------------------
# jerk-limited reference


@dataclass(frozen=True)
class ReferenceSpec:
    """Forward-and-back point-to-point move with bounded velocity, acceleration and jerk.

    Layout: ``dwell`` at rest, forward leg, ``dwell``, return leg, rest until
    ``total_duration``. Each leg is the time-optimal seven-segment profile.
    """

    move_distance: float = 0.1
    v_max: float = 0.1
    a_max: float = 4.0
    j_max: float = 40.0
    dwell: float = 0.25
    total_duration: float = 3.0

    def __post_init__(self):
        for name in ("v_max", "a_max", "j_max", "total_duration"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive, got {getattr(self, name)}")
        if self.move_distance < 0 or self.dwell < 0:
            raise ValueError("move_distance and dwell must be nonnegative")


def _accel_phase(v, a, j):
    """Jerk time, constant-acceleration time and distance to go from rest to `v`."""
    if v * j >= a * a:
        tj = a / j
        ta = v / a - tj
    else:
        tj = math.sqrt(v / j)
        ta = 0.0
    return tj, ta, 0.5 * v * (2 * tj + ta)


@dataclass(frozen=True)
class JerkProfile:
    """Piecewise-constant jerk starting at rest from position 0."""

    durations: tuple
    jerks: tuple
    start: float = 0.0

    @property
    def duration(self) -> float:
        return float(sum(self.durations))

    def knots(self):
        """Start time and (p, v, a) state at the start of each segment."""
        t, p, v, a = self.start, 0.0, 0.0, 0.0
        out = []
        for dt, j in zip(self.durations, self.jerks):
            out.append((t, p, v, a, j))
            p += v * dt + a * dt**2 / 2 + j * dt**3 / 6
            v += a * dt + j * dt**2 / 2
            a += j * dt
            t += dt
        return out, (t, p, v, a)

    def evaluate(self, t) -> np.ndarray:
        """Position, velocity, acceleration and jerk at times ``t``; shape ``(4, len(t))``."""
        t = np.asarray(t, dtype=float)
        knots, (t_end, p_end, v_end, a_end) = self.knots()
        out = np.zeros((4, t.size))
        starts = np.array([k[0] for k in knots])
        idx = np.searchsorted(starts, t, side="right") - 1
        for i, (t0, p, v, a, j) in enumerate(knots):
            m = idx == i
            tau = t[m] - t0
            out[0, m] = p + v * tau + a * tau**2 / 2 + j * tau**3 / 6
            out[1, m] = v + a * tau + j * tau**2 / 2
            out[2, m] = a + j * tau
            out[3, m] = j
        after = t >= t_end
        out[:, after] = 0.0
        out[0, after] = p_end
        out[:, t < self.start] = 0.0
        return out


def seven_segment(distance: float, v_max: float, a_max: float, j_max: float, start: float = 0.0) -> JerkProfile:
    """Time-optimal rest-to-rest move over `distance` (may be negative)."""
    d = abs(distance)
    sign = 1.0 if distance >= 0 else -1.0
    if d == 0:
        return JerkProfile((), (), start)
    tj, ta, d_acc = _accel_phase(v_max, a_max, j_max)
    if 2 * d_acc <= d:
        v_peak = v_max
    else:
        v_peak = brentq(lambda v: 2 * _accel_phase(v, a_max, j_max)[2] - d, 0.0, v_max, xtol=1e-15, rtol=1e-15)
        tj, ta, d_acc = _accel_phase(v_peak, a_max, j_max)
    tv = max(d - 2 * d_acc, 0.0) / v_peak
    j = sign * j_max
    return JerkProfile((tj, ta, tj, tv, tj, ta, tj), (j, 0.0, -j, 0.0, -j, 0.0, j), start)


def move_time(distance: float, v_max: float, a_max: float, j_max: float) -> float:
    return seven_segment(distance, v_max, a_max, j_max).duration


def check_reference_feasible(spec: ReferenceSpec) -> None:
    """Raise ``ValueError`` naming the active bounds if the two legs do not fit."""
    _reference_profiles(spec)


def _reference_profiles(spec: ReferenceSpec):
    leg = move_time(spec.move_distance, spec.v_max, spec.a_max, spec.j_max)
    needed = 2 * spec.dwell + 2 * leg
    if needed > spec.total_duration + 1e-12:
        tj, ta, _ = _accel_phase(spec.v_max, spec.a_max, spec.j_max)
        active = ["j_max"] + (["a_max"] if ta > 0 else [])
        if spec.move_distance >= 2 * _accel_phase(spec.v_max, spec.a_max, spec.j_max)[2]:
            active.append("v_max")
        raise ValueError(
            f"reference infeasible: two legs of {spec.move_distance} m take {2 * leg:.6g} s under "
            f"{', '.join(f'{b}={getattr(spec, b)}' for b in active)}; with dwell {spec.dwell} s "
            f"this needs {needed:.6g} s > total_duration {spec.total_duration} s"
        )
    fwd = seven_segment(spec.move_distance, spec.v_max, spec.a_max, spec.j_max, start=spec.dwell)
    back = seven_segment(-spec.move_distance, spec.v_max, spec.a_max, spec.j_max,
                         start=2 * spec.dwell + leg)
    return fwd, back


def reference_derivatives(spec: ReferenceSpec, sample_rate: float) -> np.ndarray:
    """Sampled position, velocity, acceleration, jerk and snap; shape ``(N_k, 5)``.

    Jerk is piecewise constant so snap is a train of impulses; the sampled
    snap is its mean over the preceding sample interval.
    """
    n = int(round(spec.total_duration * sample_rate))
    t = np.arange(n) / sample_rate
    fwd, back = _reference_profiles(spec)
    # the forward leg holds its end position, so the legs superpose
    d = fwd.evaluate(t) + back.evaluate(t)
    snap = np.diff(d[3], prepend=0.0) * sample_rate
    return np.vstack([d, snap]).T


def generate_reference(spec: ReferenceSpec = ReferenceSpec(), sample_rate: float = 100.0) -> Signal:
    derivs = reference_derivatives(spec, sample_rate)
    return Signal(derivs[:, 0], sample_rate, ("r",))
