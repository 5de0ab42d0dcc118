"""Ground-truth simulation: eight-shape trajectory, landmarks, sampling timer.

The truth is analytic: ``p(t) = 10 [sin t, sin t cos t, 1]`` and the
attitude rotates at the constant body rate ``EIGHT_OMEGA`` from ``R(0) = I``,
so ``R(t) = exp(t * EIGHT_OMEGA)`` exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, NamedTuple, Optional

import numpy as np

from .errors import DegenerateLandmarks, HinoError, InvalidDt
from .so3 import exp_so3, is_rotation, mbar

GRAVITY = np.array([0.0, 0.0, -9.81])
EIGHT_OMEGA = np.array([math.sin(0.3 * math.pi), 0.1, math.cos(0.3 * math.pi)])

# channel ids for the counter-based noise generator
GYRO_CHANNEL = 0
ACCEL_CHANNEL = 1
LANDMARK_CHANNEL = 2
TIMER_CHANNEL = 3

_FIRE_TOL = 1e-9  # relative to dt


@dataclass(frozen=True)
class TrueState:
    R: np.ndarray
    p: np.ndarray
    v: np.ndarray
    t: float = 0.0


@dataclass(frozen=True)
class LandmarkSet:
    """Inertial landmark positions ``(N, 3)`` and positive weights ``(N,)``.

    Weights are rescaled to sum to one unless they already do so within
    1e-12 (which keeps the set bit-identical through a CSV round trip).
    """

    positions: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        n = len(pos)
        w = np.full(n, 1.0 / n) if self.weights is None else np.asarray(self.weights, dtype=float).reshape(-1)
        if len(w) != n:
            raise HinoError(f"{n} landmarks but {len(w)} weights")
        if n == 0 or np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise HinoError("landmark weights must be finite and strictly positive")
        total = w.sum()
        if abs(total - 1.0) > 1e-12:
            w = w / total
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.positions)

    @property
    def center(self) -> np.ndarray:
        return self.weights @ self.positions

    @property
    def M(self) -> np.ndarray:
        d = self.positions - self.center
        return (d * self.weights[:, None]).T @ d

    def subset(self, indices) -> "LandmarkSet":
        idx = np.asarray(indices, dtype=int)
        return LandmarkSet(self.positions[idx], self.weights[idx])


@dataclass
class SamplingTimer:
    """Decreasing timer: flows at unit rate, resets into ``[T_m, T_M]`` at zero."""

    tau: float
    T_m: float
    T_M: float

    def __post_init__(self):
        if not (0.0 < self.T_m <= self.T_M < math.inf):
            raise HinoError(f"need 0 < T_m <= T_M < inf, got T_m={self.T_m}, T_M={self.T_M}")
        if not (0.0 <= self.tau <= self.T_M + 1e-12):
            raise HinoError(f"timer value {self.tau} outside [0, T_M]")


@dataclass(frozen=True)
class ImuSample:
    t: float
    omega: np.ndarray
    accel: np.ndarray


@dataclass(frozen=True)
class LandmarkMeasurement:
    """Body-frame landmark vectors ``values[j]`` for landmark ``indices[j]``."""

    t: float
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=int).reshape(-1))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float).reshape(-1, 3))


@dataclass(frozen=True)
class NoiseSpec:
    cov_omega: np.ndarray = field(default_factory=lambda: 1e-4 * np.eye(3))
    cov_accel: np.ndarray = field(default_factory=lambda: 1e-2 * np.eye(3))
    cov_landmark: np.ndarray = field(default_factory=lambda: 1e-2 * np.eye(3))
    seed: int = 0

    def __post_init__(self):
        for name in ("cov_omega", "cov_accel", "cov_landmark"):
            C = np.asarray(getattr(self, name), dtype=float)
            if np.ndim(C) == 0:
                C = float(C) * np.eye(3)
            if C.shape != (3, 3) or np.linalg.norm(C - C.T) > 1e-12 or np.linalg.eigvalsh(C).min() < -1e-12:
                raise HinoError(f"{name} must be a symmetric PSD 3x3 matrix")
            object.__setattr__(self, name, C)


class SimStep(NamedTuple):
    """One grid point of an event stream: IMU always, landmarks at events, truth if known."""

    imu: ImuSample
    meas: Optional[LandmarkMeasurement]
    truth: Optional[TrueState]


def noise_rng(seed: int, step: int, channel: int) -> np.random.Generator:
    """Generator keyed on ``(seed, step, channel)``; independent of call order."""
    return np.random.default_rng([int(seed), int(step), int(channel)])


def _psd_sqrt(C):
    w, V = np.linalg.eigh(C)
    return V * np.sqrt(np.clip(w, 0.0, None))


def eight_shape_vdot(t: float) -> np.ndarray:
    return 10.0 * np.array([-math.sin(t), -2.0 * math.sin(2.0 * t), 0.0])


def eight_shape_truth(t: float) -> TrueState:
    """Analytic state on the figure-eight at time ``t``."""
    p = 10.0 * np.array([math.sin(t), math.sin(t) * math.cos(t), 1.0])
    v = 10.0 * np.array([math.cos(t), math.cos(2.0 * t), 0.0])
    return TrueState(R=exp_so3(EIGHT_OMEGA * t), p=p, v=v, t=t)


def apparent_accel(state: TrueState, vdot, g=GRAVITY) -> np.ndarray:
    """Accelerometer reading ``R^T (vdot - g)``."""
    return state.R.T @ (np.asarray(vdot, dtype=float) - np.asarray(g, dtype=float))


def measure_landmarks(state: TrueState, lm: LandmarkSet, noise: Optional[NoiseSpec] = None,
                      step: int = 0, indices=None) -> LandmarkMeasurement:
    """Body-frame landmark vectors ``R^T (p_i - p)``, optionally with Gaussian noise."""
    if not is_rotation(state.R):
        raise HinoError("truth attitude is not a rotation")
    idx = np.arange(len(lm)) if indices is None else np.asarray(indices, dtype=int)
    y = (lm.positions[idx] - state.p) @ state.R
    if noise is not None:
        z = noise_rng(noise.seed, step, LANDMARK_CHANNEL).standard_normal((len(idx), 3))
        y = y + z @ _psd_sqrt(noise.cov_landmark).T
    return LandmarkMeasurement(t=state.t, indices=idx, values=y)


def _reset_value(timer: SamplingTimer, dt: float, rng) -> float:
    draw = timer.T_m if timer.T_m == timer.T_M else rng.uniform(timer.T_m, timer.T_M)
    # snap onto the integration grid so events land on grid points
    lo = math.ceil(timer.T_m / dt - 1e-9)
    hi = math.floor(timer.T_M / dt + 1e-9)
    if lo > hi:
        return draw
    return min(max(round(draw / dt), lo), hi) * dt


def timer_step(timer: SamplingTimer, dt: float, rng=None) -> tuple[SamplingTimer, bool]:
    """Advance the timer by ``dt``; on reaching zero, fire and reset into ``[T_m, T_M]``."""
    if not dt > 0:
        raise InvalidDt(f"dt must be positive, got {dt!r}")
    tau = timer.tau - dt
    if tau > _FIRE_TOL * dt:
        return replace(timer, tau=tau), False
    return replace(timer, tau=_reset_value(timer, dt, rng)), True


def landmark_stats(lm: LandmarkSet):
    """Return ``(p_c, M, Mbar, varsigma)``.

    ``varsigma`` is ``lambda_min(Mbar) / lambda_max(Mbar)``. Raises
    DegenerateLandmarks when ``M`` has two or more near-zero eigenvalues.
    """
    p_c = lm.center
    M = lm.M
    eig = np.linalg.eigvalsh(M)
    if eig[-1] <= 0 or np.sum(eig < 1e-9 * eig[-1]) >= 2:
        raise DegenerateLandmarks(f"landmarks are collinear or coincident (eigenvalues of M: {eig})")
    Mb = mbar(M)
    mb = np.linalg.eigvalsh(Mb)
    return p_c, M, Mb, float(mb[0] / mb[-1])


def random_landmarks(count: int = 25, half_width: float = 10.0, height: float = 0.0, seed: int = 0) -> LandmarkSet:
    """Equal-weight landmarks drawn uniformly on the plane ``z = height`` within a square box."""
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-half_width, half_width, size=(count, 2))
    return LandmarkSet(np.column_stack([xy, np.full(count, float(height))]))


def simulate(duration: float, dt: float, lm: LandmarkSet, timer: SamplingTimer,
             noise: Optional[NoiseSpec] = None, g=GRAVITY, seed: int = 0,
             truth_fn: Callable[[float], TrueState] = eight_shape_truth,
             vdot_fn: Callable[[float], np.ndarray] = eight_shape_vdot,
             omega_fn: Callable[[float], np.ndarray] = lambda t: EIGHT_OMEGA) -> Iterator[SimStep]:
    """Yield one :class:`SimStep` per grid point ``t_k = k dt`` for ``k = 0..duration/dt``.

    A landmark measurement is attached at grid points where the timer fires
    (including ``t = 0`` if the timer starts at zero). The timer reset draws
    come from a generator keyed on ``seed``.
    """
    if not duration > 0:
        raise HinoError("duration must be positive")
    if not (0 < dt <= timer.T_m / 2 + 1e-15):
        raise InvalidDt(f"need 0 < dt <= T_m/2, got dt={dt}, T_m={timer.T_m}")
    g = np.asarray(g, dtype=float)
    n_steps = int(round(duration / dt))
    timer_rng = noise_rng(seed, 0, TIMER_CHANNEL)
    sq_w = sq_a = None
    if noise is not None:
        sq_w, sq_a = _psd_sqrt(noise.cov_omega), _psd_sqrt(noise.cov_accel)
    tm = replace(timer)
    for k in range(n_steps + 1):
        t = k * dt
        if k == 0:
            fired = tm.tau <= _FIRE_TOL * dt
            if fired:
                tm = replace(tm, tau=_reset_value(tm, dt, timer_rng))
        else:
            tm, fired = timer_step(tm, dt, timer_rng)
        truth = truth_fn(t)
        omega = np.array(omega_fn(t), dtype=float)
        accel = apparent_accel(truth, vdot_fn(t), g)
        if noise is not None:
            omega = omega + sq_w @ noise_rng(noise.seed, k, GYRO_CHANNEL).standard_normal(3)
            accel = accel + sq_a @ noise_rng(noise.seed, k, ACCEL_CHANNEL).standard_normal(3)
        meas = measure_landmarks(truth, lm, noise, step=k) if fired else None
        yield SimStep(ImuSample(t, omega, accel), meas, truth)

