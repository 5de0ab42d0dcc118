"""Hybrid observers fusing continuous IMU data with intermittent landmark fixes.

Four variants share one flow/jump skeleton:

* ``HINO1-F``  fixed scalar gains, gravity known
* ``HINO2-F``  fixed scalar gains, gravity estimated
* ``HINO1-V``  Riccati gains, gravity known
* ``HINO2-V``  Riccati gains, gravity estimated

Between events the estimate flows (``eta`` is held constant); at an event the
landmark innovation resets ``eta`` and corrects position, velocity and
gravity. The attitude estimate is continuous across events.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Iterator, NamedTuple, Optional, Union

import numpy as np

from .errors import (DegenerateLandmarks, HinoError, InsufficientLandmarks, NonFiniteState,
                     NonMonotoneTime)
from .riccati import NoiseModel, RiccatiState, adapt_noise, flow_P, gain, update_P
from .so3 import dist_identity, exp_so3, hat, renormalize
from .world import GRAVITY, LandmarkMeasurement, LandmarkSet, SimStep, TrueState, landmark_stats

_GL_X, _GL_W = np.polynomial.legendre.leggauss(4)
_TIME_TOL = 1e-9


class Variant(str, Enum):
    HINO1_F = "HINO1-F"
    HINO2_F = "HINO2-F"
    HINO1_V = "HINO1-V"
    HINO2_V = "HINO2-V"

    @property
    def estimates_gravity(self) -> bool:
        return self in (Variant.HINO2_F, Variant.HINO2_V)

    @property
    def variable_gain(self) -> bool:
        return self in (Variant.HINO1_V, Variant.HINO2_V)

    @property
    def dim(self) -> int:
        return 9 if self.estimates_gravity else 6


ACCEL_INTERP = ("zoh", "linear", "cubic")


@dataclass
class ObserverConfig:
    """Observer parameters.

    ``accel_interp`` selects how the accelerometer signal is reconstructed
    between grid samples during the flow: ``"zoh"`` holds the current
    sample, ``"linear"`` and ``"cubic"`` interpolate through neighbouring
    samples (cubic uses two on each side).
    ``freeze_riccati`` keeps ``P`` at its initial value: the gain is still
    computed from ``P`` and ``Q`` at every event, but ``P`` neither flows nor
    updates.
    """

    variant: Variant
    landmarks: LandmarkSet
    k_R: float = 1.2
    k_p: float = 0.5
    k_v: float = 1.0
    k_g: float = 0.6
    g_known: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    noise_model: NoiseModel = field(default_factory=NoiseModel)
    freeze_riccati: bool = False
    accel_interp: str = "cubic"

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.g_known = np.asarray(self.g_known, dtype=float).reshape(3)
        gains = {"k_R": self.k_R}
        if not self.variant.variable_gain:
            gains.update(k_p=self.k_p, k_v=self.k_v)
            if self.variant.estimates_gravity:
                gains["k_g"] = self.k_g
        for name, val in gains.items():
            if not (math.isfinite(val) and val > 0):
                raise HinoError(f"gain {name} must be finite and > 0, got {val!r}")
        if self.accel_interp not in ACCEL_INTERP:
            raise HinoError(f"accel_interp must be one of {ACCEL_INTERP}, got {self.accel_interp!r}")
        landmark_stats(self.landmarks)  # raises DegenerateLandmarks

    @property
    def dim(self) -> int:
        return self.variant.dim


@dataclass
class ObserverState:
    R_hat: np.ndarray
    p_hat: np.ndarray
    v_hat: np.ndarray
    eta: np.ndarray
    g_hat: Optional[np.ndarray] = None
    riccati: Optional[RiccatiState] = None
    tau_mirror: float = 0.0  # time since the last event


@dataclass(frozen=True)
class ErrorState:
    R_tilde: np.ndarray
    p_tilde: np.ndarray
    v_tilde: np.ndarray
    g_tilde: Optional[np.ndarray] = None

    @property
    def rot(self) -> float:
        return dist_identity(self.R_tilde)

    @property
    def pos(self) -> float:
        return float(np.linalg.norm(self.p_tilde))

    @property
    def vel(self) -> float:
        return float(np.linalg.norm(self.v_tilde))

    @property
    def grav(self) -> float:
        return math.nan if self.g_tilde is None else float(np.linalg.norm(self.g_tilde))


def initial_state(cfg: ObserverConfig, R_hat=None, p_hat=None, v_hat=None, eta=None, g_hat=None,
                  P0=None) -> ObserverState:
    """Initial estimate; every field defaults to zero, ``R_hat`` to identity, ``P`` to identity."""
    z = np.zeros(3)
    st = ObserverState(
        R_hat=np.eye(3) if R_hat is None else np.asarray(R_hat, dtype=float),
        p_hat=z.copy() if p_hat is None else np.asarray(p_hat, dtype=float),
        v_hat=z.copy() if v_hat is None else np.asarray(v_hat, dtype=float),
        eta=z.copy() if eta is None else np.asarray(eta, dtype=float),
    )
    if cfg.variant.estimates_gravity:
        st.g_hat = z.copy() if g_hat is None else np.asarray(g_hat, dtype=float)
    if cfg.variant.variable_gain:
        st.riccati = RiccatiState(np.eye(cfg.dim) if P0 is None else P0)
    return st


def _measured_set(lm: LandmarkSet, meas: LandmarkMeasurement):
    """Landmark subset seen at this event, with weights renormalized; ``partial`` flag."""
    idx = meas.indices
    if len(idx) and (idx.min() < 0 or idx.max() >= len(lm)):
        raise HinoError(f"measurement references landmark ids outside 0..{len(lm) - 1}")
    if len(idx) == len(lm) and np.array_equal(idx, np.arange(len(lm))):
        return lm, False
    if len(idx) < 3:
        raise InsufficientLandmarks(f"only {len(idx)} landmarks measured at t={meas.t}")
    sub = lm.subset(idx)
    try:
        landmark_stats(sub)
    except DegenerateLandmarks as exc:
        raise InsufficientLandmarks(f"measured landmarks are collinear at t={meas.t}") from exc
    return sub, True


def innovation(lm: LandmarkSet, meas: LandmarkMeasurement, R_hat, p_hat):
    """Attitude and translation innovations ``(sigma_R, y)``.

    With ``e_i = p_i - p_hat - R_hat y_i``:
    ``sigma_R = 1/2 sum k_i (p_i - p_c) x e_i`` and ``y = sum k_i e_i``.
    When only part of the set is measured, weights and centre are recomputed
    over the measured subset.
    """
    sub, _ = _measured_set(lm, meas)
    e = sub.positions - p_hat - meas.values @ np.asarray(R_hat).T
    ke = e * sub.weights[:, None]
    sigma = 0.5 * np.cross(sub.positions - sub.center, ke).sum(axis=0)
    return sigma, ke.sum(axis=0)


def _check_finite(st: ObserverState):
    parts = [st.R_hat, st.p_hat, st.v_hat, st.eta]
    if st.g_hat is not None:
        parts.append(st.g_hat)
    if not all(np.all(np.isfinite(x)) for x in parts):
        raise NonFiniteState("observer state left the finite range")


def flow(state: ObserverState, omega, accel: Union[np.ndarray, Callable[[float], np.ndarray]], dt: float,
         cfg: ObserverConfig) -> ObserverState:
    """Advance the estimate by ``dt`` with ``omega`` and ``eta`` held constant.

    ``accel`` is either a constant body-frame sample or a function of the
    elapsed time ``u`` in ``[0, dt]``. The attitude advances by the exact
    map ``R_hat <- exp(eta dt) R_hat exp(omega dt)``. Position, velocity and
    gravity are propagated by the exact solution of their linear dynamics in
    the frame rotating with ``eta``; only the integrals of the accelerometer
    signal are approximated (4-point Gauss-Legendre).
    """
    if not dt > 0:
        raise HinoError(f"dt must be positive, got {dt!r}")
    omega = np.asarray(omega, dtype=float)
    a_of = accel if callable(accel) else (lambda u, a=np.asarray(accel, dtype=float): a)
    h = float(dt)
    us = 0.5 * h * (_GL_X + 1.0)
    ws = 0.5 * h * _GL_W
    est_g = cfg.variant.estimates_gravity
    int_f = np.zeros(3)
    int_hf = np.zeros(3)
    for u, w in zip(us, ws):
        f = state.R_hat @ (exp_so3(omega * u) @ a_of(u))
        f = f + (state.g_hat if est_g else exp_so3(-state.eta * u) @ cfg.g_known)
        int_f += w * f
        int_hf += w * (h - u) * f
    p_c = cfg.landmarks.center
    E = exp_so3(state.eta * h)
    new = replace(
        state,
        R_hat=renormalize(E @ state.R_hat @ exp_so3(omega * h)),
        v_hat=E @ (state.v_hat + int_f),
        p_hat=p_c + E @ (state.p_hat - p_c + state.v_hat * h + int_hf),
        g_hat=E @ state.g_hat if est_g else None,
        tau_mirror=state.tau_mirror + h,
    )
    if cfg.variant.variable_gain and not cfg.freeze_riccati:
        V, _ = adapt_noise(state, cfg.landmarks, cfg.noise_model, cfg.dim)
        new.riccati = flow_P(state.riccati, omega, V, h)
    _check_finite(new)
    return new


class JumpInfo(NamedTuple):
    sigma_R: np.ndarray
    y: np.ndarray
    K: Optional[np.ndarray]
    Q: Optional[np.ndarray]
    partial: bool


def jump(state: ObserverState, meas: LandmarkMeasurement, cfg: ObserverConfig, info: bool = False):
    """Apply a landmark event. Returns the new state (and a :class:`JumpInfo` if ``info``).

    The innovation and, for variable gains, ``K`` are computed from the
    pre-jump state and ``P``; the Riccati update follows the state update.
    """
    sub, partial = _measured_set(cfg.landmarks, meas)
    sigma, y = innovation(cfg.landmarks, meas, state.R_hat, state.p_hat)
    new = replace(state, eta=cfg.k_R * sigma, tau_mirror=0.0)
    K = Q = None
    if cfg.variant.variable_gain:
        _, Q = adapt_noise(state, sub, cfg.noise_model, cfg.dim, indices=meas.indices)
        if cfg.freeze_riccati:
            K = gain(state.riccati.P, Q)
        else:
            new.riccati, K = update_P(state.riccati, Q)
        Rh = state.R_hat
        yb = Rh.T @ y
        new.p_hat = state.p_hat + Rh @ (K[0:3] @ yb)
        new.v_hat = state.v_hat + Rh @ (K[3:6] @ yb)
        if cfg.variant.estimates_gravity:
            new.g_hat = state.g_hat + Rh @ (K[6:9] @ yb)
    else:
        new.p_hat = state.p_hat + cfg.k_p * y
        new.v_hat = state.v_hat + cfg.k_v * y
        if cfg.variant.estimates_gravity:
            new.g_hat = state.g_hat + cfg.k_g * y
    _check_finite(new)
    return (new, JumpInfo(sigma, y, K, Q, partial)) if info else new


def error_state(state: ObserverState, truth: TrueState, lm: LandmarkSet, g=GRAVITY) -> ErrorState:
    """Geometric errors ``R R_hat^T``, ``p - Rt p_hat - (I - Rt) p_c``, ``v - Rt v_hat``, ``g - Rt g_hat``."""
    Rt = truth.R @ state.R_hat.T
    p_c = lm.center
    pt = truth.p - Rt @ state.p_hat - (np.eye(3) - Rt) @ p_c
    vt = truth.v - Rt @ state.v_hat
    gt = None if state.g_hat is None else np.asarray(g, dtype=float) - Rt @ state.g_hat
    return ErrorState(Rt, pt, vt, gt)


def _lagrange_weights(nodes, x):
    w = np.ones(len(nodes))
    for i, ti in enumerate(nodes):
        for j, tj in enumerate(nodes):
            if i != j:
                w[i] *= (x - tj) / (ti - tj)
    return w


def accel_interpolant(times, samples, k: int, order: str = "cubic"):
    """Accelerometer signal over ``[t_k, t_k+1]`` as a function of elapsed time.

    ``cubic`` interpolates through samples ``k-1 .. k+2`` (fewer at the
    stream ends), ``linear`` through ``k, k+1``, ``zoh`` holds sample ``k``.
    """
    n = len(times)
    if order == "zoh" or n == 1:
        a = samples[k]
        return lambda u: a
    if order == "linear":
        lo, hi = k, min(k + 1, n - 1)
    else:
        lo, hi = max(k - 1, 0), min(k + 2, n - 1)
    idx = list(range(lo, hi + 1))
    nodes = np.array([times[i] for i in idx])
    vals = np.array([samples[i] for i in idx])
    t0 = times[k]
    return lambda u: _lagrange_weights(nodes, t0 + u) @ vals


class StepRecord(NamedTuple):
    """Executor output at one grid time (after any jump there)."""

    t: float
    state: ObserverState
    error: Optional[ErrorState]
    event: bool
    pre_jump: Optional[ObserverState] = None
    jump_info: Optional[JumpInfo] = None


def run(steps: Iterable[SimStep], cfg: ObserverConfig, init: ObserverState, g_true=None) -> Iterator[StepRecord]:
    """Hybrid executor: jump at grid points carrying a measurement, flow between grid points.

    ``steps`` yields :class:`~hino.world.SimStep`; truth (when present) is used
    only to report errors against ``g_true`` (default ``cfg.g_known``).
    Measurements must carry the timestamp of their grid point.
    """
    g_true = cfg.g_known if g_true is None else np.asarray(g_true, dtype=float)
    it = iter(steps)
    window: deque = deque()  # (t, omega, accel, meas, truth) for indices k-1 .. k+2
    base = 0  # absolute index of window[0]

    def pull():
        try:
            s = next(it)
        except StopIteration:
            return False
        t = float(s.imu.t)
        if window and not t > window[-1][0] + _TIME_TOL * max(1.0, abs(t)):
            raise NonMonotoneTime(f"IMU time {t!r} does not increase past {window[-1][0]!r}")
        if s.meas is not None and abs(s.meas.t - t) > 1e-9 * max(1.0, abs(t)):
            raise NonMonotoneTime(f"measurement time {s.meas.t!r} is not on the IMU grid point {t!r}")
        window.append((t, np.asarray(s.imu.omega, float), np.asarray(s.imu.accel, float), s.meas, s.truth))
        return True

    state = init
    k = 0
    while True:
        while len(window) - (k - base) < 3 and pull():
            pass
        if k - base >= len(window):
            return
        t, omega, _, meas, truth = window[k - base]
        pre = info = None
        if meas is not None:
            pre = state
            state, info = jump(state, meas, cfg, info=True)
        err = error_state(state, truth, cfg.landmarks, g_true) if truth is not None else None
        yield StepRecord(t, state, err, meas is not None, pre, info)
        if k + 1 - base < len(window):
            times = [w[0] for w in window]
            accs = [w[2] for w in window]
            a_fn = accel_interpolant(times, accs, k - base, cfg.accel_interp)
            state = flow(state, omega, a_fn, window[k + 1 - base][0] - t, cfg)
        k += 1
        while k - base > 1:
            window.popleft()
            base += 1


def basin_report(cfg: ObserverConfig, init: ObserverState, truth0: TrueState) -> dict:
    """Initial attitude error and landmark conditioning for comparison with the local basin."""
    _, _, Mb, vs = landmark_stats(cfg.landmarks)
    return {
        "rot_err0": dist_identity(truth0.R @ init.R_hat.T),
        "varsigma": vs,
        "eta0_norm": float(np.linalg.norm(init.eta)),
        "lambda_max_Mbar": float(np.linalg.eigvalsh(Mb)[-1]),
    }


def attitude_contraction(k_R: float, lm: LandmarkSet, T_m: float, T_M: float, samples: int = 201) -> np.ndarray:
    """Mean log contraction per event of the linearized attitude loop, per principal axis.

    Near the identity the attitude error shrinks by ``1 - k_R T lambda_i``
    along eigenvector ``i`` of ``Mbar`` over an inter-event gap ``T``. The
    returned values average ``log|1 - k_R T lambda_i|`` over ``T`` uniform in
    ``[T_m, T_M]``; all negative means the loop contracts on average.
    """
    _, _, Mb, _ = landmark_stats(lm)
    lam = np.linalg.eigvalsh(Mb)
    T = np.linspace(T_m, T_M, samples)
    f = np.abs(1.0 - k_R * np.outer(lam, T))
    with np.errstate(divide="ignore"):
        return np.log(f).mean(axis=1)
