"""Error traces, convergence statistics and the attitude Lyapunov function."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .errors import HinoError, MuTooSmall
from .so3 import mbar, psi


@dataclass
class ErrorTrace:
    """Error norms over time: attitude distance, position, velocity, gravity, ``||eta||``."""

    t: np.ndarray
    rot: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    grav: np.ndarray
    event: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        for name in ("t", "rot", "pos", "vel", "grav", "eta"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        self.event = np.asarray(self.event, dtype=bool)
        if self.t.size and np.any(np.diff(self.t) <= 0):
            raise HinoError("trace times must be strictly increasing")

    @classmethod
    def from_records(cls, records: Iterable) -> "ErrorTrace":
        """Build from observer :class:`~hino.observers.StepRecord` items carrying errors."""
        rows = [(r.t, r.error.rot, r.error.pos, r.error.vel, r.error.grav, r.event,
                 float(np.linalg.norm(r.state.eta))) for r in records]
        if not rows:
            raise HinoError("empty trace")
        cols = list(zip(*rows))
        return cls(*cols)

    def window(self, t0: float, t1: float = math.inf) -> "ErrorTrace":
        m = (self.t >= t0) & (self.t <= t1)
        return ErrorTrace(self.t[m], self.rot[m], self.pos[m], self.vel[m], self.grav[m], self.event[m], self.eta[m])

    def combined(self) -> np.ndarray:
        """``|R~|_I^2 + ||eta||^2 + ||p~||^2 + ||v~||^2`` (plus ``||g~||^2`` when tracked)."""
        total = self.rot ** 2 + self.eta ** 2 + self.pos ** 2 + self.vel ** 2
        return total + np.where(np.isnan(self.grav), 0.0, self.grav) ** 2


def mu_w_threshold(M, T_M: float) -> float:
    """Lower bound on ``mu`` making the attitude Lyapunov function positive and decreasing.

    ``max(lambda_max(Wbar) T_M^2 / (2 lambda_min(Mbar)), T_M ||Mbar||_F)`` where
    ``W' = tr(Mbar^2) I - 2 Mbar^2`` and ``Wbar = (tr(W') I - W') / 2``.
    """
    Mb = mbar(M)
    Mb2 = Mb @ Mb
    Wp = np.trace(Mb2) * np.eye(3) - 2.0 * Mb2
    Wb = 0.5 * (np.trace(Wp) * np.eye(3) - Wp)
    lam_Mb = np.linalg.eigvalsh(Mb)
    return float(max(0.5 * np.linalg.eigvalsh(Wb)[-1] * T_M ** 2 / lam_Mb[0], T_M * np.linalg.norm(Mb, "fro")))


def mu_w_rule(M, T_M: float, factor: float = 1.1) -> float:
    return factor * mu_w_threshold(M, T_M)


def k_r_star(T_m: float, T_M: float, mu_W: float) -> float:
    """Largest attitude gain for which the Lyapunov function cannot grow at events."""
    return T_m * math.exp(-T_M) / mu_W


def lyapunov_w(R_tilde, eta, tau: float, M, mu_W: float, T_M: Optional[float] = None) -> float:
    """``1/2 tr((I - R~) M) - tau eta^T psi(M R~) + mu_W e^tau eta^T eta``.

    When ``T_M`` is given, raises MuTooSmall unless ``mu_W`` exceeds
    :func:`mu_w_threshold`.
    """
    M = np.asarray(M, dtype=float)
    R_tilde = np.asarray(R_tilde, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if T_M is not None and not mu_W > mu_w_threshold(M, T_M):
        raise MuTooSmall(f"mu_W={mu_W:g} must exceed {mu_w_threshold(M, T_M):g}")
    return float(0.5 * np.trace((np.eye(3) - R_tilde) @ M) - tau * eta @ psi(M @ R_tilde)
                 + mu_W * math.exp(tau) * (eta @ eta))


def time_to_next_event(t, event) -> np.ndarray:
    """Timer value at each sample: time until the next event (``nan`` after the last one).

    At an event sample this is the post-event value, the gap to the following
    event; the pre-event value there is zero.
    """
    t = np.asarray(t, dtype=float)
    ev_t = t[np.asarray(event, dtype=bool)]
    idx = np.searchsorted(ev_t, t, side="right")
    out = np.full(t.shape, np.nan)
    ok = idx < len(ev_t)
    out[ok] = ev_t[idx[ok]] - t[ok]
    return out


@dataclass(frozen=True)
class ConvergenceReport:
    time_to_threshold: float
    steady_rms: float
    decay_rate: float
    r2: float
    segment: tuple  # (t_start, t_end) of the fitted decay segment


def _fit_line(x, y):
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return coef, r2


def convergence_stats(t, values, event=None, settle_frac: float = 0.25, threshold: Optional[float] = None,
                      floor_factor: float = 1e3) -> ConvergenceReport:
    """Time to threshold, steady-state RMS and log-linear decay rate of a non-negative signal.

    The decay segment starts at the first event (or the first sample without
    events) and ends when the signal first drops below ``floor_factor`` times
    the steady RMS of the last ``settle_frac`` of the run. Rate and ``R^2``
    are ``nan`` when the segment is too short or the signal is identically zero.
    """
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.size == 0 or t.size != v.size:
        raise HinoError("convergence_stats needs equal-length nonempty inputs")
    if not 0 < settle_frac <= 1:
        raise HinoError("settle_frac must lie in (0, 1]")
    t_end = t[-1] - settle_frac * (t[-1] - t[0])
    tail = v[t >= t_end]
    rms = float(np.sqrt(np.mean(tail ** 2)))
    ttt = math.nan
    if threshold is not None:
        # first time after which the signal stays below the threshold
        above = np.nonzero(v >= threshold)[0]
        if above.size == 0:
            ttt = float(t[0])
        elif above[-1] + 1 < t.size:
            ttt = float(t[above[-1] + 1])
    i0 = 0
    if event is not None and np.any(event):
        i0 = int(np.argmax(np.asarray(event, dtype=bool)))
    below = np.nonzero(v[i0:] < floor_factor * rms)[0]
    i1 = i0 + (int(below[0]) if below.size else v.size - i0)
    seg = slice(i0, i1)
    ts, vs = t[seg], v[seg]
    pos = vs > 0
    if np.count_nonzero(pos) < 3 or not np.any(v > 0):
        return ConvergenceReport(ttt, rms, math.nan, math.nan, (float(t[i0]), float(t[min(i1, t.size - 1)])))
    coef, r2 = _fit_line(ts[pos], np.log(vs[pos]))
    return ConvergenceReport(ttt, rms, float(-coef[0]), r2, (float(ts[0]), float(ts[-1])))


def stability_witness(trace: ErrorTrace, settle_frac: float = 0.25) -> ConvergenceReport:
    """Log-linear fit of the combined squared error after the first event.

    The decay rate is that of the squared norm, i.e. twice the rate of the
    error itself.
    """
    return convergence_stats(trace.t, trace.combined(), trace.event, settle_frac)
