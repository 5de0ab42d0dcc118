"""Continuous-discrete Riccati equation for the variable-gain observers.

The translational error is expressed in the body frame, with state
dimension 6 (position, velocity) or 9 (plus gravity). Between events,
``dP/dt = A_t P + P A_t^T + V_t``. At an event,
``P+ = P - P C^T (C P C^T + Q_t)^-1 C P``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import LostPositivity, SingularInnovationCovariance, WindowTooShort
from .so3 import exp_so3, hat


def _check_dim(dim):
    if dim not in (6, 9):
        raise ValueError(f"dim must be 6 or 9, got {dim!r}")
    return dim // 3


def shift_matrix(n: int) -> np.ndarray:
    """Nilpotent block shift of the reduced (per-axis) error dynamics."""
    return np.eye(n, k=1)


def a_matrix(omega, dim: int = 6) -> np.ndarray:
    """Block bidiagonal ``A_t``: ``-hat(omega)`` on the diagonal, ``I`` above it."""
    n = _check_dim(dim)
    return np.kron(np.eye(n), -hat(omega)) + np.kron(shift_matrix(n), np.eye(3))


def c_matrix(dim: int = 6) -> np.ndarray:
    n = _check_dim(dim)
    C = np.zeros((3, dim))
    C[:, :3] = np.eye(3)
    return C


def transition_matrix(omega, dt: float, dim: int = 6) -> np.ndarray:
    """Exact ``exp(A_t dt)`` for constant ``omega``.

    The two parts of ``A_t`` commute, so the exponential factors into
    ``kron(exp(N dt), exp(-hat(omega) dt))`` with ``N`` nilpotent.
    """
    n = _check_dim(dim)
    N = shift_matrix(n)
    EN = np.eye(n) + N * dt + (N @ N) * (dt * dt / 2.0)
    return np.kron(EN, exp_so3(-np.asarray(omega, dtype=float) * dt))


@dataclass
class RiccatiState:
    P: np.ndarray

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        _check_dim(self.P.shape[0])

    @property
    def dim(self) -> int:
        return self.P.shape[0]

    def eig_range(self):
        w = np.linalg.eigvalsh(self.P)
        return float(w[0]), float(w[-1])


def _as_cov(C):
    C = np.asarray(C, dtype=float)
    return float(C) * np.eye(3) if C.ndim == 0 else C


@dataclass
class NoiseModel:
    """Noise covariances used to build ``V_t`` and ``Q_t``.

    ``cov_landmark`` is either one 3x3 matrix shared by every landmark or a
    sequence of per-landmark matrices indexed by landmark id.
    """

    cov_omega: np.ndarray = field(default_factory=lambda: 1e-4 * np.eye(3))
    cov_accel: np.ndarray = field(default_factory=lambda: 1e-2 * np.eye(3))
    cov_landmark: object = field(default_factory=lambda: 1e-2 * np.eye(3))
    floor_V: float = 1e-9

    def __post_init__(self):
        self.cov_omega = _as_cov(self.cov_omega)
        self.cov_accel = _as_cov(self.cov_accel)
        cl = np.asarray(self.cov_landmark, dtype=float)
        self.cov_landmark = _as_cov(cl) if cl.ndim < 3 else cl
        if self.floor_V < 0:
            raise ValueError("floor_V must be non-negative")

    def landmark_cov(self, index: int) -> np.ndarray:
        cl = self.cov_landmark
        return cl if cl.ndim == 2 else cl[index]


def _lyap_rhs(A, P, V):
    AP = A @ P
    return AP + AP.T + V


def flow_P(P: RiccatiState, omega, V, dt: float) -> RiccatiState:
    """One RK4 step of the Lyapunov flow, followed by symmetrization."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    A = a_matrix(omega, P.dim)
    X = P.P
    k1 = _lyap_rhs(A, X, V)
    k2 = _lyap_rhs(A, X + 0.5 * dt * k1, V)
    k3 = _lyap_rhs(A, X + 0.5 * dt * k2, V)
    k4 = _lyap_rhs(A, X + dt * k3, V)
    Xn = X + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    Xn = 0.5 * (Xn + Xn.T)
    if not np.all(np.isfinite(Xn)) or np.linalg.eigvalsh(Xn)[0] <= 0:
        raise LostPositivity(f"P lost positive definiteness after a flow step of {dt} s")
    return RiccatiState(Xn)


def gain(P: np.ndarray, Q) -> np.ndarray:
    """``K = P C^T (C P C^T + Q)^-1``."""
    S = P[:3, :3] + Q
    try:
        cf = cho_factor(0.5 * (S + S.T))
    except np.linalg.LinAlgError as exc:
        raise SingularInnovationCovariance("C P C^T + Q is not positive definite") from exc
    # K^T = S^-1 C P  (S symmetric)
    return cho_solve(cf, P[:3, :]).T


def update_P(P: RiccatiState, Q):
    """Measurement update; returns ``(RiccatiState(P+), K)``."""
    Q = np.asarray(Q, dtype=float)
    K = gain(P.P, Q)
    Pn = P.P - K @ P.P[:3, :]
    Pn = 0.5 * (Pn + Pn.T)
    return RiccatiState(Pn), K


def noise_input_matrix(R_hat, p_hat, v_hat, p_c, g_hat=None) -> np.ndarray:
    """Linearized noise input ``G_t`` mapping ``[n_omega; n_a]`` into the error rate."""
    rows = [
        np.hstack([hat(R_hat.T @ (p_hat - p_c)), np.zeros((3, 3))]),
        np.hstack([hat(R_hat.T @ v_hat), np.eye(3)]),
    ]
    if g_hat is not None:
        rows.append(np.hstack([hat(R_hat.T @ g_hat), np.zeros((3, 3))]))
    return np.vstack(rows)


def adapt_noise(state, lm, model: NoiseModel, dim: int = 6, indices: Optional[Sequence[int]] = None):
    """Noise-adapted ``(V_t, Q_t)`` at the current estimate.

    ``state`` needs ``R_hat``, ``p_hat``, ``v_hat`` and, for ``dim == 9``,
    ``g_hat``. ``lm`` supplies the weights and centre; ``indices`` maps rows
    of ``lm`` back to landmark ids for per-landmark covariances.
    """
    _check_dim(dim)
    R_hat = state.R_hat
    g_hat = state.g_hat if dim == 9 else None
    G = noise_input_matrix(R_hat, state.p_hat, state.v_hat, lm.center, g_hat)
    cov = np.zeros((6, 6))
    cov[:3, :3] = model.cov_omega
    cov[3:, 3:] = model.cov_accel
    V = G @ cov @ G.T + model.floor_V * np.eye(dim)
    ids = range(len(lm)) if indices is None else indices
    Qb = sum(k * k * model.landmark_cov(i) for k, i in zip(lm.weights, ids))
    Q = R_hat @ Qb @ R_hat.T
    return 0.5 * (V + V.T), 0.5 * (Q + Q.T)


@dataclass
class GramianReport:
    gamma: int
    mu_phi: float
    mu_v: float
    mu_V: float
    mu_q: float
    mu_Q: float
    windows: int

    def as_dict(self):
        return {k: getattr(self, k) for k in ("gamma", "mu_phi", "mu_v", "mu_V", "mu_q", "mu_Q", "windows")}


def default_window(dim: int) -> int:
    return 2 if dim == 6 else 3


def gramian_diagnostics(times, omega_log, event_steps, Q_log, V_log, gamma: Optional[int] = None,
                        dim: int = 6) -> GramianReport:
    """Empirical bounds of the three windowed conditions guaranteeing bounded ``P``.

    Parameters
    ----------
    times : (K,) grid times
    omega_log : (K, 3) body rates, held over each step
    event_steps : increasing grid indices of measurement events
    Q_log : (J, 3, 3) output noise matrix at each event
    V_log : (K, dim, dim) process noise matrix at each grid step
    gamma : window length in events

    Returns extremal eigenvalues over all windows ``j >= gamma`` of
    ``Phi^T Phi`` between consecutive events, of the integral of
    ``Phi V Phi^T`` over the window, and of the sum of
    ``Phi^T C^T Q^-1 C Phi`` over the window's events.
    """
    gamma = default_window(dim) if gamma is None else int(gamma)
    times = np.asarray(times, dtype=float)
    omega_log = np.asarray(omega_log, dtype=float)
    ev = [int(e) for e in event_steps]
    if gamma < 1 or len(ev) < gamma + 2:
        raise WindowTooShort(f"need at least gamma + 2 = {gamma + 2} events, got {len(ev)}")
    C = c_matrix(dim)
    steps = [transition_matrix(omega_log[k], times[k + 1] - times[k], dim) for k in range(len(times) - 1)]

    def phi(k0, k1):
        F = np.eye(dim)
        for k in range(k0, k1):
            F = steps[k] @ F
        return F

    mu_phi = math.inf
    mu_v, mu_V = math.inf, 0.0
    mu_q, mu_Q = math.inf, 0.0
    windows = 0
    for j in range(gamma, len(ev) - 1):
        F = phi(ev[j], ev[j + 1])
        mu_phi = min(mu_phi, np.linalg.eigvalsh(F.T @ F)[0])
        # integral over [t_{j-gamma}, t_j] of Phi(t_j, s) V(s) Phi(t_j, s)^T, left Riemann sum
        acc = np.zeros((dim, dim))
        F_back = np.eye(dim)
        for k in range(ev[j] - 1, ev[j - gamma] - 1, -1):
            F_back = F_back @ steps[k]
            h = times[k + 1] - times[k]
            acc += h * (F_back @ V_log[k] @ F_back.T)
        w = np.linalg.eigvalsh(0.5 * (acc + acc.T))
        mu_v, mu_V = min(mu_v, w[0]), max(mu_V, w[-1])
        # observability sum with Phi(t_i, t_j) = Phi(t_j, t_i)^-1
        obs = np.zeros((dim, dim))
        for i in range(j - gamma, j + 1):
            Fi = np.linalg.inv(phi(ev[i], ev[j]))
            obs += Fi.T @ C.T @ np.linalg.solve(Q_log[i], C @ Fi)
        w = np.linalg.eigvalsh(0.5 * (obs + obs.T))
        mu_q, mu_Q = min(mu_q, w[0]), max(mu_Q, w[-1])
        windows += 1
    return GramianReport(gamma, float(mu_phi), float(mu_v), float(mu_V), float(mu_q), float(mu_Q), windows)
