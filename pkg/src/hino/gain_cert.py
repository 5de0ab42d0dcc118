"""Certification of fixed observer gains under aperiodic sampling.

For fixed gains the translational error obeys ``x+ = (I - K C) x`` at events
and ``dx/dt = A x`` between them, with ``A`` nilpotent. The gains are
certified by a symmetric ``P >= I`` with

    Xi_P(tau) = A_g^T Phi(tau)^T P Phi(tau) A_g - P < 0   for all tau in [T_m, T_M],

where ``Phi(tau) = exp(A tau)`` and ``A_g = I - K C``. The procedure solves
the inequality on a finite set of sampling gaps, then extends it to the whole
interval with an eigenvalue Lipschitz bound, refining the set with the worst
gap until the grid check passes.

All matrices are Kronecker products with ``I_3``, so the work is done on the
2x2 (dim 6) or 3x3 (dim 9) per-axis system and the result is inflated and
re-verified at full dimension.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import solve_continuous_lyapunov, solve_discrete_lyapunov
from scipy.optimize import minimize_scalar

from .errors import HinoError, InfeasibleLMI, InfeasibleStep1

DEFAULT_MU = 1e-4


def _axes(dim: int) -> int:
    if dim not in (6, 9):
        raise HinoError(f"dim must be 6 or 9, got {dim!r}")
    return dim // 3


def reduced_a(n: int) -> np.ndarray:
    return np.eye(n, k=1)


def fixed_gain_matrix(k_p: float, k_v: float, k_g: Optional[float] = None) -> np.ndarray:
    """Stacked gain ``[k_p I; k_v I(; k_g I)]`` of shape ``(dim, 3)``."""
    ks = [k_p, k_v] + ([] if k_g is None else [k_g])
    return np.kron(np.asarray(ks, dtype=float).reshape(-1, 1), np.eye(3))


def _reduce_gain(K, dim: int) -> np.ndarray:
    """Per-axis gain vector from a stacked gain matrix (or pass a vector through)."""
    n = _axes(dim)
    K = np.asarray(K, dtype=float)
    if K.ndim == 1:
        if len(K) != n:
            raise HinoError(f"expected {n} scalar gains, got {len(K)}")
        return K
    if K.shape != (dim, 3):
        raise HinoError(f"gain matrix must be {dim}x3, got {K.shape}")
    k = K[::3, 0].copy()
    if not np.allclose(K, np.kron(k.reshape(-1, 1), np.eye(3)), atol=1e-14):
        raise HinoError("gain matrix must be a stack of scalar multiples of I3")
    return k


def phi_reduced(tau: float, n: int) -> np.ndarray:
    A = reduced_a(n)
    return np.eye(n) + A * tau + (A @ A) * (0.5 * tau * tau)


def phi(tau: float, dim: int = 6) -> np.ndarray:
    """Closed-form ``exp(A tau)``; ``A`` is nilpotent so the series terminates."""
    if tau < 0:
        raise HinoError("tau must be non-negative")
    return np.kron(phi_reduced(tau, _axes(dim)), np.eye(3))


def a_full(dim: int) -> np.ndarray:
    return np.kron(reduced_a(_axes(dim)), np.eye(3))


def c_full(dim: int) -> np.ndarray:
    C = np.zeros((3, dim))
    C[:, :3] = np.eye(3)
    return C


def jump_matrix(K, dim: int) -> np.ndarray:
    """``A_g = I - K C`` at full dimension."""
    k = _reduce_gain(K, dim)
    n = len(k)
    Ar = np.eye(n) - np.outer(k, np.eye(n)[0])
    return np.kron(Ar, np.eye(3))


def _closed_loop_reduced(k, taus) -> np.ndarray:
    """Stack of ``Phi(tau) A_g`` for each ``tau`` (per-axis)."""
    n = len(k)
    Ag = np.eye(n) - np.outer(k, np.eye(n)[0])
    return np.stack([phi_reduced(t, n) @ Ag for t in np.atleast_1d(taus)])


def xi(P, tau: float, K, dim: int = 6) -> np.ndarray:
    """``A_g^T Phi(tau)^T P Phi(tau) A_g - P`` at full dimension."""
    P = np.asarray(P, dtype=float)
    B = phi(tau, dim) @ jump_matrix(K, dim)
    X = B.T @ P @ B - P
    return 0.5 * (X + X.T)


def xi_max_eig(P, taus, K, dim: int = 6) -> np.ndarray:
    """``lambda_max(Xi_P(tau))`` for each ``tau``, batched at full dimension."""
    P = np.asarray(P, dtype=float)
    k = _reduce_gain(K, dim)
    Ag = jump_matrix(k, dim)
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    A = a_full(dim)
    I = np.eye(dim)
    Phis = I + taus[:, None, None] * A + (0.5 * taus ** 2)[:, None, None] * (A @ A)
    B = Phis @ Ag
    X = np.swapaxes(B, 1, 2) @ P @ B - P
    return np.linalg.eigvalsh(0.5 * (X + np.swapaxes(X, 1, 2)))[:, -1]


def _xi_max_reduced(Pr, k, taus) -> np.ndarray:
    B = _closed_loop_reduced(k, taus)
    X = np.swapaxes(B, 1, 2) @ Pr @ B - Pr
    return np.linalg.eigvalsh(0.5 * (X + np.swapaxes(X, 1, 2)))[:, -1]


@dataclass(frozen=True)
class ExpBound:
    c_A: float
    beta: float
    Pi: np.ndarray
    exact: float  # sup of ||Phi(tau)||_2 over [0, T_M]


def exact_phi_sup(dim: int, T_M: float) -> float:
    """``sup ||exp(A tau)||_2`` over ``[0, T_M]``.

    Entries of ``exp(A tau)`` are non-negative and non-decreasing in ``tau``,
    so the spectral norm is non-decreasing and the supremum sits at ``T_M``.
    """
    return float(np.linalg.norm(phi_reduced(T_M, _axes(dim)), 2))


def _lyapunov_bound(A, beta, T_M):
    n = len(A)
    F = -A + beta * np.eye(n)
    # F^T Pi + Pi F = I
    Pi = solve_continuous_lyapunov(F.T, np.eye(n))
    Pi = 0.5 * (Pi + Pi.T)
    w = np.linalg.eigvalsh(Pi)
    if w[0] <= 0 or not np.all(np.isfinite(w)):
        raise InfeasibleStep1(f"no positive definite Pi for beta={beta}")
    gamma = math.sqrt(w[-1] / w[0])
    return gamma * math.exp(beta * T_M), Pi


def exp_bound(dim: int, T_M: float, method: str = "exact", beta: Optional[float] = None) -> ExpBound:
    """Constant ``c_A >= sup ||exp(A tau)||`` over ``[0, T_M]``.

    ``method="exact"`` uses the closed-form supremum. ``method="lyapunov"``
    solves ``(-A + beta I)^T Pi + Pi (-A + beta I) = I`` and returns
    ``sqrt(cond(Pi)) exp(beta T_M)``; ``beta`` is optimized when not given.
    """
    if not T_M > 0:
        raise HinoError("T_M must be positive")
    n = _axes(dim)
    A = reduced_a(n)
    exact = exact_phi_sup(dim, T_M)
    if method == "exact":
        return ExpBound(exact, 0.0, np.eye(dim), exact)
    if method != "lyapunov":
        raise HinoError(f"unknown exp_bound method {method!r}")
    if beta is None:
        res = minimize_scalar(lambda b: _lyapunov_bound(A, b, T_M)[0], bounds=(1e-3, 50.0), method="bounded")
        beta = float(res.x)
    if not beta > 0:
        raise InfeasibleStep1("beta must be positive")
    c_A, Pi = _lyapunov_bound(A, beta, T_M)
    return ExpBound(c_A, float(beta), np.kron(Pi, np.eye(3)), exact)


@dataclass(frozen=True)
class LmiSolution:
    P: np.ndarray  # full dimension
    P_reduced: np.ndarray
    pbar: float
    iterations: int


def _vec_ops(Bs):
    n = Bs[0].shape[0]
    Ls = [np.kron(B.T, B.T) - np.eye(n * n) for B in Bs]  # vec(B^T P B - P), row-major
    H = np.eye(n * n) + sum(L.T @ L for L in Ls)
    return Ls, np.linalg.inv(H)


def _alt_proj(Bs, Ls, Hinv, mu2, pbar, P0, max_iter, tol):
    """Alternating projections onto {Z_t = L_t(P)} and {1 <= eig(P) <= pbar, Z_t <= -mu2}.

    Returns ``(P, iterations)`` with ``P`` exactly satisfying the constraints
    (after rescaling) or ``(None, iterations)``.
    """
    n = P0.shape[0]
    m = len(Bs)
    lo = np.array([1.0] + [-np.inf] * m)[:, None]
    hi = np.array([pbar] + [-mu2] * m)[:, None]
    p = P0.ravel().copy()
    for it in range(1, max_iter + 1):
        P = p.reshape(n, n)
        P = 0.5 * (P + P.T)
        Z = np.stack([P] + [(L @ P.ravel()).reshape(n, n) for L in Ls])
        Z = 0.5 * (Z + np.swapaxes(Z, 1, 2))
        w, V = np.linalg.eigh(Z)
        if np.max(lo - w) <= tol and np.max(w - hi) <= tol:
            cand = _finalize(P, Bs, mu2, pbar)
            if cand is not None:
                return cand, it
        wc = np.clip(w, lo, hi)
        Zc = np.einsum("kij,kj,klj->kil", V, wc, V)
        p = Hinv @ (Zc[0].ravel() + sum(L.T @ Zc[i + 1].ravel() for i, L in enumerate(Ls)))
    return None, max_iter


def _finalize(P, Bs, mu2, pbar):
    lam = np.linalg.eigvalsh(P)
    if lam[0] <= 0:
        return None
    if lam[0] < 1.0:
        P = P / lam[0]  # Xi is linear in P, so scaling up only deepens negativity
    worst = max(np.linalg.eigvalsh(B.T @ P @ B - P)[-1] for B in Bs)
    if worst <= -mu2 and np.linalg.eigvalsh(P)[-1] <= pbar * (1 + 1e-6):
        return P
    return None


def _spectral_check(k, taus):
    """Raise InfeasibleLMI if some ``Phi(tau) A_g`` is not Schur stable."""
    Bs = _closed_loop_reduced(k, taus)
    rho = np.max(np.abs(np.linalg.eigvals(Bs)), axis=1)
    bad = int(np.argmax(rho))
    if rho[bad] >= 1.0:
        t = float(np.atleast_1d(taus)[bad])
        raise InfeasibleLMI(f"closed-loop sampling map has spectral radius {rho[bad]:.6g} >= 1 at tau={t:.6g}",
                            tau=t)


def lmi_feasibility(tau_set: Sequence[float], K, dim: int = 6, mu: float = DEFAULT_MU, pbar_max: float = 1e4,
                    max_iter: int = 5000, tol: float = 1e-8, bisection_steps: int = 8,
                    rel_tol: float = 0.05, bisection_iter: int = 1500) -> LmiSolution:
    """Minimal-``pbar`` solution of ``Xi_P(tau) <= -2 mu I`` on ``tau_set`` with ``I <= P <= pbar I``.

    Solved on the per-axis system by alternating projections, with bisection
    on ``pbar`` (relative tolerance ``rel_tol``, at most ``bisection_iter``
    iterations per trial). Raises InfeasibleLMI when no
    solution is found with ``pbar <= pbar_max``.
    """
    if not mu > 0:
        raise HinoError("mu must be positive")
    taus = np.atleast_1d(np.asarray(tau_set, dtype=float))
    if taus.size == 0:
        raise HinoError("tau_set must be nonempty")
    k = _reduce_gain(K, dim)
    n = len(k)
    _spectral_check(k, taus)
    Bs = list(_closed_loop_reduced(k, taus))
    Ls, Hinv = _vec_ops(Bs)
    mu2 = 2.0 * mu
    # warm start: averaged discrete Lyapunov solution, normalized to lambda_min = 1
    P0 = sum(solve_discrete_lyapunov(B.T, np.eye(n)) for B in Bs) / len(Bs)
    P0 = 0.5 * (P0 + P0.T)
    P0 /= np.linalg.eigvalsh(P0)[0]
    total = 0
    best = _finalize(P0, Bs, mu2, pbar_max)
    if best is None:
        best, it = _alt_proj(Bs, Ls, Hinv, mu2, pbar_max, P0, max_iter, tol)
        total += it
        if best is None:
            worst = taus[int(np.argmax(_xi_max_reduced(P0, k, taus)))]
            raise InfeasibleLMI(f"no P with pbar <= {pbar_max:g} satisfies the sampled inequality", tau=float(worst))
    hi = float(np.linalg.eigvalsh(best)[-1])
    lo = 1.0
    for _ in range(bisection_steps):
        if hi <= lo * (1.0 + rel_tol):
            break
        mid = math.sqrt(lo * hi)
        start = best * min(1.0, mid / hi)
        start = start / min(1.0, np.linalg.eigvalsh(start)[0])
        cand, it = _alt_proj(Bs, Ls, Hinv, mu2, mid, start, bisection_iter, tol)
        total += it
        if cand is None:
            lo = mid
        else:
            best = cand
            hi = float(np.linalg.eigvalsh(cand)[-1])
    return LmiSolution(np.kron(best, np.eye(3)), best, hi, total)


@dataclass(frozen=True)
class CertProblem:
    gains: tuple  # (k_p, k_v) or (k_p, k_v, k_g)
    T_m: float
    T_M: float
    mu: float = DEFAULT_MU
    max_iter: int = 20
    bound: str = "exact"

    def __post_init__(self):
        if len(self.gains) not in (2, 3):
            raise HinoError("gains must be (k_p, k_v) or (k_p, k_v, k_g)")
        if not (0 < self.T_m <= self.T_M < math.inf):
            raise HinoError(f"need 0 < T_m <= T_M, got {self.T_m}, {self.T_M}")
        if not self.mu > 0:
            raise HinoError("mu must be positive")

    @property
    def dim(self) -> int:
        return 3 * len(self.gains)

    @property
    def K(self) -> np.ndarray:
        return fixed_gain_matrix(*self.gains)


@dataclass
class CertificationResult:
    """Outcome of :func:`certify`.

    ``margin`` is a bound ``m`` such that ``lambda_max(Xi_P(tau)) <= -m`` for
    every ``tau`` in ``[T_m, T_M]`` (when feasible). ``grid`` holds the
    checked ``(tau, lambda_max)`` pairs of the final round.
    """

    feasible: bool
    P: Optional[np.ndarray]
    margin: float
    grid: np.ndarray
    iterations: int
    status: str
    tau: Optional[float] = None
    tau_set: list = field(default_factory=list)
    pbar: float = math.nan
    delta: float = math.nan
    c_A: float = math.nan


def certify(problem: CertProblem) -> CertificationResult:
    """Certify ``Xi_P(tau) < 0`` on the whole sampling interval.

    Never raises for an uncertifiable gain: the result carries
    ``feasible=False`` with ``status`` ``"infeasible"`` (with the offending
    ``tau``) or ``"max_iterations"``.
    """
    dim, mu = problem.dim, problem.mu
    k = np.asarray(problem.gains, dtype=float)
    n = len(k)
    T_m, T_M = problem.T_m, problem.T_M
    empty = np.zeros((0, 2))
    # quick necessary condition over a coarse sweep
    try:
        _spectral_check(k, np.linspace(T_m, T_M, 201))
    except InfeasibleLMI as exc:
        return CertificationResult(False, None, math.nan, empty, 0, "infeasible", exc.tau)
    c_A = exp_bound(dim, T_M, problem.bound).c_A
    Ag_norm = float(np.linalg.norm(np.eye(n) - np.outer(k, np.eye(n)[0]), 2))
    A_norm = float(np.linalg.norm(reduced_a(n), 2))
    tau_set = [T_m, T_M] if T_M > T_m else [T_m]
    iterations = 0
    grid = empty
    for rnd in range(1, problem.max_iter + 1):
        try:
            sol = lmi_feasibility(tau_set, k, dim, mu * (1.0 + 1e-3))
        except InfeasibleLMI as exc:
            return CertificationResult(False, None, math.nan, grid, iterations, "infeasible",
                                       exc.tau, list(tau_set))
        iterations += sol.iterations
        Pr = sol.P_reduced
        pnorm = float(np.linalg.eigvalsh(Pr)[-1])
        delta = mu / (2.0 * sol.pbar * c_A ** 2 * A_norm * Ag_norm ** 2)
        taus = np.arange(T_m, T_M, 2.0 * delta)
        taus = np.append(taus, T_M) if (taus.size == 0 or taus[-1] < T_M) else taus
        lam = _xi_max_reduced(Pr, k, taus)
        grid = np.column_stack([taus, lam])
        worst = int(np.argmax(lam))
        if lam[worst] <= -2.0 * mu:
            P = sol.P
            # confirm at full dimension on the same grid
            lam_full = xi_max_eig(P, taus, k, dim)
            if np.max(lam_full) <= -2.0 * mu * (1.0 - 1e-9):
                # between grid points lambda_max moves by at most delta * Lipschitz = mu * ||P|| / pbar
                margin = -(float(np.max(lam_full)) + mu * pnorm / sol.pbar)
                return CertificationResult(True, P, margin, np.column_stack([taus, lam_full]), iterations,
                                           "feasible", None, list(tau_set), sol.pbar, delta, c_A)
        tau_set.append(float(taus[worst]))
    return CertificationResult(False, None, math.nan, grid, iterations, "max_iterations",
                               float(grid[int(np.argmax(grid[:, 1])), 0]), list(tau_set))
