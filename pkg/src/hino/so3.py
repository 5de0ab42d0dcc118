"""Rotation-group primitives and the matrix maps used by the observers.

Vectors are ``(3,)`` float arrays and matrices ``(3, 3)`` float arrays.
Rotations are plain matrices; :func:`is_rotation` checks the group
invariants and :func:`project_to_so3` restores them after drift.
"""
import math

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import NonFiniteState, NotAntisymmetric, NotUnitAxis

ROTATION_TOL = 1e-9
_SMALL_ANGLE = 1e-8


def hat(v) -> np.ndarray:
    """Cross-product matrix: ``hat(v) @ w == np.cross(v, w)``."""
    x, y, z = float(v[0]), float(v[1]), float(v[2])
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(A, tol: float = 1e-6) -> np.ndarray:
    """Inverse of :func:`hat`.

    Raises NotAntisymmetric when ``||A + A^T||_F > tol``.
    """
    A = np.asarray(A, dtype=float)
    if np.linalg.norm(A + A.T) > tol:
        raise NotAntisymmetric(f"matrix is not antisymmetric: ||A+A^T||_F = {np.linalg.norm(A + A.T):.3e}")
    return np.array([A[2, 1], A[0, 2], A[1, 0]])


def psi(A) -> np.ndarray:
    """Vector of the antisymmetric part of ``A``, i.e. ``vee((A - A^T)/2)``.

    Satisfies ``trace(A @ hat(u)) == -2 u . psi(A)`` for every ``u``.
    """
    A = np.asarray(A, dtype=float)
    return 0.5 * np.array([A[2, 1] - A[1, 2], A[0, 2] - A[2, 0], A[1, 0] - A[0, 1]])


def exp_so3(v) -> np.ndarray:
    """Rotation matrix ``exp(hat(v))`` by the Rodrigues formula.

    Below ``||v|| = 1e-8`` the second-order Taylor expansion is used to
    avoid the ``sin(t)/t`` cancellation.
    """
    x, y, z = float(v[0]), float(v[1]), float(v[2])
    theta2 = x * x + y * y + z * z
    if not math.isfinite(theta2):
        raise NonFiniteState(f"rotation vector is not finite: {v!r}")
    K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    K2 = K @ K
    if theta2 < _SMALL_ANGLE * _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K2
    theta = math.sqrt(theta2)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / theta2
    return np.eye(3) + a * K + b * K2


def angle_axis(theta: float, u) -> np.ndarray:
    """``I + sin(theta) u^x + (1 - cos(theta)) (u^x)^2`` for a unit axis ``u``."""
    u = np.asarray(u, dtype=float)
    if abs(np.linalg.norm(u) - 1.0) > 1e-9:
        raise NotUnitAxis(f"rotation axis must have unit norm, got {np.linalg.norm(u)!r}")
    K = hat(u)
    return np.eye(3) + math.sin(theta) * K + (1.0 - math.cos(theta)) * (K @ K)


def dist_identity(R) -> float:
    """Normalized distance ``|R|_I = sqrt(trace(I - R) / 4) = |sin(theta / 2)|`` in ``[0, 1]``.

    Evaluated through the rotation angle so small distances keep full
    relative precision instead of flooring at ``sqrt(eps)``.
    """
    R = np.asarray(R, dtype=float)
    s = float(np.linalg.norm(psi(R)))
    c = 0.5 * (np.trace(R) - 1.0)
    return min(max(math.sin(0.5 * math.atan2(s, c)), 0.0), 1.0)


def mbar(M) -> np.ndarray:
    """``(trace(M) I - M) / 2``."""
    M = np.asarray(M, dtype=float)
    return 0.5 * (np.trace(M) * np.eye(3) - M)


def e_matrix(M, R) -> np.ndarray:
    """``E(MR) = (trace(M R) I - R^T M) / 2``.

    Along ``dR/dt = R hat(w)`` one has ``d psi(M R)/dt = E(MR) w``.
    """
    M = np.asarray(M, dtype=float)
    R = np.asarray(R, dtype=float)
    return 0.5 * (np.trace(M @ R) * np.eye(3) - R.T @ M)


def is_rotation(R, tol: float = ROTATION_TOL) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(np.linalg.norm(R.T @ R - np.eye(3)) <= tol and abs(np.linalg.det(R) - 1.0) <= tol)


def project_to_so3(R) -> np.ndarray:
    """Nearest rotation in Frobenius norm (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def renormalize(R, tol: float = ROTATION_TOL) -> np.ndarray:
    """Project onto SO(3) only when the invariants are violated beyond ``tol``."""
    return R if is_rotation(R, tol) else project_to_so3(R)


def quat_to_rot(q) -> np.ndarray:
    """Scalar-first unit quaternion ``[w, x, y, z]`` to a rotation matrix."""
    return Rotation.from_quat(np.asarray(q, dtype=float), scalar_first=True).as_matrix()


def rot_to_quat(R) -> np.ndarray:
    """Rotation matrix to a normalized scalar-first quaternion with ``w >= 0``."""
    q = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat(canonical=True, scalar_first=True)
    return q / np.linalg.norm(q)
