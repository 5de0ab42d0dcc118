import math
import time

import numpy as np
import pytest
from scipy.linalg import expm

from hino.errors import HinoError, InfeasibleLMI
from hino.gain_cert import (CertProblem, a_full, certify, exact_phi_sup, exp_bound, fixed_gain_matrix, jump_matrix,
                            lmi_feasibility, phi, phi_reduced, xi, xi_max_eig)

I3, Z3 = np.eye(3), np.zeros((3, 3))
K6 = fixed_gain_matrix(0.5, 1.0)
K9 = fixed_gain_matrix(0.5, 1.0, 0.6)


@pytest.fixture(scope="module")
def cert6():
    return certify(CertProblem((0.5, 1.0), 0.04, 0.06))


@pytest.fixture(scope="module")
def cert9():
    return certify(CertProblem((0.5, 1.0, 0.6), 0.04, 0.06))


def test_phi_examples():
    np.testing.assert_array_equal(phi(0.0, 6), np.eye(6))
    np.testing.assert_allclose(phi(0.05, 6), np.block([[I3, 0.05 * I3], [Z3, I3]]), atol=1e-16)
    np.testing.assert_allclose(phi(1.0, 9)[:3, 6:], 0.5 * I3, atol=1e-16)
    with pytest.raises(HinoError):
        phi(-1.0, 6)


@pytest.mark.parametrize("dim", [6, 9])
def test_phi_matches_matrix_exponential(dim):
    for tau in np.random.default_rng(dim).uniform(0, 10, 50):
        np.testing.assert_allclose(phi(tau, dim), expm(a_full(dim) * tau), rtol=0, atol=1e-12 * max(1, tau ** 2))


def test_xi_examples():
    zero = np.zeros((6, 3))
    np.testing.assert_array_equal(xi(np.eye(6), 0.0, zero, 6), np.zeros((6, 6)))
    P = np.random.default_rng(0).standard_normal((9, 9))
    P = P @ P.T
    X = xi(P, 0.05, K9, 9)
    assert np.array_equal(X, X.T)
    np.testing.assert_allclose(xi_max_eig(P, [0.05], K9, 9)[0], np.linalg.eigvalsh(X)[-1], atol=1e-12)
    with pytest.raises(HinoError):
        xi(np.eye(6), 0.05, np.ones((6, 3)), 6)


@pytest.mark.parametrize("dim,K", [(6, K6), (9, K9)])
def test_kronecker_reduction_spectrum(dim, K):
    n = dim // 3
    rng = np.random.default_rng(dim)
    B = rng.standard_normal((n, n))
    Pr = B @ B.T + np.eye(n)
    P = np.kron(Pr, I3)
    for tau in (0.04, 0.05, 0.06, 0.3):
        Br = phi_reduced(tau, n) @ (np.eye(n) - np.outer(K[::3, 0], np.eye(n)[0]))
        red = np.linalg.eigvalsh(Br.T @ Pr @ Br - Pr)
        full = np.linalg.eigvalsh(xi(P, tau, K, dim))
        np.testing.assert_allclose(full, np.repeat(red, 3), atol=1e-12)


def test_exact_bound_matches_singular_value_formula():
    for tau in (0.01, 0.06, 1.0):
        s = math.sqrt((tau ** 2 + 2 + tau * math.sqrt(tau ** 2 + 4)) / 2)
        assert abs(exact_phi_sup(6, tau) - s) < 1e-12
    taus = np.linspace(0, 0.06, 50)
    norms = [np.linalg.norm(phi(t, 6), 2) for t in taus]
    assert np.all(np.diff(norms) >= 0)


@pytest.mark.parametrize("dim", [6, 9])
def test_lyapunov_bound_dominates_exact(dim):
    b = exp_bound(dim, 0.06, "lyapunov")
    assert b.beta > 0 and b.c_A >= b.exact
    for tau in np.linspace(0, 0.06, 100):
        assert np.linalg.norm(phi(tau, dim), 2) <= b.c_A
    assert exp_bound(dim, 0.06).c_A == b.exact


def test_lyapunov_bound_beta_threshold_for_identity_pi():
    # 2 beta I - (A + A^T) > 0 iff beta > lambda_max of the symmetric part of A, which is 1/2 for dim 6
    A = a_full(6)
    sym = np.linalg.eigvalsh(0.5 * (A + A.T))[-1]
    assert abs(sym - 0.5) < 1e-15
    assert np.linalg.eigvalsh(2 * 0.51 * np.eye(6) - (A + A.T))[0] > 0
    assert np.linalg.eigvalsh(2 * 0.49 * np.eye(6) - (A + A.T))[0] < 0
    with pytest.raises(HinoError):
        exp_bound(6, 0.06, "power")
    with pytest.raises(HinoError):
        exp_bound(6, 0.06, "lyapunov", beta=-1.0)


def test_lmi_feasible_on_endpoints():
    sol = lmi_feasibility([0.04, 0.06], K6, 6, mu=1e-3)
    w = np.linalg.eigvalsh(sol.P)
    assert w[0] >= 1 - 1e-9 and w[-1] <= sol.pbar * (1 + 1e-9)
    assert np.all(xi_max_eig(sol.P, [0.04, 0.06], K6, 6) <= -2e-3 * (1 - 1e-6))


@pytest.mark.parametrize("gains", [(0.0, 0.0), (1.0, 0.0)])
def test_lmi_infeasible_gains(gains):
    with pytest.raises(InfeasibleLMI) as exc:
        lmi_feasibility([0.04, 0.06], fixed_gain_matrix(*gains), 6)
    assert exc.value.tau in (0.04, 0.06)


def test_certify_dim6(cert6):
    r = cert6
    assert r.feasible and r.status == "feasible" and r.margin > 0
    assert np.linalg.eigvalsh(r.P)[0] >= 1 - 1e-9
    assert np.all(r.grid[:, 1] <= -2 * 1e-4 * (1 - 1e-9))
    assert r.grid[0, 0] == 0.04 and r.grid[-1, 0] == 0.06


def test_certify_dim9(cert9):
    assert cert9.feasible and cert9.margin > 0 and cert9.P.shape == (9, 9)


@pytest.mark.parametrize("name", ["cert6", "cert9"])
def test_certify_sound_on_dense_sweep(name, request):
    r = request.getfixturevalue(name)
    K = K6 if r.P.shape[0] == 6 else K9
    lam = xi_max_eig(r.P, np.linspace(0.04, 0.06, 10_000), K, r.P.shape[0])
    assert lam.max() < 0
    assert lam.max() <= -r.margin + 1e-12


def test_eigenvalue_lipschitz_bound(cert9):
    P = cert9.P
    Ag_norm = np.linalg.norm(jump_matrix(K9, 9), 2)
    c_A = exact_phi_sup(9, 0.06)
    L = 2 * np.linalg.norm(P, 2) * np.linalg.norm(a_full(9), 2) * c_A ** 2 * Ag_norm ** 2
    rng = np.random.default_rng(1)
    for _ in range(200):
        t1, t2 = rng.uniform(0.04, 0.06, 2)
        l1 = np.linalg.eigvalsh(xi(P, t1, K9, 9))
        l2 = np.linalg.eigvalsh(xi(P, t2, K9, 9))
        assert np.max(np.abs(l1 - l2)) <= L * abs(t1 - t2) + 1e-12


@pytest.mark.parametrize("gains,T", [((1.0, 0.0), (0.04, 0.06)), ((0.0, 0.0), (0.04, 0.06)),
                                     ((0.5, 1.0), (0.04, 10.0))])
def test_certify_reports_infeasible(gains, T):
    r = certify(CertProblem(gains, *T))
    assert not r.feasible and r.status == "infeasible" and T[0] <= r.tau <= T[1]
    k = np.asarray(gains)
    B = phi_reduced(r.tau, 2) @ (np.eye(2) - np.outer(k, [1, 0]))
    assert np.max(np.abs(np.linalg.eigvals(B))) >= 1 - 1e-12


def test_certify_lyapunov_route_also_feasible():
    r = certify(CertProblem((0.5, 1.0), 0.04, 0.06, bound="lyapunov"))
    assert r.feasible and r.c_A > exact_phi_sup(6, 0.06)


def test_cert_problem_validation():
    with pytest.raises(HinoError):
        CertProblem((0.5,), 0.04, 0.06)
    with pytest.raises(HinoError):
        CertProblem((0.5, 1.0), 0.06, 0.04)
    with pytest.raises(HinoError):
        CertProblem((0.5, 1.0), 0.04, 0.06, mu=0.0)


def test_certify_is_fast():
    t0 = time.perf_counter()
    certify(CertProblem((0.5, 1.0), 0.04, 0.06))
    certify(CertProblem((0.5, 1.0, 0.6), 0.04, 0.06))
    assert time.perf_counter() - t0 < 5.0
