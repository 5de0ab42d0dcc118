import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import expm
from scipy.spatial.transform import Rotation

from bench import bench_landmarks
from hino.errors import LostPositivity, SingularInnovationCovariance, WindowTooShort
from hino.observers import ObserverState
from hino.riccati import (NoiseModel, RiccatiState, a_matrix, adapt_noise, c_matrix, default_window, flow_P, gain,
                          gramian_diagnostics, noise_input_matrix, transition_matrix, update_P)
from hino.so3 import hat
from hino.world import EIGHT_OMEGA, eight_shape_truth

E3 = np.array([0.0, 0, 1])
Z3, I3 = np.zeros((3, 3)), np.eye(3)


def rand_spd(dim, seed, scale=1.0):
    B = np.random.default_rng(seed).standard_normal((dim, dim))
    return scale * (B @ B.T / dim + 0.1 * np.eye(dim))


def test_a_matrix_examples():
    np.testing.assert_array_equal(a_matrix(np.zeros(3), 6), np.block([[Z3, I3], [Z3, Z3]]))
    A = a_matrix(E3, 6)
    np.testing.assert_array_equal(A[:3, :3], -hat(E3))
    np.testing.assert_array_equal(A[3:, 3:], -hat(E3))
    np.testing.assert_array_equal(A[:3, 3:], I3)
    A9 = a_matrix(np.zeros(3), 9)
    assert np.any(A9 @ A9) and not np.any(A9 @ A9 @ A9)
    np.testing.assert_array_equal(c_matrix(9), np.hstack([I3, Z3, Z3]))
    with pytest.raises(ValueError):
        a_matrix(np.zeros(3), 7)


@given(st.integers(0, 1000), st.floats(0.0, 2.0), st.sampled_from([6, 9]))
def test_transition_matrix_is_exponential(seed, dt, dim):
    w = np.random.default_rng(seed).standard_normal(3)
    np.testing.assert_allclose(transition_matrix(w, dt, dim), expm(a_matrix(w, dim) * dt), atol=1e-12)


def test_flow_P_examples():
    dt = 0.1
    Phi = np.eye(6) + a_matrix(np.zeros(3), 6) * dt
    out = flow_P(RiccatiState(np.eye(6)), np.zeros(3), np.zeros((6, 6)), dt)
    np.testing.assert_allclose(out.P, Phi @ Phi.T, atol=1e-14)
    # with V only, the nilpotent part still acts; its closed form is the Lyapunov integral
    V = np.eye(6)
    out = flow_P(RiccatiState(np.eye(6)), np.zeros(3), V, dt)
    integral = sum(w * expm(a_matrix(np.zeros(3), 6) * s) @ V @ expm(a_matrix(np.zeros(3), 6) * s).T
                   for s, w in zip(*_gl(dt)))
    np.testing.assert_allclose(out.P, Phi @ Phi.T + integral, atol=1e-12)
    with pytest.raises(ValueError):
        flow_P(RiccatiState(np.eye(6)), np.zeros(3), V, 0.0)


def _gl(h, n=8):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * h * (x + 1), 0.5 * h * w


@given(st.integers(0, 1000))
def test_flow_P_matches_exact_solution(seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(3)
    P0, V = rand_spd(9, seed), rand_spd(9, seed + 1)
    h = 0.005
    F = transition_matrix(w, h, 9)
    exact = F @ P0 @ F.T + sum(wt * transition_matrix(w, s, 9) @ V @ transition_matrix(w, s, 9).T
                               for s, wt in zip(*_gl(h)))
    out = flow_P(RiccatiState(P0), w, V, h)
    # RK4 local error is O(h^5)
    np.testing.assert_allclose(out.P, exact, atol=1e-9)
    assert np.array_equal(out.P, out.P.T)


@given(st.integers(0, 1000))
def test_flow_P_trace_growth(seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(3)
    P0, V = rand_spd(6, seed), rand_spd(6, seed + 1)
    h = 1e-4
    dtr = np.trace(flow_P(RiccatiState(P0), w, V, h).P) - np.trace(P0)
    # skew blocks drop out of the trace; only the shift term and V contribute
    N = a_matrix(np.zeros(3), 6)
    expected = h * (2 * np.trace(N @ P0) + np.trace(V))
    assert abs(dtr - expected) < 50 * h ** 2
    assert dtr >= h * (2 * np.trace(N @ P0) + 6 * np.linalg.eigvalsh(V)[0]) - 1e-9


def test_flow_P_loses_positivity():
    P = RiccatiState(np.diag([1e-12, 1, 1, 1, 1, 1]))
    V = -np.eye(6)
    with pytest.raises(LostPositivity):
        flow_P(P, np.zeros(3), V, 0.01)


def test_update_P_examples():
    P, K = update_P(RiccatiState(np.eye(6)), I3)
    np.testing.assert_allclose(K, np.vstack([0.5 * I3, Z3]), atol=1e-15)
    np.testing.assert_allclose(P.P, np.diag([0.5] * 3 + [1.0] * 3), atol=1e-15)
    P0 = rand_spd(9, 3)
    P, K = update_P(RiccatiState(P0), 1e12 * I3)
    assert np.max(np.abs(K)) < 1e-10
    np.testing.assert_allclose(P.P, P0, atol=1e-10)


def test_gain_rejects_singular_covariance():
    with pytest.raises(SingularInnovationCovariance):
        gain(np.zeros((6, 6)), np.zeros((3, 3)))


@given(st.integers(0, 10_000), st.sampled_from([6, 9]))
def test_update_properties(seed, dim):
    P0 = rand_spd(dim, seed)
    Q = rand_spd(3, seed + 7, 0.1)
    Pn, K = update_P(RiccatiState(P0), Q)
    C = c_matrix(dim)
    # independent gain
    np.testing.assert_allclose(K, P0 @ C.T @ np.linalg.inv(C @ P0 @ C.T + Q), atol=1e-12)
    # Joseph form
    IKC = np.eye(dim) - K @ C
    np.testing.assert_allclose(Pn.P, IKC @ P0 @ IKC.T + K @ Q @ K.T, atol=1e-9)
    # monotone and positive
    assert np.linalg.eigvalsh(P0 - Pn.P)[0] > -1e-12
    assert np.linalg.eigvalsh(Pn.P)[-1] <= np.linalg.eigvalsh(P0)[-1] + 1e-12
    assert np.linalg.eigvalsh(Pn.P)[0] > 0
    assert np.array_equal(Pn.P, Pn.P.T)


def test_adapt_noise_examples():
    lm = bench_landmarks()
    model = NoiseModel(1e-4, 1e-2, 1e-2)
    st0 = ObserverState(Rotation.random(random_state=1).as_matrix(), lm.center.copy(), np.zeros(3), np.zeros(3))
    V, Q = adapt_noise(st0, lm, model, 6)
    expected = np.zeros((6, 6))
    expected[3:, 3:] = 1e-2 * I3
    np.testing.assert_allclose(V, expected + 1e-9 * np.eye(6), atol=1e-18)
    np.testing.assert_allclose(Q, (1e-2 / len(lm)) * I3, atol=1e-17)


def test_adapt_noise_structure():
    lm = bench_landmarks()
    rng = np.random.default_rng(0)
    st0 = ObserverState(Rotation.random(random_state=2).as_matrix(), rng.standard_normal(3), rng.standard_normal(3),
                        np.zeros(3), g_hat=rng.standard_normal(3))
    model = NoiseModel(2e-4, 3e-2, [np.diag([1.0, 2, 3]) * (i + 1) for i in range(len(lm))], floor_V=0.0)
    V, Q = adapt_noise(st0, lm, model, 9)
    G = noise_input_matrix(st0.R_hat, st0.p_hat, st0.v_hat, lm.center, st0.g_hat)
    cov = np.diag([2e-4] * 3 + [3e-2] * 3)
    np.testing.assert_allclose(V, G @ cov @ G.T, atol=1e-15)
    Qb = sum(k * k * model.landmark_cov(i) for i, k in enumerate(lm.weights))
    np.testing.assert_allclose(Q, st0.R_hat @ Qb @ st0.R_hat.T, atol=1e-15)
    assert np.linalg.eigvalsh(V)[0] > -1e-15 and np.linalg.eigvalsh(Q)[0] > 0
    # a subset with explicit ids picks the matching covariances
    idx = np.array([4, 9, 17])
    _, Qs = adapt_noise(st0, lm.subset(idx), model, 9, indices=idx)
    Qsb = sum(k * k * model.landmark_cov(i) for i, k in zip(idx, lm.subset(idx).weights))
    np.testing.assert_allclose(Qs, st0.R_hat @ Qsb @ st0.R_hat.T, atol=1e-15)


def test_similarity_along_true_attitude():
    # Phi(t, s) = T(t)^T exp(A0 (t - s)) T(s) with T = blkdiag(R, R) and A0 the constant nilpotent matrix
    rng = np.random.default_rng(0)
    A0 = a_matrix(np.zeros(3), 6)
    dt = 0.005
    for _ in range(10):
        ks, kt = sorted(rng.integers(0, 4000, 2))
        F = np.eye(6)
        for _ in range(ks, kt):
            F = transition_matrix(EIGHT_OMEGA, dt, 6) @ F
        T = lambda k: np.kron(np.eye(2), eight_shape_truth(k * dt).R)
        np.testing.assert_allclose(F, T(kt).T @ expm(A0 * (kt - ks) * dt) @ T(ks), atol=1e-6)


def _logs(n_steps, every, omega, dim, V=None, Q=None):
    times = np.arange(n_steps + 1) * 0.005
    om = np.tile(omega, (n_steps + 1, 1))
    ev = list(range(0, n_steps + 1, every))
    Ql = [I3 if Q is None else Q] * len(ev)
    Vl = [np.eye(dim) if V is None else V] * (n_steps + 1)
    return times, om, ev, Ql, Vl


def test_gramian_window_too_short():
    times, om, ev, Ql, Vl = _logs(20, 10, np.zeros(3), 6)
    with pytest.raises(WindowTooShort):
        gramian_diagnostics(times, om, ev, Ql, Vl, gamma=2, dim=6)


def test_gramian_mu_phi_exact_for_zero_rate():
    times, om, ev, Ql, Vl = _logs(400, 10, np.zeros(3), 6)
    rep = gramian_diagnostics(times, om, ev, Ql, Vl, gamma=2, dim=6)
    tau = 0.05
    # smallest eigenvalue of [[1, tau], [0, 1]]^T [[1, tau], [0, 1]]; below one since the determinant is one
    lam = (2 + tau ** 2 - tau * math.sqrt(tau ** 2 + 4)) / 2
    assert abs(rep.mu_phi - lam) < 1e-12
    assert rep.windows == len(ev) - 3
    assert 0 < rep.mu_v <= rep.mu_V < math.inf
    assert 0 < rep.mu_q <= rep.mu_Q < math.inf


def test_gramian_rank_needs_long_enough_window():
    times, om, ev, Ql, Vl = _logs(400, 10, np.array([0.1, -0.2, 0.3]), 9)
    short = gramian_diagnostics(times, om, ev, Ql, Vl, gamma=1, dim=9)
    assert short.mu_q < 1e-9 * short.mu_Q
    long = gramian_diagnostics(times, om, ev, Ql, Vl, gamma=default_window(9), dim=9)
    assert long.mu_q > 1e-6
    six = gramian_diagnostics(times, om, ev, Ql, Vl[:0] + [np.eye(6)] * len(Vl), gamma=1, dim=6)
    assert six.mu_q > 1e-6
    assert default_window(6) == 2


def test_gramian_scales_with_Q():
    times, om, ev, Ql, Vl = _logs(200, 10, np.zeros(3), 6)
    a = gramian_diagnostics(times, om, ev, Ql, Vl, dim=6)
    b = gramian_diagnostics(times, om, ev, [4 * q for q in Ql], Vl, dim=6)
    assert abs(b.mu_q - a.mu_q / 4) < 1e-12 * a.mu_q and abs(b.mu_Q - a.mu_Q / 4) < 1e-12 * a.mu_Q
    assert set(a.as_dict()) == {"gamma", "mu_phi", "mu_v", "mu_V", "mu_q", "mu_Q", "windows"}


def test_noise_model_accepts_scalars_and_lists():
    m = NoiseModel(1e-4, 1e-2, 1e-2)
    np.testing.assert_array_equal(m.cov_omega, 1e-4 * I3)
    np.testing.assert_array_equal(m.landmark_cov(7), 1e-2 * I3)
    with pytest.raises(ValueError):
        NoiseModel(floor_V=-1.0)
