import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tracenorm.errors import InvalidInput
from tracenorm.spectral import (
    LOG2,
    barrier_divided_differences,
    barrier_dual,
    barrier_dual_derivative,
    barrier_dual_second,
    barrier_primal,
    dual_norm_check,
    full_svd,
    numerical_rank,
    orthogonal_svd,
    rank_increase_certificate,
    smoothed_trace_norm,
    spectral_gradient,
    spectral_hessian_matrix,
    spectral_hessian_quadratic,
    spectral_norm,
    trace_norm,
    unvec,
    vec,
)

matrices = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
                  elements=st.floats(-10, 10, allow_nan=False))


def test_vec_is_column_major():
    rng = np.random.default_rng(0)
    u, v = rng.normal(size=3), rng.normal(size=2)
    assert np.allclose(vec(np.outer(u, v)), np.kron(v, u))
    M = rng.normal(size=(3, 2))
    assert np.array_equal(unvec(vec(M), 3, 2), M)


def test_full_svd_identity_and_zero():
    t = full_svd(np.eye(3))
    assert np.allclose(t.s, 1) and t.numerical_rank == 3
    z = full_svd(np.zeros((2, 4)))
    assert z.numerical_rank == 0 and np.all(z.s == 0)


def test_full_svd_rejects_nonfinite():
    with pytest.raises(InvalidInput):
        full_svd(np.array([[1.0, np.nan]]))


@given(matrices)
@settings(max_examples=60, deadline=None)
def test_svd_reconstructs_and_signs_are_deterministic(W):
    t = full_svd(W)
    assert np.allclose(t.reconstruct(), W, atol=1e-9 * max(1, np.abs(W).max()))
    assert np.allclose(t.U.T @ t.U, np.eye(t.U.shape[1]), atol=1e-10)
    # largest-magnitude entry of each left vector is positive
    idx = np.argmax(np.abs(t.U), axis=0)
    assert np.all(t.U[idx, np.arange(t.U.shape[1])] >= 0)
    t2 = full_svd(W.copy())
    assert np.array_equal(t.U, t2.U) and np.array_equal(t.V, t2.V)


def test_orthogonal_svd_is_square():
    rng = np.random.default_rng(1)
    W = rng.normal(size=(3, 5))
    U, s, V = orthogonal_svd(W)
    assert U.shape == (3, 3) and V.shape == (5, 5)
    assert np.allclose(V.T @ V, np.eye(5))
    S = np.zeros((3, 5))
    S[:3, :3] = np.diag(s)
    assert np.allclose(U @ S @ V.T, W)


def test_numerical_rank_threshold():
    assert numerical_rank(np.array([1.0, 1e-5, 1e-7])) == 2
    assert numerical_rank(np.array([1.0, 1e-5, 1e-7]), tau_rank=1e-4) == 1
    assert numerical_rank(np.array([])) == 0


@given(matrices)
@settings(max_examples=60, deadline=None)
def test_norms_match_eigen_oracle(W):
    ev = np.clip(np.linalg.eigvalsh(W.T @ W), 0, None)
    assert trace_norm(W) == pytest.approx(np.sum(np.sqrt(ev)), rel=1e-7, abs=1e-6)
    assert spectral_norm(W) == pytest.approx(np.sqrt(ev.max()), rel=1e-7, abs=1e-6)


@given(matrices, st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_trace_and_spectral_norm_are_dual(W, seed):
    V = np.random.default_rng(seed).normal(size=W.shape)
    assert dual_norm_check(W, V) <= 1e-9 * (1 + trace_norm(W) * spectral_norm(V))


def test_dual_norm_attained_by_polar_factor():
    W = np.random.default_rng(2).normal(size=(4, 3))
    t = full_svd(W)
    assert abs(dual_norm_check(W, t.U @ t.V.T)) < 1e-12


# ---------------------------------------------------------------------------
# barrier pair


def test_barrier_primal_values():
    assert barrier_primal(0.0) == 0.0
    assert barrier_primal(1.0) == pytest.approx(2 * LOG2)
    assert barrier_primal(-1.0) == pytest.approx(2 * LOG2)
    assert barrier_primal(1.5) == np.inf
    mp = (1 + mpmath.mpf("0.3")) * mpmath.log(1.3) + (0.7) * mpmath.log(mpmath.mpf("0.7"))
    assert barrier_primal(0.3) == pytest.approx(float(mp), rel=1e-14)


@pytest.mark.parametrize("eps", [1e-1, 1e-3, 1e-6])
def test_barrier_dual_matches_high_precision(eps):
    mpmath.mp.dps = 50
    for v in [0.0, 0.3 * eps, -2.0 * eps, 7.0 * eps, 40 * eps, 1.0, -3.0]:
        ref = 2 * mpmath.mpf(eps) * mpmath.log(mpmath.cosh(mpmath.mpf(v) / (2 * mpmath.mpf(eps))))
        assert barrier_dual(v, eps) == pytest.approx(float(ref), rel=1e-13, abs=1e-16 * eps)


def test_barrier_dual_does_not_overflow():
    assert barrier_dual(1e300, 1e-9) == pytest.approx(1e300)
    assert np.isfinite(barrier_dual_second(1e300, 1e-9))


def test_barrier_dual_asymptote():
    # b*(v) - |v| tends to -2 eps log 2, not to zero
    eps = 1e-3
    v = 20 * eps
    assert abs(barrier_dual(v, eps) - (v - 2 * eps * LOG2)) <= 1e-7 * eps


def test_barrier_dual_rejects_bad_eps():
    for eps in (0.0, -1.0, np.nan):
        with pytest.raises(InvalidInput):
            barrier_dual(1.0, eps)


def test_barrier_dual_is_conjugate_of_primal():
    # b*(v) = max_u (u v - eps b(u)); brute-force on a fine grid
    eps = 0.05
    u = np.linspace(-1, 1, 400001)
    for v in [-0.4, 0.0, 0.02, 0.3]:
        brute = np.max(u * v - eps * barrier_primal(u))
        assert barrier_dual(v, eps) == pytest.approx(brute, abs=1e-9)


@pytest.mark.parametrize("eps", [1e-1, 1e-3])
def test_barrier_derivatives_finite_difference(eps):
    for v in np.linspace(-5 * eps, 5 * eps, 11):
        h = 1e-6 * eps
        fd1 = (barrier_dual(v + h, eps) - barrier_dual(v - h, eps)) / (2 * h)
        fd2 = (barrier_dual_derivative(v + h, eps) - barrier_dual_derivative(v - h, eps)) / (2 * h)
        assert barrier_dual_derivative(v, eps) == pytest.approx(fd1, abs=1e-6)
        assert barrier_dual_second(v, eps) == pytest.approx(fd2, rel=1e-5)


@given(matrices, st.sampled_from([1e-1, 1e-3, 1e-6]))
@settings(max_examples=80, deadline=None)
def test_smoothing_bound(W, eps):
    m = min(W.shape)
    gap = smoothed_trace_norm(W, eps) - trace_norm(W)
    assert -2 * eps * LOG2 * m - 1e-9 <= gap <= 1e-9


# ---------------------------------------------------------------------------
# spectral derivatives


def test_quadratic_spectral_function():
    rng = np.random.default_rng(3)
    W = rng.normal(size=(4, 3))
    D = rng.normal(size=(4, 3))
    g = lambda s: s
    gp = lambda s: np.ones_like(s)
    assert np.allclose(spectral_gradient(W, g), W)
    assert spectral_hessian_quadratic(W, D, g, gp) == pytest.approx(np.sum(D**2))


def _fd_quadratic(f, W, D, h=1e-4):
    return (f(W + h * D) - 2 * f(W) + f(W - h * D)) / h**2


@pytest.mark.parametrize("shape", [(3, 3), (4, 2), (2, 5)])
def test_hessian_quadratic_finite_difference(shape):
    rng = np.random.default_rng(sum(shape))
    eps = 0.3
    g = lambda s: barrier_dual_derivative(s, eps)
    gp = lambda s: barrier_dual_second(s, eps)
    F = lambda X: smoothed_trace_norm(X, eps)
    for _ in range(5):
        W = rng.normal(size=shape)
        D = rng.normal(size=shape)
        fd = _fd_quadratic(F, W, D)
        an = spectral_hessian_quadratic(W, D, g, gp)
        assert an == pytest.approx(fd, rel=1e-4)
        an_k = spectral_hessian_quadratic(W, D, g, gp, kernels=barrier_divided_differences(eps))
        assert an_k == pytest.approx(an, rel=1e-9)


def test_hessian_quadratic_coalescing_singular_values():
    rng = np.random.default_rng(11)
    eps = 0.2
    g = lambda s: barrier_dual_derivative(s, eps)
    gp = lambda s: barrier_dual_second(s, eps)
    F = lambda X: smoothed_trace_norm(X, eps)
    Q1, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    Q2, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    S = np.zeros((4, 3))
    S[0, 0] = S[1, 1] = 0.7
    S[2, 2] = 0.7 * (1 + 1e-13)
    W = Q1 @ S @ Q2.T
    D = rng.normal(size=(4, 3))
    assert spectral_hessian_quadratic(W, D, g, gp) == pytest.approx(_fd_quadratic(F, W, D), rel=1e-4)


def test_hessian_matrix_is_jacobian_of_gradient():
    rng = np.random.default_rng(5)
    eps = 0.1
    g = lambda s: barrier_dual_derivative(s, eps)
    gp = lambda s: barrier_dual_second(s, eps)
    W = rng.normal(size=(3, 4))
    H = spectral_hessian_matrix(W, g, gp)
    h = 1e-6
    J = np.zeros_like(H)
    for k in range(W.size):
        E = unvec(np.eye(W.size)[k], 3, 4)
        J[:, k] = vec(spectral_gradient(W + h * E, g) - spectral_gradient(W - h * E, g)) / (2 * h)
    assert np.allclose(H, J, atol=1e-6 * np.abs(H).max())
    assert np.allclose(H, H.T)
    assert np.linalg.eigvalsh(H).min() > -1e-10


def test_hessian_psd_for_convex_barrier():
    rng = np.random.default_rng(8)
    g = lambda s: barrier_dual_derivative(s, 1e-2)
    gp = lambda s: barrier_dual_second(s, 1e-2)
    for _ in range(20):
        W, D = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
        assert spectral_hessian_quadratic(W, D, g, gp) >= 0


def test_stable_kernels_at_tiny_eps():
    minus, plus = barrier_divided_differences(1e-12)
    vals = np.concatenate([minus(np.array([1.0, 2e-12, 0.0]), np.array([0.5, 1e-12, 0.0])),
                           plus(np.array([1.0, 2e-12, 0.0]), np.array([0.5, 1e-12, 0.0]))])
    assert np.all(np.isfinite(vals)) and np.all(vals >= 0)


# ---------------------------------------------------------------------------


def _rank(M, tol=1e-9):
    s = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(s > tol * max(s[0], 1e-300)))


def test_rank_increase_certificate_sufficient():
    rng = np.random.default_rng(6)
    found = 0
    while found < 50:
        W = rng.normal(size=(4, 1)) @ rng.normal(size=(1, 4)) * 5
        D = 0.05 * rng.normal(size=(4, 4))
        if rank_increase_certificate(W, D):
            found += 1
            assert _rank(W + D) > 1


def test_rank_increase_certificate_rejects_degenerate():
    with pytest.raises(InvalidInput):
        rank_increase_certificate(np.eye(3), np.eye(3))
    with pytest.raises(InvalidInput):
        rank_increase_certificate(np.zeros((3, 3)), np.eye(3))
    with pytest.raises(InvalidInput):
        rank_increase_certificate(np.eye(3)[:, :2] @ np.eye(2)[:, :1], np.eye(3))


def test_rank_increase_certificate_negative_answer_is_uninformative():
    W = np.diag([1.0, 0.0, 0.0])
    D = np.diag([0.0, 1.0, 0.0])  # rank does increase, certificate too weak
    assert not rank_increase_certificate(W, D)
    assert _rank(W + D) == 2
