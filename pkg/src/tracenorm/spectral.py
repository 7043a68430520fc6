"""Dense spectral primitives.

SVD wrappers with a deterministic sign convention, trace/spectral norms, the
entropy barrier ``b`` and its smooth conjugate ``b*``, the smoothed trace norm,
first and second derivatives of spectral functions, and the local
rank-increase certificate.

Matrices are vectorised column-major throughout (``vec`` stacks columns), so
``vec(u v^T) = v kron u``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import xlogy

from .errors import InvalidInput

DEFAULT_TAU_RANK = 1e-6
LOG2 = float(np.log(2.0))

# relative closeness under which a divided difference collapses to the derivative
_COALESCE_TOL = 1e-12


def vec(M: np.ndarray) -> np.ndarray:
    return np.asarray(M).reshape(-1, order="F")


def unvec(v: np.ndarray, p: int, q: int) -> np.ndarray:
    return np.asarray(v).reshape((p, q), order="F")


def as_finite_matrix(W, name: str = "W") -> np.ndarray:
    W = np.asarray(W, dtype=float)
    if W.ndim != 2:
        raise InvalidInput(f"{name} must be a 2-D matrix, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise InvalidInput(f"{name} has non-finite entries")
    return W


@dataclass(frozen=True)
class SVDTriple:
    """Economy SVD ``W = U diag(s) V^T`` with ``k = min(p, q)`` columns."""

    U: np.ndarray
    s: np.ndarray
    V: np.ndarray
    numerical_rank: int

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.s) @ self.V.T

    def truncated(self, r: int | None = None):
        """Leading ``r`` singular triplets (defaults to the numerical rank)."""
        r = self.numerical_rank if r is None else r
        return self.U[:, :r], self.s[:r], self.V[:, :r]


def numerical_rank(s: np.ndarray, tau_rank: float = DEFAULT_TAU_RANK) -> int:
    """Count singular values above ``tau_rank * s_1``."""
    s = np.asarray(s)
    if s.size == 0 or s[0] <= 0:
        return 0
    return int(np.sum(s > tau_rank * s[0]))


def _fix_signs(U: np.ndarray, V: np.ndarray | None, k: int):
    # largest-magnitude entry of each u_i is made positive; v_i follows
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    U = U * signs
    if V is not None:
        V = V.copy()
        V[:, :k] *= signs[:k]
    return U, V


def full_svd(W, tau_rank: float = DEFAULT_TAU_RANK) -> SVDTriple:
    """Economy SVD with deterministic signs.

    Raises InvalidInput on non-finite entries.
    """
    W = as_finite_matrix(W)
    U, s, Vt = np.linalg.svd(W, full_matrices=False)
    k = s.size
    U, V = _fix_signs(U, Vt.T, k)
    return SVDTriple(U=U, s=s, V=V, numerical_rank=numerical_rank(s, tau_rank))


def orthogonal_svd(W):
    """Full SVD: square orthogonal ``U`` (p x p), ``V`` (q x q) and the
    ``min(p, q)`` singular values, signs normalised as in :func:`full_svd`."""
    W = as_finite_matrix(W)
    U, s, Vt = np.linalg.svd(W, full_matrices=True)
    k = s.size
    U, V = _fix_signs(U, Vt.T, k)
    # columns of V beyond k have no partner in U
    if V.shape[1] > k:
        tail, _ = _fix_signs(V[:, k:], None, 0)
        V[:, k:] = tail
    return U, s, V


def trace_norm(W) -> float:
    W = as_finite_matrix(W)
    return float(np.sum(np.linalg.svd(W, compute_uv=False)))


def spectral_norm(W) -> float:
    W = as_finite_matrix(W)
    if W.size == 0:
        return 0.0
    return float(np.linalg.svd(W, compute_uv=False)[0])


def dual_norm_check(W, V) -> float:
    """``tr(W^T V) - ||W||_* ||V||_2``; never positive beyond rounding."""
    W = as_finite_matrix(W)
    V = as_finite_matrix(V, "V")
    if W.shape != V.shape:
        raise InvalidInput(f"shape mismatch {W.shape} vs {V.shape}")
    return float(np.sum(W * V) - trace_norm(W) * spectral_norm(V))


# ---------------------------------------------------------------------------
# barrier pair


def barrier_primal(v):
    """``b(v) = (1+v)log(1+v) + (1-v)log(1-v)`` on [-1, 1], ``+inf`` outside."""
    v = np.asarray(v, dtype=float)
    # singular values of a matrix with unit spectral norm can exceed one by a
    # few ulps; treat those as on the boundary
    v = np.where(np.abs(np.abs(v) - 1.0) <= 4 * np.finfo(float).eps, np.sign(v), v)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = xlogy(1.0 + v, 1.0 + v) + xlogy(1.0 - v, 1.0 - v)
    out = np.where(np.abs(v) > 1.0, np.inf, out)
    return out[()] if out.ndim == 0 else out


def _check_eps(eps):
    if not np.isfinite(eps) or eps <= 0:
        raise InvalidInput(f"smoothing eps must be > 0, got {eps}")


def barrier_dual(v, eps: float):
    """Smooth conjugate ``b*(v) = 2 eps log cosh(v / (2 eps))``.

    Evaluated as ``|v| + 2 eps log1p(exp(-|v|/eps)) - 2 eps log 2`` so that
    ``|v|/eps`` up to ~1e300 does not overflow.
    """
    _check_eps(eps)
    a = np.abs(np.asarray(v, dtype=float))
    with np.errstate(over="ignore"):
        out = a + 2.0 * eps * np.log1p(np.exp(-a / eps)) - 2.0 * eps * LOG2
    return out[()] if out.ndim == 0 else out


def barrier_dual_derivative(v, eps: float):
    """``(b*)'(v) = tanh(v / (2 eps))``."""
    _check_eps(eps)
    return np.tanh(np.asarray(v, dtype=float) / (2.0 * eps))


def _log_sech(x):
    x = np.abs(x)
    return -x - np.log1p(np.exp(-2.0 * x)) + LOG2


def _log_sinhc(d):
    # log(sinh(d)/d) for d >= 0 without overflow
    d = np.abs(d)
    small = d < 1e-3
    safe = np.where(small, 1.0, d)
    big = safe + np.log1p(-np.exp(-2.0 * safe)) - LOG2 - np.log(safe)
    return np.where(small, np.log1p(d * d / 6.0), big)


def barrier_dual_second(v, eps: float):
    """``(b*)''(v) = sech^2(v / (2 eps)) / (2 eps)``."""
    _check_eps(eps)
    k = 1.0 / (2.0 * eps)
    with np.errstate(over="ignore"):
        return k * np.exp(2.0 * _log_sech(k * np.asarray(v, dtype=float)))


def smoothed_trace_norm(W, eps: float) -> float:
    """``F_eps(W) = sum_i b*(s_i(W))``; within ``2 eps log2 min(p,q)`` of ``||W||_*``."""
    _check_eps(eps)
    W = as_finite_matrix(W)
    s = np.linalg.svd(W, compute_uv=False)
    return float(np.sum(barrier_dual(s, eps)))


# ---------------------------------------------------------------------------
# derivatives of spectral functions B(W) = sum_i b(s_i(W))

ScalarFn = Callable[[np.ndarray], np.ndarray]


def spectral_gradient(W, g: ScalarFn) -> np.ndarray:
    """Gradient ``U diag(g(s)) V^T`` of ``B(W) = sum b(s_i)`` with ``g = b'``."""
    t = full_svd(W)
    return (t.U * g(t.s)) @ t.V.T


def generic_divided_differences(g: ScalarFn, g_prime: ScalarFn):
    """Return ``(minus, plus)`` kernels for a derivative ``g`` of an even ``b``.

    ``minus(a, b) = (g(a) - g(b)) / (a - b)`` and
    ``plus(a, b) = (g(a) + g(b)) / (a + b)``, both replaced by the second
    derivative where the denominator is numerically zero.
    """

    def minus(a, b):
        a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
        d = a - b
        close = np.abs(d) < _COALESCE_TOL * np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
        safe = np.where(close, 1.0, d)
        return np.where(close, g_prime(a), (g(a) - g(b)) / safe)

    def plus(a, b):
        a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
        t = a + b
        close = np.abs(t) < _COALESCE_TOL * np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
        safe = np.where(close, 1.0, t)
        return np.where(close, g_prime(0.5 * t), (g(a) + g(b)) / safe)

    return minus, plus


def barrier_divided_differences(eps: float):
    """Cancellation-free divided differences of ``tanh(s / (2 eps))``.

    Uses ``tanh x -/+ tanh y = sinh(x -/+ y) / (cosh x cosh y)``.
    """
    _check_eps(eps)
    k = 1.0 / (2.0 * eps)

    def _kernel(a, b, sign):
        x, y = k * np.asarray(a, float), k * np.asarray(b, float)
        d = x + sign * y
        return k * np.exp(_log_sinhc(d) + _log_sech(x) + _log_sech(y))

    return (lambda a, b: _kernel(a, b, -1.0)), (lambda a, b: _kernel(a, b, 1.0))


def hessian_in_svd_basis(s: np.ndarray, p: int, q: int, minus, plus) -> np.ndarray:
    """Hessian of ``B`` in the coordinates ``vec(U^T Delta V)`` (pq x pq).

    ``U`` and ``V`` are the square orthogonal factors. Diagonal and unpaired
    entries carry ``minus(s_i, s_j)`` with zero-completed singular values; each
    pair (i, j), (j, i) with ``i != j <= min(p, q)`` mixes ``minus`` on the
    symmetric part and ``plus`` on the antisymmetric part.
    """
    m = min(p, q)
    sp = np.zeros(p)
    sq = np.zeros(q)
    sp[:m] = s[:m]
    sq[:m] = s[:m]
    A = np.asarray(minus(sp[:, None], sq[None, :]), dtype=float).copy()
    Dm = A[:m, :m].copy()
    Dp = np.asarray(plus(s[:m, None], s[None, :m]), dtype=float)
    off = ~np.eye(m, dtype=bool)
    A[:m, :m] = np.where(off, 0.5 * (Dm + Dp), Dm)
    C = np.diag(vec(A))
    if m > 1:
        ii, jj = np.nonzero(off)
        B = 0.5 * (Dm - Dp)
        C[jj * p + ii, ii * p + jj] = B[ii, jj]
    return C


def spectral_hessian_matrix(W, g: ScalarFn, g_prime: ScalarFn, kernels=None) -> np.ndarray:
    """Hessian of ``B`` as a (pq x pq) matrix acting on ``vec(Delta)``."""
    W = as_finite_matrix(W)
    p, q = W.shape
    U, s, V = orthogonal_svd(W)
    minus, plus = kernels if kernels is not None else generic_divided_differences(g, g_prime)
    C = hessian_in_svd_basis(s, p, q, minus, plus)
    T = np.kron(V, U)
    return T @ C @ T.T


def spectral_hessian_quadratic(W, Delta, g: ScalarFn, g_prime: ScalarFn, kernels=None) -> float:
    """Second-order form ``vec(Delta)^T [Hess B(W)] vec(Delta)``.

    ``g = b'`` and ``g_prime = b''``. For ``b(s) = s^2/2`` this is
    ``||Delta||_F^2``; it is nonnegative whenever ``b`` is convex.
    """
    W = as_finite_matrix(W)
    Delta = as_finite_matrix(Delta, "Delta")
    if W.shape != Delta.shape:
        raise InvalidInput(f"shape mismatch {W.shape} vs {Delta.shape}")
    p, q = W.shape
    U, s, V = orthogonal_svd(W)
    minus, plus = kernels if kernels is not None else generic_divided_differences(g, g_prime)
    C = hessian_in_svd_basis(s, p, q, minus, plus)
    x = vec(U.T @ Delta @ V)
    return float(x @ C @ x)


# ---------------------------------------------------------------------------


def rank_increase_certificate(W, Delta, tau_rank: float = DEFAULT_TAU_RANK) -> bool:
    """Sufficient test for ``rank(W + Delta) > rank(W)``.

    True iff ``(4 / s_r) ||Delta||_2^2 < ||(I - UU^T) Delta (I - VV^T)||_2``.
    A False answer says nothing about rank preservation.
    """
    W = as_finite_matrix(W)
    Delta = as_finite_matrix(Delta, "Delta")
    if W.shape != Delta.shape:
        raise InvalidInput(f"shape mismatch {W.shape} vs {Delta.shape}")
    t = full_svd(W, tau_rank)
    r = t.numerical_rank
    if r >= min(W.shape):
        raise InvalidInput("certificate undefined for full-rank W")
    if r == 0:
        raise InvalidInput("certificate undefined for W = 0")
    U, s, V = t.truncated(r)
    proj = Delta - U @ (U.T @ Delta)
    proj = proj - (proj @ V) @ V.T
    lhs = 4.0 / s[-1] * spectral_norm(Delta) ** 2
    return bool(lhs < spectral_norm(proj))
