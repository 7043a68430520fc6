"""Adaptive trace-norm estimator.

A least-squares pilot ``W_LS = U_LS diag(s_LS) V_LS^T`` defines weights
``A = U_LS diag(s)^-gamma U_LS^T`` and ``B = V_LS diag(s)^-gamma V_LS^T``
(singular values completed and floored at ``n^-1/2``), and the estimator
minimises the least-squares loss plus ``lam ||A W B||_*``. The weighted
problem is solved exactly through the change of variables ``W~ = A W B``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidInput, NonConverged
from .problem import EmpiricalMoments
from .solver import (
    PathResult,
    SolveResult,
    SolverConfig,
    estimated_rank,
    regularization_path,
    smoothed_solve,
    solution_scale,
)
from .spectral import SVDTriple, full_svd, orthogonal_svd, unvec, vec


def least_squares_estimate(moments: EmpiricalMoments) -> np.ndarray:
    """Unregularised minimiser ``S^-1 vec(Q)`` reshaped to ``p x q``."""
    S = moments.sigma_mm
    ev = np.linalg.eigvalsh(S)
    if ev[0] <= 1e-12 * max(ev[-1], np.finfo(float).tiny):
        raise InvalidInput("second moment matrix is singular")
    return unvec(np.linalg.solve(S, moments.q_vec), moments.p, moments.q)


@dataclass(frozen=True, eq=False)
class AdaptiveWeights:
    A: np.ndarray
    B: np.ndarray
    gamma: float
    n: int
    A_inv: np.ndarray
    B_inv: np.ndarray

    @classmethod
    def identity(cls, p: int, q: int) -> "AdaptiveWeights":
        return cls(np.eye(p), np.eye(q), 0.0, 1, np.eye(p), np.eye(q))


def adaptive_weights(W_LS, gamma: float, n: int) -> AdaptiveWeights:
    """Weights from the full SVD of the pilot.

    Singular values are completed to lengths ``p`` and ``q`` with ``n^-1/2``;
    computed values below ``n^-1/2`` are floored there too, which bounds the
    condition numbers of ``A`` and ``B`` by ``(s_1 sqrt(n))^gamma``.
    """
    if not (0 < gamma <= 1):
        raise InvalidInput(f"gamma must lie in (0, 1], got {gamma}")
    if n < 1:
        raise InvalidInput("n must be at least 1")
    W = np.asarray(W_LS, dtype=float)
    p, q = W.shape
    U, s, V = orthogonal_svd(W)
    floor = n ** -0.5
    sp = np.full(p, floor)
    sq = np.full(q, floor)
    m = s.size
    sp[:m] = np.maximum(s, floor)
    sq[:m] = np.maximum(s, floor)

    def sym(Q, d):
        M = (Q * d) @ Q.T
        return 0.5 * (M + M.T)

    return AdaptiveWeights(
        A=sym(U, sp ** -gamma), B=sym(V, sq ** -gamma), gamma=float(gamma), n=int(n),
        A_inv=sym(U, sp ** gamma), B_inv=sym(V, sq ** gamma),
    )


def transformed_moments(moments: EmpiricalMoments, weights: AdaptiveWeights) -> EmpiricalMoments:
    """Moments of the problem in ``W~ = A W B``."""
    if weights.A.shape != (moments.p, moments.p) or weights.B.shape != (moments.q, moments.q):
        raise InvalidInput("weights do not match the problem dimensions")
    T = np.kron(weights.B_inv, weights.A_inv)
    S = T.T @ moments.sigma_mm @ T
    S = 0.5 * (S + S.T)
    Q = weights.A_inv @ moments.Q @ weights.B_inv
    return EmpiricalMoments(sigma_mm=S, Q=Q, n=moments.n, p=moments.p, q=moments.q)


def _map_back(res: SolveResult, weights: AdaptiveWeights, scale: float, tau_rank: float) -> SolveResult:
    W = weights.A_inv @ res.W @ weights.B_inv
    t = full_svd(W, tau_rank)
    rank = estimated_rank(t.s, scale, tau_rank)
    svd = SVDTriple(U=t.U, s=t.s, V=t.V, numerical_rank=rank)
    aux = dict(res.aux, W_tilde=res.W, rank_tilde=res.estimated_rank)
    return replace(res, W=W, svd=svd, estimated_rank=rank, aux=aux)


def adaptive_solve(moments: EmpiricalMoments, lam: float, weights: AdaptiveWeights,
                   config: SolverConfig | None = None, warm_start=None) -> SolveResult:
    """Minimise ``1/2 w^T S w - w^T q + lam ||A W B||_*``.

    The gap certificate refers to the transformed problem, whose objective
    coincides with the weighted one; rank and SVD are those of ``W``.
    """
    config = config or SolverConfig()
    tm = transformed_moments(moments, weights)
    ws = None if warm_start is None else weights.A @ np.asarray(warm_start, float) @ weights.B
    scale = solution_scale(moments)
    try:
        res = smoothed_solve(tm, lam, config, warm_start=ws)
    except NonConverged as exc:
        raise NonConverged(str(exc), _map_back(exc.result, weights, scale, config.tau_rank)) from None
    return _map_back(res, weights, scale, config.tau_rank)


def adaptive_path(moments: EmpiricalMoments, weights: AdaptiveWeights, lambdas=None,
                  config: SolverConfig | None = None, warm_start: bool = True, *,
                  grid_size: int = 50, eps_rel: float = 1e-4) -> PathResult:
    """Regularisation path of the adaptive estimator.

    Without an explicit grid, ``grid_size`` points span the analytic interval
    of the weighted problem.
    """
    config = config or SolverConfig()
    tm = transformed_moments(moments, weights)
    path = regularization_path(tm, grid_size, config=config, eps_rel=eps_rel, lambdas=lambdas,
                               warm_start=warm_start)
    scale = solution_scale(moments)
    path.results = [
        None if r is None else _map_back(r, weights, scale, config.tau_rank) for r in path.results
    ]
    return path
