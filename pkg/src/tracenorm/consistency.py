"""Rank-consistency diagnostics.

For a low-rank truth ``W = U diag(s) V^T`` and population second moment
``S``, the matrix

    vec(Lambda) = (K^T S^-1 K)^-1 K^T S^-1 vec(U V^T),   K = V_perp kron U_perp,

decides whether the trace-norm estimator recovers the rank: it does when
``||Lambda||_2 < 1`` and cannot when ``||Lambda||_2 > 1``. The same matrix
governs the first-order correction ``Delta`` minimising

    1/2 vec(D)^T S vec(D) + tr(U^T D V) + ||U_perp^T D V_perp||_*,

whose compressed block ``U_perp^T Delta V_perp`` vanishes iff ``||Lambda||_2 <= 1``.

``Lambda`` depends on the choice of complement bases; only its spectral norm
does not. Reports store it in the deterministic basis returned by
:func:`orthogonal_complement`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import linalg

from .errors import InvalidInput
from .problem import DesignEmbedding, EmpiricalMoments
from .solver import SolverConfig, smoothed_solve
from .spectral import _fix_signs, spectral_norm, unvec, vec

_ORTHO_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class GroundTruthModel:
    """Low-rank truth ``U diag(s) V^T`` with its population second moment.

    ``sigma_xx``/``sigma_yy`` are kept when ``sigma_mm = sigma_yy kron sigma_xx``.
    """

    U: np.ndarray
    s: np.ndarray
    V: np.ndarray
    sigma_mm: np.ndarray
    sigma_noise: float = 1.0
    sigma_xx: np.ndarray | None = None
    sigma_yy: np.ndarray | None = None

    def __post_init__(self):
        U, V, s = self.U, self.V, np.asarray(self.s)
        if U.ndim != 2 or V.ndim != 2 or U.shape[1] != V.shape[1] or s.shape != (U.shape[1],):
            raise InvalidInput("U, s, V have inconsistent shapes")
        p, r = U.shape
        q = V.shape[0]
        if not 0 < r < min(p, q):
            raise InvalidInput(f"true rank must satisfy 0 < r < min(p, q), got r={r}")
        if np.any(s <= 0):
            raise InvalidInput("singular values must be positive")
        for name, B in (("U", U), ("V", V)):
            if np.linalg.norm(B.T @ B - np.eye(r)) > _ORTHO_TOL * 100:
                raise InvalidInput(f"{name} does not have orthonormal columns")
        if self.sigma_mm.shape != (p * q, p * q):
            raise InvalidInput("sigma_mm has the wrong shape")

    @property
    def p(self) -> int:
        return self.U.shape[0]

    @property
    def q(self) -> int:
        return self.V.shape[0]

    @property
    def r(self) -> int:
        return self.U.shape[1]

    @property
    def W(self) -> np.ndarray:
        return (self.U * self.s) @ self.V.T

    @property
    def factored(self) -> bool:
        return self.sigma_xx is not None and self.sigma_yy is not None

    def population_moments(self) -> EmpiricalMoments:
        """Population ``(sigma_mm, Q = sigma_mm vec(W))`` as a moment pair."""
        return EmpiricalMoments.from_arrays(
            self.sigma_mm, unvec(self.sigma_mm @ vec(self.W), self.p, self.q)
        )


class LambdaSystem(NamedTuple):
    """Solution of the constrained first-order problem.

    ``residual`` is the 2-norm residual of the saddle system; the multiplier of
    the constraint in that system equals ``-Lambda``.
    """

    Lambda: np.ndarray
    Delta: np.ndarray
    residual: float


@dataclass(frozen=True, eq=False)
class ConsistencyReport:
    Lambda: np.ndarray
    lambda_norm: float
    weak_ok: bool
    strict_ok: bool
    Delta: np.ndarray
    margin: float = 1e-8
    boundary: bool = field(default=False)

    def to_dict(self) -> dict:
        return {
            "Lambda": np.asarray(self.Lambda).tolist(),
            "lambda_norm": self.lambda_norm,
            "log10_lambda_norm": float(np.log10(self.lambda_norm)) if self.lambda_norm > 0 else None,
            "weak_ok": self.weak_ok,
            "strict_ok": self.strict_ok,
            "boundary": self.boundary,
            "margin": self.margin,
            "Delta": np.asarray(self.Delta).tolist(),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


# ---------------------------------------------------------------------------


def orthogonal_complement(U) -> np.ndarray:
    """Orthonormal basis of the orthogonal complement of ``range(U)``.

    Deterministic: columns follow the sign convention of the SVD helpers.
    """
    U = np.asarray(U, dtype=float)
    if U.ndim != 2:
        raise InvalidInput("U must be a matrix")
    p, r = U.shape
    if r == 0:
        return np.eye(p)
    if np.linalg.norm(U.T @ U - np.eye(r)) > _ORTHO_TOL * max(1, r):
        raise InvalidInput("U does not have orthonormal columns")
    full, _, _ = np.linalg.svd(U, full_matrices=True)
    C = full[:, r:]
    # re-orthogonalise against U so that the residual is at machine precision
    C = C - U @ (U.T @ C)
    C, _ = np.linalg.qr(C)
    C, _ = _fix_signs(C, None, 0)
    return C


def _check_invertible(S, name="sigma_mm"):
    S = np.asarray(S, dtype=float)
    ev = np.linalg.eigvalsh(0.5 * (S + S.T))
    if ev[0] <= 1e-12 * max(abs(ev[-1]), np.finfo(float).tiny):
        raise InvalidInput(f"{name} is singular or not positive definite")
    return S


def _complements(model: GroundTruthModel):
    return orthogonal_complement(model.U), orthogonal_complement(model.V)


def lambda_matrix(model: GroundTruthModel, U_perp=None, V_perp=None) -> LambdaSystem:
    """Solve the saddle system for ``(Delta, Lambda)`` with a symmetric solver.

    ``[[S, K], [K^T, 0]] [vec(Delta); -vec(Lambda)] = [-vec(U V^T); 0]``.
    """
    S = _check_invertible(model.sigma_mm)
    if U_perp is None or V_perp is None:
        U_perp, V_perp = _complements(model)
    p, q = model.p, model.q
    K = np.kron(V_perp, U_perp)
    k = K.shape[1]
    pq = p * q
    A = np.zeros((pq + k, pq + k))
    A[:pq, :pq] = S
    A[:pq, pq:] = K
    A[pq:, :pq] = K.T
    rhs = np.concatenate([-vec(model.U @ model.V.T), np.zeros(k)])
    try:
        sol = linalg.solve(A, rhs, assume_a="sym")
    except linalg.LinAlgError as exc:
        raise InvalidInput(f"saddle system is singular: {exc}") from exc
    residual = float(np.linalg.norm(A @ sol - rhs))
    Lam = -unvec(sol[pq:], p - model.r, q - model.r)
    Delta = unvec(sol[:pq], p, q)
    return LambdaSystem(Lambda=Lam, Delta=Delta, residual=residual)


def lambda_matrix_explicit(model: GroundTruthModel, U_perp=None, V_perp=None) -> np.ndarray:
    """``Lambda`` from the explicit normal-equation formula (uses ``S^-1``)."""
    S = _check_invertible(model.sigma_mm)
    if U_perp is None or V_perp is None:
        U_perp, V_perp = _complements(model)
    K = np.kron(V_perp, U_perp)
    SiK = np.linalg.solve(S, K)
    rhs = SiK.T @ vec(model.U @ model.V.T)
    lam = np.linalg.solve(K.T @ SiK, rhs)
    return unvec(lam, model.p - model.r, model.q - model.r)


def _check_pd(S, name):
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise InvalidInput(f"{name} must be square")
    if not np.allclose(S, S.T, rtol=0, atol=1e-12 * max(1.0, np.abs(S).max())):
        raise InvalidInput(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise InvalidInput(f"{name} must be positive definite") from exc
    return S


def lambda_matrix_factored(sigma_xx, sigma_yy, U, V, U_perp, V_perp, *, return_both=False):
    """``Lambda`` for a Kronecker second moment ``sigma_yy kron sigma_xx``.

    Evaluates both the inverse-covariance form and the partitioned form and
    checks that they agree; ``return_both`` returns the pair.
    """
    Sx = _check_pd(sigma_xx, "sigma_xx")
    Sy = _check_pd(sigma_yy, "sigma_yy")
    # inverse-covariance form
    XiUp = linalg.cho_solve(linalg.cho_factor(Sx), U_perp)
    YiVp = linalg.cho_solve(linalg.cho_factor(Sy), V_perp)
    left = np.linalg.solve(U_perp.T @ XiUp, XiUp.T @ U)
    right = np.linalg.solve(V_perp.T @ YiVp, YiVp.T @ V).T
    L1 = left @ right
    # partitioned form
    L2 = (U_perp.T @ Sx @ U) @ np.linalg.solve(U.T @ Sx @ U, np.eye(U.shape[1]))
    L2 = L2 @ np.linalg.solve(V.T @ Sy @ V, V.T @ Sy @ V_perp)
    scale = max(1.0, float(np.abs(L1).max()))
    if np.abs(L1 - L2).max() > 1e-8 * scale:
        raise ArithmeticError("factored Lambda forms disagree; inputs badly conditioned")
    return (L1, L2) if return_both else L1


def lambda_matrix_design(embedding: DesignEmbedding, sigma_reduced, U, V, U_perp, V_perp) -> np.ndarray:
    """``Lambda`` when ``vec(M) = H x`` and only ``H^T S H`` is invertible.

    The leading factor uses the Moore-Penrose pseudo-inverse.
    """
    H = embedding.H
    Sr = np.asarray(sigma_reduced, dtype=float)
    if Sr.shape != (H.shape[1], H.shape[1]):
        raise InvalidInput("sigma_reduced does not match the embedding")
    _check_invertible(Sr, "sigma_reduced")
    if U.shape[0] != embedding.p or V.shape[0] != embedding.q:
        raise InvalidInput("singular vectors do not match the embedding dimensions")
    K = np.kron(V_perp, U_perp)
    HK = H.T @ K
    G = HK.T @ np.linalg.solve(Sr, H.T)
    lead = np.linalg.pinv(G @ K, rcond=1e-10)
    lam = lead @ (G @ vec(U @ V.T))
    return unvec(lam, U_perp.shape[1], V_perp.shape[1])


def group_lasso_lambda_norm(sigma_xx, group_sizes, w_truth, active_groups) -> float:
    """``max_{i not in J} ||S_{x_i x_J} S_{x_J x_J}^-1 eta_J||`` for the group Lasso.

    ``eta_J`` stacks the normalised loadings ``w_j / ||w_j||`` of the active
    groups.
    """
    S = np.asarray(sigma_xx, dtype=float)
    sizes = [int(d) for d in group_sizes]
    w = np.asarray(w_truth, dtype=float)
    if S.shape != (sum(sizes), sum(sizes)) or w.shape != (sum(sizes),):
        raise InvalidInput("sigma_xx / w_truth do not match the group sizes")
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    blocks = [np.arange(offsets[j], offsets[j + 1]) for j in range(len(sizes))]
    J = sorted(set(int(j) for j in active_groups))
    if not J:
        raise InvalidInput("active set is empty")
    for j in range(len(sizes)):
        nz = np.linalg.norm(w[blocks[j]]) > 0
        if (j in J) != nz:
            raise InvalidInput(f"group {j}: w_truth support does not match the active set")
    idx_J = np.concatenate([blocks[j] for j in J])
    eta = np.concatenate([w[blocks[j]] / np.linalg.norm(w[blocks[j]]) for j in J])
    _check_invertible(S[np.ix_(idx_J, idx_J)], "sigma_xx[J, J]")
    x = np.linalg.solve(S[np.ix_(idx_J, idx_J)], eta)
    inactive = [j for j in range(len(sizes)) if j not in J]
    if not inactive:
        return 0.0
    return float(max(np.linalg.norm(S[blocks[i]][:, idx_J] @ x) for i in inactive))


# ---------------------------------------------------------------------------


def _reduced_problem(model: GroundTruthModel, U_perp, V_perp):
    """Eliminate every block of ``Delta`` except ``U_perp^T Delta V_perp``.

    Returns the Schur-complement quadratic, the linear term (which equals
    ``-Lambda``), and the map from the free block back to ``Delta``.
    """
    p, q, r = model.p, model.q, model.r
    P = np.hstack([model.U, U_perp])
    R = np.hstack([model.V, V_perp])
    T = np.kron(R, P)
    St = T.T @ model.sigma_mm @ T
    C = np.zeros((p, q))
    C[:r, :r] = np.eye(r)
    c = vec(C)
    b_mask = np.zeros((p, q), dtype=bool)
    b_mask[r:, r:] = True
    b = np.flatnonzero(vec(b_mask))
    a = np.flatnonzero(~vec(b_mask))
    Saa = St[np.ix_(a, a)]
    Sab = St[np.ix_(a, b)]
    Sbb = St[np.ix_(b, b)]
    cf = linalg.cho_factor(Saa)
    schur = Sbb - Sab.T @ linalg.cho_solve(cf, Sab)
    schur = 0.5 * (schur + schur.T)
    lin = Sab.T @ linalg.cho_solve(cf, c[a])

    def lift(gamma_b):
        gamma = np.zeros(p * q)
        gamma[b] = gamma_b
        gamma[a] = -linalg.cho_solve(cf, c[a] + Sab @ gamma_b)
        return unvec(T @ gamma, p, q)

    return schur, unvec(lin, p - r, q - r), lift


def limiting_delta(model: GroundTruthModel, method: str = "auto",
                   config: SolverConfig | None = None) -> np.ndarray:
    """Minimiser of the first-order correction problem.

    ``method='closed_form'`` uses the constrained solution (valid when
    ``||Lambda||_2 <= 1``), ``'numerical'`` minimises the reduced trace-norm
    problem with the Newton solver, and ``'auto'`` picks by ``||Lambda||_2``.
    """
    if method not in ("auto", "closed_form", "numerical"):
        raise InvalidInput(f"unknown method {method!r}")
    U_perp, V_perp = _complements(model)
    if method != "numerical":
        sysm = lambda_matrix(model, U_perp, V_perp)
        if method == "closed_form" or spectral_norm(sysm.Lambda) <= 1.0:
            return sysm.Delta
    else:
        _check_invertible(model.sigma_mm)
    schur, Q_red, lift = _reduced_problem(model, U_perp, V_perp)
    moments = EmpiricalMoments.from_arrays(schur, Q_red)
    res = smoothed_solve(moments, 1.0, config or SolverConfig())
    return lift(vec(res.W))


def check_conditions(model: GroundTruthModel, margin: float = 1e-8) -> ConsistencyReport:
    """Evaluate the weak (``<= 1``) and strict (``< 1``) conditions on ``||Lambda||_2``."""
    if margin < 0:
        raise InvalidInput("margin must be nonnegative")
    U_perp, V_perp = _complements(model)
    sysm = lambda_matrix(model, U_perp, V_perp)
    norm = spectral_norm(sysm.Lambda)
    weak = norm <= 1.0 + margin
    strict = norm < 1.0 - margin
    Delta = sysm.Delta if norm <= 1.0 else limiting_delta(model, "numerical")
    return ConsistencyReport(
        Lambda=sysm.Lambda, lambda_norm=norm, weak_ok=bool(weak), strict_ok=bool(strict),
        Delta=Delta, margin=margin, boundary=bool(weak and not strict),
    )
