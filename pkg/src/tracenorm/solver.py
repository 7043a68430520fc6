"""Newton solver for trace-norm regularised least squares.

Minimises ``1/2 w^T S w - w^T q + lam ||W||_*`` (``w = vec(W)``) by damped
Newton steps on the smoothed objective

    P_eps(W) = 1/2 w^T S w - w^T q + lam F_{eps/lam}(W),

driving ``eps`` down geometrically. For the dual candidate
``V = U tanh(lam s / 2 eps) V^T`` the smoothed duality gap equals
``1/2 g^T S^{-1} g`` with ``g`` the gradient of ``P_eps``; a gap below
``eps min(p, q)`` certifies the unsmoothed objective to within
``(1 + 2 log 2) eps min(p, q)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigh

from .errors import InfeasibleDual, InvalidInput, NonConverged
from .problem import EmpiricalMoments
from .spectral import (
    DEFAULT_TAU_RANK,
    LOG2,
    SVDTriple,
    _fix_signs,
    barrier_dual,
    barrier_divided_differences,
    barrier_primal,
    hessian_in_svd_basis,
    orthogonal_svd,
    trace_norm,
    unvec,
    vec,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    """Smoothing schedule and Newton settings.

    ``eps_init=None`` picks ``max(eps_target, 0.1 lam s_1(Q) / max(1, ||Q||_2))``.
    ``rank_resolution`` additionally caps the final smoothing at
    ``rank_resolution * tau_rank * lam * ||Q||_2 / ||S||_2``: smoothing lifts
    inactive singular values to about ``(2 eps / lam) artanh(rho)``, and the
    cap keeps them well below the rank threshold. ``None`` disables the cap.
    ``warm_skip`` is the number of schedule stages skipped on a warm start.
    """

    eps_init: float | None = None
    eps_target: float = 1e-9
    eps_factor: float = 0.5
    newton_tol: float = 1e-10
    max_newton_iters: int = 500
    ls_shrink: float = 0.5
    ls_armijo: float = 1e-4
    tau_rank: float = DEFAULT_TAU_RANK
    rank_resolution: float | None = 1e-2
    warm_skip: int = 2
    record_trace: bool = False

    def __post_init__(self):
        if not (self.eps_target > 0):
            raise InvalidInput("eps_target must be positive")
        if self.eps_init is not None and not (self.eps_init >= self.eps_target):
            raise InvalidInput("need 0 < eps_target <= eps_init")
        if not (0 < self.eps_factor < 1):
            raise InvalidInput("eps_factor must lie in (0, 1)")
        if not (0 < self.ls_shrink < 1) or not (0 < self.ls_armijo < 0.5):
            raise InvalidInput("bad line-search parameters")
        if self.max_newton_iters < 1 or self.newton_tol <= 0:
            raise InvalidInput("bad Newton settings")
        if self.rank_resolution is not None and self.rank_resolution <= 0:
            raise InvalidInput("rank_resolution must be positive")


@dataclass(frozen=True, eq=False)
class SolveResult:
    W: np.ndarray
    svd: SVDTriple
    estimated_rank: int
    duality_gap: float
    raw_gap_bound: float
    newton_iters: int
    eps_final: float
    lam: float
    converged: bool = True
    trace: list = field(default_factory=list, repr=False)
    aux: dict = field(default_factory=dict, repr=False)

    @property
    def singular_values(self) -> np.ndarray:
        return self.svd.s


class LambdaInterval(NamedTuple):
    lambda_min: float
    lambda_max: float

    @property
    def empty(self) -> bool:
        return not self.lambda_max > 0


# ---------------------------------------------------------------------------


def dual_candidate(W, eps: float) -> np.ndarray:
    """Maximiser ``U tanh(s / 2 eps) V^T`` of ``tr V^T W - eps B(V)`` over ``||V||_2 <= 1``."""
    if not (np.isfinite(eps) and eps > 0):
        raise InvalidInput(f"eps must be positive, got {eps}")
    W = np.asarray(W, dtype=float)
    U, s, Vt = np.linalg.svd(W, full_matrices=False)
    return (U * np.tanh(s / (2.0 * eps))) @ Vt


class _Quadratic:
    """Factored ``S`` (ridged if nearly singular) and ``q`` for one problem."""

    def __init__(self, moments: EmpiricalMoments):
        S = np.asarray(moments.sigma_mm, dtype=float)
        q = moments.q_vec.astype(float)
        pq = S.shape[0]
        tr = float(np.trace(S))
        if not tr > 0:
            if np.any(q):
                raise InfeasibleDual("second moment is zero but Q is not")
            raise InvalidInput("second moment matrix is zero")
        evals, evecs = np.linalg.eigh(S)
        top = max(evals[-1], 0.0)
        null = evals <= 1e-12 * top
        self.ridge = 0.0
        if np.any(null):
            N = evecs[:, null]
            leak = np.linalg.norm(N.T @ q)
            if leak > 1e-8 * max(np.linalg.norm(q), np.finfo(float).tiny):
                raise InfeasibleDual(
                    f"vec(Q) has a component of size {leak:.3g} outside the range of the second moment"
                )
            self.ridge = 1e-10 * tr / pq
            log.warning("second moment is numerically singular; adding ridge %.3g", self.ridge)
            S = S + self.ridge * np.eye(pq)
        self.S = S
        self.q = q
        self.norm_S = float(evals[-1] + self.ridge)
        try:
            self.chol = cho_factor(S)
        except LinAlgError as exc:  # pragma: no cover - guarded by the ridge
            raise InvalidInput("second moment is not positive semidefinite") from exc

    def solve(self, g):
        return cho_solve(self.chol, g)


class _Smoothed:
    """Value, gradient and Newton step of ``P_eps`` for fixed lam, eps."""

    def __init__(self, quad: _Quadratic, lam: float, p: int, q: int):
        self.quad, self.lam, self.p, self.q = quad, lam, p, q
        self.m = min(p, q)

    def value(self, W, eps):
        w = vec(W)
        s = np.linalg.svd(W, compute_uv=False)
        return float(0.5 * w @ self.quad.S @ w - w @ self.quad.q) + self.lam * float(
            np.sum(barrier_dual(s, eps / self.lam))
        )

    def state(self, W, eps):
        U, s, V = orthogonal_svd(W)
        m = self.m
        t = np.tanh(self.lam * s / (2.0 * eps))
        w = vec(W)
        g = self.quad.S @ w - self.quad.q + self.lam * vec((U[:, :m] * t) @ V[:, :m].T)
        return U, s, V, g

    def gap(self, g):
        return float(0.5 * g @ self.quad.solve(g))

    def newton_direction(self, U, s, V, g, eps):
        p, q, lam = self.p, self.q, self.lam
        minus, plus = barrier_divided_differences(eps / lam)
        C = hessian_in_svd_basis(s, p, q, minus, plus)
        T = np.kron(V, U)
        H = T.T @ self.quad.S @ T + lam * C
        gt = T.T @ g
        d = np.sqrt(np.maximum(np.diag(H), np.finfo(float).tiny))
        Hs = H / d[:, None] / d[None, :]
        try:
            x = cho_solve(cho_factor(Hs), gt / d)
        except LinAlgError:
            w, Q = eigh(Hs)
            w = np.maximum(w, 1e-14 * max(w[-1], 1.0))
            x = Q @ ((Q.T @ (gt / d)) / w)
        return -(T @ (x / d))


def _resolve_eps(moments: EmpiricalMoments, lam: float, config: SolverConfig, norm_S: float):
    Q = moments.Q
    qn = float(np.linalg.norm(Q, 2)) if Q.size else 0.0
    if config.eps_init is None:
        eps_init = max(config.eps_target, 0.1 * lam * qn / max(1.0, qn))
    else:
        eps_init = config.eps_init
    eps_final = config.eps_target
    if config.rank_resolution is not None and qn > 0:
        cap = config.rank_resolution * config.tau_rank * lam * qn / norm_S
        eps_final = min(eps_final, cap)
    return max(eps_init, eps_final), eps_final, qn


def _schedule(eps_start, eps_final, factor):
    out = []
    e = eps_start
    while e > eps_final * (1 + 1e-12):
        out.append(e)
        e *= factor
    out.append(eps_final)
    return out


def solution_scale(moments: EmpiricalMoments) -> float:
    """Natural size ``||Q||_2 / ||S||_2`` of a nonzero solution."""
    top = float(np.linalg.eigvalsh(moments.sigma_mm)[-1])
    qn = float(np.linalg.norm(moments.Q, 2)) if moments.Q.size else 0.0
    return qn / top if top > 0 else 0.0


def estimated_rank(s, scale: float, tau_rank: float = DEFAULT_TAU_RANK) -> int:
    """Count ``s_i > tau_rank * max(s_1, scale)``.

    Measuring against the solution scale as well as ``s_1`` makes a solution
    that is zero up to smoothing report rank 0.
    """
    s = np.asarray(s)
    ref = max(float(s[0]) if s.size else 0.0, scale)
    if ref <= 0:
        return 0
    return int(np.sum(s > tau_rank * ref))


def smoothed_solve(moments: EmpiricalMoments, lam: float, config: SolverConfig | None = None,
                   warm_start=None) -> SolveResult:
    """Minimise the trace-norm penalised quadratic at one ``lam``.

    Raises InfeasibleDual when the quadratic is unbounded below and
    NonConverged (carrying the best iterate) when the Newton budget runs out.
    """
    config = config or SolverConfig()
    if not (np.isfinite(lam) and lam > 0):
        raise InvalidInput(f"lambda must be positive, got {lam}")
    p, q = moments.p, moments.q
    m = min(p, q)
    quad = _Quadratic(moments)
    prob = _Smoothed(quad, float(lam), p, q)
    eps_init, eps_final, qn = _resolve_eps(moments, lam, config, quad.norm_S)
    if warm_start is not None:
        W = np.array(warm_start, dtype=float)
        if W.shape != (p, q) or not np.all(np.isfinite(W)):
            raise InvalidInput("warm start has wrong shape or non-finite entries")
        eps_start = max(eps_final, eps_init * config.eps_factor ** config.warm_skip)
    else:
        W = np.zeros((p, q))
        eps_start = eps_init
    stages = _schedule(eps_start, eps_final, config.eps_factor)
    gtol = config.newton_tol * max(1.0, float(np.linalg.norm(moments.Q)))
    scale = qn / quad.norm_S

    trace = []
    iters = 0
    gap = np.inf
    budget_hit = False
    for k, eps in enumerate(stages):
        final = k == len(stages) - 1
        f = prob.value(W, eps)
        while True:
            U, s, V, g = prob.state(W, eps)
            gap = prob.gap(g)
            gnorm = float(np.linalg.norm(g))
            if final:
                if gnorm <= gtol and gap <= eps * m:
                    break
            elif gap <= eps * m:
                break
            if iters >= config.max_newton_iters:
                budget_hit = True
                break
            d = prob.newton_direction(U, s, V, g, eps)
            slope = float(g @ d)
            if slope >= 0:
                break
            iters += 1
            D = unvec(d, p, q)
            if -slope <= 1e-13 * (1.0 + abs(f)):
                # decrement below the resolution of f: take the pure Newton
                # step while it still shrinks the gradient
                Wn = W + D
                gn = prob.state(Wn, eps)[3]
                if np.linalg.norm(gn) >= gnorm:
                    break
                t, W, f = 1.0, Wn, prob.value(Wn, eps)
            else:
                t = 1.0
                while True:
                    Wn = W + t * D
                    fn = prob.value(Wn, eps)
                    if fn <= f + config.ls_armijo * t * slope:
                        break
                    t *= config.ls_shrink
                    if t < 1e-12:
                        Wn, fn = W, f
                        break
                if Wn is W:
                    break
                W, f = Wn, fn
            if config.record_trace:
                trace.append({"stage": k, "eps": eps, "objective": f, "gap": gap, "step": t,
                              "grad_norm": gnorm})
        if budget_hit:
            break

    U, s, Vt = np.linalg.svd(W, full_matrices=False)
    U, V = _fix_signs(U, Vt.T, s.size)
    rank = estimated_rank(s, scale, config.tau_rank)
    svd = SVDTriple(U=U, s=s, V=V, numerical_rank=rank)
    g = prob.state(W, eps_final)[3]
    gap = prob.gap(g)
    converged = (not budget_hit) and gap <= eps_final * m * (1 + 1e-9)
    result = SolveResult(
        W=W, svd=svd, estimated_rank=rank, duality_gap=gap,
        raw_gap_bound=(1.0 + 2.0 * LOG2) * eps_final * m, newton_iters=iters,
        eps_final=eps_final, lam=float(lam), converged=bool(converged), trace=trace,
    )
    if budget_hit:
        raise NonConverged(
            f"Newton budget of {config.max_newton_iters} iterations exhausted (gap {gap:.3g})",
            result,
        )
    return result


def duality_gap(W, moments: EmpiricalMoments, lam: float, eps: float) -> float:
    """Smoothed primal at ``W`` minus smoothed dual at ``dual_candidate(W, eps/lam)``."""
    if not (lam > 0 and eps > 0):
        raise InvalidInput("lambda and eps must be positive")
    W = np.asarray(W, dtype=float)
    quad = _Quadratic(moments)
    w = vec(W)
    U, sv, Vt = np.linalg.svd(W, full_matrices=False)
    tv = np.tanh(sv * lam / (2.0 * eps))  # singular values of dual_candidate(W, eps/lam)
    V = (U * tv) @ Vt
    primal = 0.5 * w @ quad.S @ w - w @ quad.q + lam * np.sum(barrier_dual(sv, eps / lam))
    r = quad.q - lam * vec(V)
    bV = float(np.sum(barrier_primal(tv)))
    dual = -0.5 * r @ quad.solve(r) - eps * bV
    return float(primal - dual)


def lambda_interval(moments: EmpiricalMoments, eps_rel: float = 1e-4) -> LambdaInterval:
    """Endpoints of the useful regularisation range.

    Above ``lambda_max = ||Q||_2`` the solution is zero; below ``lambda_min``
    the penalty changes the unregularised objective by at most a relative
    ``eps_rel``.
    """
    if not (0 < eps_rel < 1):
        raise InvalidInput("eps_rel must lie in (0, 1)")
    Q = moments.Q
    if not np.any(Q):
        return LambdaInterval(0.0, 0.0)
    S = moments.sigma_mm
    evals = np.linalg.eigvalsh(S)
    if evals[0] <= 1e-12 * max(evals[-1], 0.0):
        raise InvalidInput("second moment matrix is singular")
    x = np.linalg.solve(S, moments.q_vec)
    lam_max = float(np.linalg.norm(Q, 2))
    lam_min = float(eps_rel * (moments.q_vec @ x) / trace_norm(unvec(x, moments.p, moments.q)))
    assert lam_min <= lam_max * (1 + 1e-12)
    return LambdaInterval(lam_min, lam_max)


# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PathResult:
    lambdas: np.ndarray
    results: list
    errors: dict
    warm_start: bool

    @property
    def ok(self) -> np.ndarray:
        return np.array([r is not None for r in self.results])

    def _stack(self, fn, fill=np.nan):
        return np.array([fn(r) if r is not None else fill for r in self.results])

    @property
    def singular_values(self) -> np.ndarray:
        m = min(next(r.W.shape for r in self.results if r is not None))
        return np.array([
            r.svd.s if r is not None else np.full(m, np.nan) for r in self.results
        ])

    @property
    def ranks(self) -> np.ndarray:
        return self._stack(lambda r: r.estimated_rank, fill=-1).astype(int)

    @property
    def gaps(self) -> np.ndarray:
        return self._stack(lambda r: r.duality_gap)

    @property
    def trace_norms(self) -> np.ndarray:
        return self._stack(lambda r: float(np.sum(r.svd.s)))

    @property
    def total_newton_iters(self) -> int:
        return int(sum(r.newton_iters for r in self.results if r is not None))


def lambda_grid(lambda_min: float, lambda_max: float, grid_size: int) -> np.ndarray:
    """Descending log-uniform grid from ``lambda_max`` to ``lambda_min``."""
    if grid_size < 2:
        raise InvalidInput("grid_size must be at least 2")
    if not (0 < lambda_min <= lambda_max):
        raise InvalidInput("need 0 < lambda_min <= lambda_max")
    return np.geomspace(lambda_max, lambda_min, grid_size)


def regularization_path(moments: EmpiricalMoments, grid_size: int = 50,
                        config: SolverConfig | None = None, *, eps_rel: float = 1e-4,
                        lambdas=None, warm_start: bool = True) -> PathResult:
    """Solve along a descending log-uniform ``lam`` grid.

    Each solve is warm-started from the previous successful one unless
    ``warm_start`` is False. Failing points are recorded in ``errors`` (index
    -> message) and hold ``None`` in ``results``; a NonConverged point keeps
    its best iterate.
    """
    config = config or SolverConfig()
    if lambdas is None:
        if grid_size < 2:
            raise InvalidInput("grid_size must be at least 2")
        lo, hi = lambda_interval(moments, eps_rel)
        if hi <= 0:
            raise InvalidInput("Q = 0: the regularisation path is empty")
        lambdas = lambda_grid(lo, hi, grid_size)
    else:
        lambdas = np.sort(np.asarray(lambdas, dtype=float))[::-1]
        if lambdas.size == 0 or np.any(lambdas <= 0):
            raise InvalidInput("lambdas must be positive")
    results, errors = [], {}
    prev = None
    for i, lam in enumerate(lambdas):
        try:
            res = smoothed_solve(moments, lam, config, warm_start=prev if warm_start else None)
        except NonConverged as exc:
            errors[i] = str(exc)
            res = exc.result
        except (InfeasibleDual, InvalidInput, np.linalg.LinAlgError) as exc:
            errors[i] = f"{type(exc).__name__}: {exc}"
            res = None
        results.append(res)
        if res is not None and res.converged:
            prev = res.W
    return PathResult(lambdas=np.asarray(lambdas), results=results, errors=errors,
                      warm_start=warm_start)
