import logging

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from tracenorm.errors import InfeasibleDual, InvalidInput, NonConverged
from tracenorm.problem import EmpiricalMoments, kkt_residual, objective_value
from tracenorm.solver import (
    SolverConfig,
    dual_candidate,
    duality_gap,
    lambda_interval,
    regularization_path,
    smoothed_solve,
)
from tracenorm.spectral import LOG2, barrier_primal, smoothed_trace_norm, vec


def _soft_threshold(Q, lam):
    U, s, Vt = np.linalg.svd(Q, full_matrices=False)
    return (U * np.maximum(s - lam, 0)) @ Vt


def _random_pd(d, rng, ridge=0.1):
    A = rng.normal(size=(d, d))
    return A @ A.T / d + ridge * np.eye(d)


def _problem(seed, p=4, q=4):
    rng = np.random.default_rng(seed)
    return EmpiricalMoments.from_arrays(_random_pd(p * q, rng), rng.normal(size=(p, q)))


def test_config_invariants():
    with pytest.raises(InvalidInput):
        SolverConfig(eps_init=1e-10, eps_target=1e-9)
    with pytest.raises(InvalidInput):
        SolverConfig(eps_factor=1.0)
    with pytest.raises(InvalidInput):
        SolverConfig(eps_target=0.0)


# ---------------------------------------------------------------------------
# dual candidate


def test_dual_candidate_zero():
    assert np.array_equal(dual_candidate(np.zeros((2, 3)), 0.1), np.zeros((2, 3)))


def test_dual_candidate_attains_conjugate():
    rng = np.random.default_rng(0)
    eps = 1e-2
    for _ in range(10):
        W = rng.normal(size=(4, 3))
        V = dual_candidate(W, eps)
        sv = np.linalg.svd(V, compute_uv=False)
        val = np.sum(V * W) - eps * np.sum(barrier_primal(sv))
        assert val == pytest.approx(smoothed_trace_norm(W, eps), rel=1e-10)
        assert sv.max() <= 1 + 4e-16  # tanh saturates to 1.0 in floating point
    V = dual_candidate(rng.normal(size=(4, 3)), 1.0)
    assert np.linalg.norm(V, 2) < 1


def test_dual_candidate_matches_scalar_maximisation():
    eps = 0.05
    for s in [0.0, 0.01, 0.1, 0.3, 1.0]:
        res = minimize_scalar(lambda v: -(s * v - eps * barrier_primal(v)), bounds=(-1, 1),
                              method="bounded", options={"xatol": 1e-12})
        v = dual_candidate(np.array([[s]]), eps)[0, 0]
        assert v == pytest.approx(res.x, abs=1e-7)
    assert dual_candidate(np.array([[1.0]]), 1e-3)[0, 0] == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# single solves


@pytest.mark.parametrize("seed", range(5))
def test_soft_thresholding(seed):
    rng = np.random.default_rng(seed)
    Q = rng.normal(size=(4, 3))
    lam = 0.5 * np.linalg.norm(Q, 2)
    res = smoothed_solve(EmpiricalMoments.from_arrays(np.eye(12), Q), lam)
    assert np.linalg.norm(res.W - _soft_threshold(Q, lam)) <= 1e-6
    assert res.estimated_rank == np.sum(np.linalg.svd(Q, compute_uv=False) > lam)


def test_large_lambda_gives_zero():
    rng = np.random.default_rng(1)
    Q = rng.normal(size=(3, 5))
    res = smoothed_solve(EmpiricalMoments.from_arrays(np.eye(15), Q), np.linalg.norm(Q, 2))
    assert np.linalg.norm(res.W) <= 1e-6
    assert res.estimated_rank == 0


def test_solution_is_kkt_optimal_with_gap_certificate():
    m = _problem(2)
    lam = 0.3 * np.linalg.norm(m.Q, 2)
    cfg = SolverConfig()
    res = smoothed_solve(m, lam, cfg)
    assert res.converged
    assert -1e-12 <= res.duality_gap <= cfg.eps_target * 4
    assert res.raw_gap_bound == pytest.approx((1 + 2 * LOG2) * res.eps_final * 4)
    assert res.estimated_rank == res.svd.numerical_rank
    assert kkt_residual(res.W, m, lam, tol=1e-6).optimal


def test_gap_function_agrees_with_gradient_form():
    m = _problem(3)
    lam, eps = 0.7, 1e-2
    W = np.random.default_rng(4).normal(size=(4, 4))
    U, s, Vt = np.linalg.svd(W)
    g = m.sigma_mm @ vec(W) - m.q_vec + lam * vec((U * np.tanh(lam * s / (2 * eps))) @ Vt)
    direct = duality_gap(W, m, lam, eps)
    assert direct == pytest.approx(0.5 * g @ np.linalg.solve(m.sigma_mm, g), rel=1e-8)
    assert direct > 0


def test_gap_zero_problem():
    m = EmpiricalMoments.from_arrays(np.eye(4), np.zeros((2, 2)))
    assert duality_gap(np.zeros((2, 2)), m, 1.0, 0.1) == 0.0


def test_gap_at_solution():
    m = _problem(5)
    lam = 0.2 * np.linalg.norm(m.Q, 2)
    res = smoothed_solve(m, lam)
    assert duality_gap(res.W, m, lam, res.eps_final) <= res.eps_final * 4 + 1e-12


def test_trace_is_monotone_within_each_stage():
    m = _problem(6)
    res = smoothed_solve(m, 0.4 * np.linalg.norm(m.Q, 2), SolverConfig(record_trace=True))
    assert res.trace
    stages = {}
    for t in res.trace:
        stages.setdefault(t["stage"], []).append(t)
    for rows in stages.values():
        obj = [r["objective"] for r in rows]
        gaps = [r["gap"] for r in rows]
        for a, b in zip(obj, obj[1:]):
            assert b <= a + 1e-12 * (1 + abs(a))
        for a, b in zip(gaps, gaps[1:]):
            assert b <= a * (1 + 1e-6) + 1e-15


def test_reference_solve_certificate():
    m = _problem(7)
    lam = 0.25 * np.linalg.norm(m.Q, 2)
    cfg = SolverConfig()
    res = smoothed_solve(m, lam, cfg)
    ref = smoothed_solve(m, lam, SolverConfig(eps_target=cfg.eps_target / 100))
    diff = objective_value(res.W, m, lam) - objective_value(ref.W, m, lam)
    assert diff <= (1 + 2 * LOG2) * cfg.eps_target * 4


def test_warm_start_reaches_same_solution():
    m = _problem(8)
    lam = 0.3 * np.linalg.norm(m.Q, 2)
    cold = smoothed_solve(m, lam)
    warm = smoothed_solve(m, lam * 0.9, warm_start=cold.W)
    ref = smoothed_solve(m, lam * 0.9)
    assert np.allclose(warm.W, ref.W, atol=1e-6)


def test_iteration_cap_raises_with_best_iterate():
    with pytest.raises(NonConverged) as info:
        smoothed_solve(_problem(9), 0.5, SolverConfig(max_newton_iters=2))
    assert info.value.result is not None
    assert info.value.result.W.shape == (4, 4)


def test_infeasible_dual():
    S = np.eye(4)
    S[3, 3] = 0.0
    Q = np.array([[0.0, 0.0], [0.0, 1.0]])  # vec index 3 lies in the null space
    with pytest.raises(InfeasibleDual):
        smoothed_solve(EmpiricalMoments.from_arrays(S, Q), 0.1)


def test_singular_but_feasible_is_ridged(caplog):
    S = np.eye(4)
    S[3, 3] = 0.0
    Q = np.array([[2.0, 0.0], [0.0, 0.0]])
    with caplog.at_level(logging.WARNING):
        res = smoothed_solve(EmpiricalMoments.from_arrays(S, Q), 0.5)
    assert "ridge" in caplog.text
    assert res.W[0, 0] == pytest.approx(1.5, abs=1e-6)


@pytest.mark.parametrize("lam", [0.0, -1.0, np.inf])
def test_rejects_bad_lambda(lam):
    with pytest.raises(InvalidInput):
        smoothed_solve(_problem(0), lam)


# ---------------------------------------------------------------------------
# path


def test_lambda_interval_rank_one():
    rng = np.random.default_rng(10)
    u, v = rng.normal(size=3), rng.normal(size=2)
    Q = np.outer(u, v)
    s1 = np.linalg.norm(Q, 2)
    lo, hi = lambda_interval(EmpiricalMoments.from_arrays(np.eye(6), Q), 0.01)
    assert hi == pytest.approx(s1) and lo == pytest.approx(0.01 * s1)


def test_lambda_interval_empty_and_errors():
    iv = lambda_interval(EmpiricalMoments.from_arrays(np.eye(4), np.zeros((2, 2))))
    assert iv == (0.0, 0.0) and iv.empty
    S = np.eye(4)
    S[0, 0] = 0
    with pytest.raises(InvalidInput):
        lambda_interval(EmpiricalMoments.from_arrays(S, np.ones((2, 2))))
    with pytest.raises(InvalidInput):
        lambda_interval(EmpiricalMoments.from_arrays(np.eye(4), np.ones((2, 2))), 1.5)


def test_above_lambda_max_is_zero():
    m = _problem(11)
    _, hi = lambda_interval(m)
    assert np.linalg.norm(smoothed_solve(m, 1.01 * hi).W) <= 1e-8


@pytest.fixture(scope="module")
def paths():
    m = _problem(12)
    return m, regularization_path(m, 30), regularization_path(m, 30, warm_start=False)


def test_path_endpoints(paths):
    m, warm, _ = paths
    assert not warm.errors
    assert warm.ranks[0] == 0
    assert warm.ranks[-1] == 4
    assert np.all(np.diff(warm.lambdas) < 0)


def test_path_trace_norm_monotone(paths):
    _, warm, _ = paths
    tn = warm.trace_norms
    assert np.all(np.diff(tn) >= -1e-8)


def test_warm_start_saves_iterations(paths):
    _, warm, cold = paths
    assert warm.total_newton_iters < cold.total_newton_iters
    assert np.allclose(warm.singular_values, cold.singular_values, atol=1e-6)


def test_path_marks_failures_and_continues():
    m = _problem(13)
    path = regularization_path(m, 5, SolverConfig(max_newton_iters=3))
    assert path.errors
    assert len(path.results) == 5
    assert all("Newton budget" in msg for msg in path.errors.values())


def test_path_rejects_tiny_grid():
    with pytest.raises(InvalidInput):
        regularization_path(_problem(0), 1)
