"""Replication harness: rank-selection curves and the ||Lambda||-vs-error scatter.

Every replicate draws a fresh sample from a fixed ground-truth model, solves
the whole regularisation path on a common lambda grid, and records whether the
estimated rank is correct and the Frobenius error at each grid point.
Results are merged by replicate index, so aggregates do not depend on the
number of workers.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from .adaptive import adaptive_path, adaptive_weights, least_squares_estimate
from .consistency import GroundTruthModel, check_conditions
from .problem import assemble_moments
from .simulation import SyntheticSpec, generate_ground_truth, rng_stream, sample
from .solver import SolverConfig, regularization_path

log = logging.getLogger(__name__)

MAX_FAILURE_FRACTION = 0.1


def default_lambda_grid(lo: float = 1e-4, hi: float = 10.0, per_decade: int = 10) -> np.ndarray:
    """Descending log-uniform grid shared by every replicate."""
    k = int(round(np.log10(hi / lo) * per_decade)) + 1
    return np.geomspace(hi, lo, k)


@dataclass(frozen=True)
class ExperimentConfig:
    spec: SyntheticSpec
    method: str = "plain"
    gamma: float = 0.5
    lambdas: tuple = field(default_factory=lambda: tuple(default_lambda_grid()))
    n_replicates: int = 50
    solver: SolverConfig = field(default_factory=SolverConfig)
    threads: int = 1

    def __post_init__(self):
        if self.n_replicates < 1:
            raise ValueError("n_replicates must be >= 1")
        if len(self.lambdas) < 2:
            raise ValueError("lambda grid needs at least two points")
        if self.method not in ("plain", "adaptive"):
            raise ValueError(f"unknown method {self.method!r}")

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "method": self.method,
            "gamma": self.gamma,
            "lambdas": [float(x) for x in self.lambdas],
            "n_replicates": self.n_replicates,
            "solver": asdict(self.solver),
        }


@dataclass(eq=False)
class ReplicationReport:
    lambdas: np.ndarray
    correct_rank_frequency: np.ndarray
    mean_rmse: np.ndarray
    n_used: int
    n_failed: int
    config: dict
    lambda_norm: float | None = None
    errors: np.ndarray | None = field(default=None, repr=False)
    correct: np.ndarray | None = field(default=None, repr=False)

    @property
    def mean_log_rmse(self) -> np.ndarray:
        """``log10`` of the replicate-averaged Frobenius error."""
        return np.log10(self.mean_rmse)

    def rows(self):
        for lam, f, e in zip(self.lambdas, self.correct_rank_frequency, self.mean_rmse):
            yield [float(lam), float(f), float(e), float(np.log10(e))]

    header = ["lambda", "correct_rank_frequency", "mean_rmse", "log10_mean_rmse"]


def _replicate(args):
    config, model, k = args
    spec = config.spec
    data = sample(spec, model, k)
    moments = assemble_moments(data)
    if config.method == "adaptive":
        weights = adaptive_weights(least_squares_estimate(moments), config.gamma, spec.n)
        path = adaptive_path(moments, weights, config.lambdas, config.solver)
    else:
        path = regularization_path(moments, config=config.solver, lambdas=config.lambdas)
    errs = np.full(len(path.lambdas), np.nan)
    correct = np.zeros(len(path.lambdas), dtype=bool)
    for i, res in enumerate(path.results):
        if res is None or i in path.errors:
            continue
        errs[i] = np.linalg.norm(res.W - model.W)
        correct[i] = res.estimated_rank == model.r
    return k, errs, correct, len(path.errors)


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def run_replications(config: ExperimentConfig, model: GroundTruthModel | None = None) -> ReplicationReport:
    """Correct-rank frequency and mean error per grid lambda.

    A replicate with any failed grid point is excluded and counted; more than
    10% exclusions raise RuntimeError.
    """
    model = model if model is not None else generate_ground_truth(config.spec)
    out = _map(_replicate, [(config, model, k) for k in range(config.n_replicates)], config.threads)
    out.sort(key=lambda t: t[0])
    keep = [t for t in out if t[3] == 0 and np.all(np.isfinite(t[1]))]
    n_failed = len(out) - len(keep)
    if n_failed:
        log.warning("%d of %d replicates excluded after solver failures", n_failed, len(out))
    if n_failed > MAX_FAILURE_FRACTION * len(out):
        raise RuntimeError(f"{n_failed} of {len(out)} replicates failed")
    errs = np.array([t[1] for t in keep])
    correct = np.array([t[2] for t in keep])
    try:
        lam_norm = check_conditions(model).lambda_norm
    except Exception:  # diagnostics only
        lam_norm = None
    return ReplicationReport(
        lambdas=np.asarray(config.lambdas, float),
        correct_rank_frequency=correct.mean(axis=0),
        mean_rmse=errs.mean(axis=0),
        n_used=len(keep),
        n_failed=n_failed,
        config=config.to_dict(),
        lambda_norm=lam_norm,
        errors=errs,
        correct=correct,
    )


def frequency_interval(report: ReplicationReport, threshold: float = 0.8):
    """Longest run of grid points with correct-rank frequency >= threshold.

    Returns ``(lambda_low, lambda_high, log10 center)`` or None.
    """
    ok = report.correct_rank_frequency >= threshold
    best, start = None, None
    for i, flag in enumerate(np.append(ok, False)):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            if best is None or i - start > best[1] - best[0]:
                best = (start, i)
            start = None
    if best is None:
        return None
    lam = report.lambdas[best[0]:best[1]]
    lo, hi = float(lam.min()), float(lam.max())
    return lo, hi, 0.5 * (np.log10(lo) + np.log10(hi))


def tradeoff_points(report: ReplicationReport, threshold: float = 0.8, factor: float = 2.0) -> np.ndarray:
    """Grid indices with frequency >= threshold and error <= factor x path-best."""
    best = np.nanmin(report.mean_rmse)
    ok = (report.correct_rank_frequency >= threshold) & (report.mean_rmse <= factor * best)
    return np.flatnonzero(ok)


# ---------------------------------------------------------------------------


def design_spec(template: SyntheticSpec, base_seed: int, index: int,
                cond_range=(1.0, 1e3)) -> SyntheticSpec:
    """Random design number ``index``: its own seed and a log-uniform condition target."""
    rng = rng_stream(base_seed, "designs", index)
    lo, hi = np.log10(cond_range[0]), np.log10(cond_range[1])
    cx, cy = 10 ** rng.uniform(lo, hi, size=2)
    seed = int(rng.integers(0, 2**63 - 1))
    d = {k: getattr(template, k) for k in template.__dataclass_fields__}
    d.update(design="random_pd", condition_target=(float(cx), float(cy)), seed=seed)
    return SyntheticSpec(**d)


def find_exemplar(template: SyntheticSpec, base_seed: int, kind: str, max_tries: int = 2000,
                  cond_range=(1.0, 1e3)):
    """First random design with ``||Lambda||_2 < 0.6`` (consistent) or ``> 3`` (inconsistent).

    Returns ``(index, spec, lambda_norm)``.
    """
    if kind not in ("consistent", "inconsistent"):
        raise ValueError(kind)
    for i in range(max_tries):
        spec = design_spec(template, base_seed, i, cond_range)
        norm = check_conditions(generate_ground_truth(spec)).lambda_norm
        if (kind == "consistent" and norm < 0.6) or (kind == "inconsistent" and norm > 3.0):
            return i, spec, norm
    raise RuntimeError(f"no {kind} design found in {max_tries} tries")


@dataclass(eq=False)
class ScatterReport:
    rows: list
    sign_test_k: int
    sign_test_n: int
    p_value: float
    median_low: float
    median_high: float
    config: dict

    header = ["design", "seed", "cond_x", "cond_y", "lambda_norm", "log10_lambda_norm",
              "best_error", "lambda_best", "no_correct_rank"]


def _scatter_one(args):
    template, base_seed, i, lambdas, solver, cond_range = args
    spec = design_spec(template, base_seed, i, cond_range)
    model = generate_ground_truth(spec)
    norm = check_conditions(model).lambda_norm
    moments = assemble_moments(sample(spec, model, 0))
    path = regularization_path(moments, config=solver, lambdas=lambdas)
    errs = np.array([np.inf if r is None else np.linalg.norm(r.W - model.W) for r in path.results])
    ok = np.array([r is not None and r.estimated_rank == model.r for r in path.results])
    flag = not ok.any()
    pool = errs if flag else np.where(ok, errs, np.inf)
    j = int(np.argmin(pool))
    cx, cy = spec.condition_target
    return [i, spec.seed, cx, cy, norm, float(np.log10(norm)), float(pool[j]),
            float(path.lambdas[j]), int(flag)]


def sign_test(log_norms, errors, split: float = 0.2):
    """One-sided sign test that high-``||Lambda||`` designs have larger errors.

    Counts designs with ``log10 ||Lambda|| > split`` whose error exceeds the
    median error of designs with ``log10 ||Lambda|| < -split``.
    """
    log_norms = np.asarray(log_norms)
    errors = np.asarray(errors)
    low = errors[log_norms < -split]
    high = errors[log_norms > split]
    if low.size == 0 or high.size == 0:
        return 0, int(high.size), 1.0, float("nan"), float("nan")
    med = float(np.median(low))
    k = int(np.sum(high > med))
    p = float(binomtest(k, high.size, 0.5, alternative="greater").pvalue)
    return k, int(high.size), p, med, float(np.median(high))


def lambda_error_scatter(n_designs: int, template: SyntheticSpec, base_seed: int,
                         lambdas=None, solver: SolverConfig | None = None, threads: int = 1,
                         cond_range=(1.0, 1e3)) -> ScatterReport:
    """Best correct-rank error against ``log10 ||Lambda||_2`` over random designs."""
    if n_designs < 10:
        raise ValueError("n_designs must be at least 10")
    lambdas = tuple(default_lambda_grid() if lambdas is None else lambdas)
    solver = solver or SolverConfig()
    rows = _map(_scatter_one, [(template, base_seed, i, lambdas, solver, cond_range)
                               for i in range(n_designs)], threads)
    rows.sort(key=lambda r: r[0])
    k, n, p, ml, mh = sign_test([r[5] for r in rows], [r[6] for r in rows])
    config = {"n_designs": n_designs, "template": template.to_dict(), "base_seed": base_seed,
              "lambdas": [float(x) for x in lambdas], "solver": asdict(solver),
              "cond_range": list(cond_range)}
    return ScatterReport(rows=rows, sign_test_k=k, sign_test_n=n, p_value=p,
                         median_low=ml, median_high=mh, config=config)


# ---------------------------------------------------------------------------
# output


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_table(path, header, rows, metadata: dict) -> Path:
    """CSV with a header row plus a ``.json`` sidecar holding ``metadata``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    path.with_suffix(".json").write_text(json.dumps(metadata, indent=2, sort_keys=True, default=_json_default))
    return path


def read_table(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in r] for r in reader]
    return header, np.array(rows)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, (np.bool_,)):
        return bool(o)
    raise TypeError(f"not serialisable: {type(o).__name__}")
