"""Command-line interface.

Subcommands: solve, path, consistency-check, simulate, replicate, scatter.
Exit status 0 on success, 1 on numerical failure, 2 on invalid input; errors
are reported as a JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import svgplot
from .adaptive import adaptive_path, adaptive_solve, adaptive_weights, least_squares_estimate
from .consistency import check_conditions
from .errors import InfeasibleDual, InvalidInput, NonConverged
from .experiments import (
    ExperimentConfig,
    default_lambda_grid,
    find_exemplar,
    frequency_interval,
    lambda_error_scatter,
    run_replications,
    tradeoff_points,
    write_table,
    _json_default,
)
from .problem import assemble_moments, read_observations, write_observations
from .simulation import SyntheticSpec, generate_ground_truth, sample
from .solver import SolverConfig, regularization_path, smoothed_solve

FORMATS = ("csv", "json", "svg")


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument handling


def _add_common(p: argparse.ArgumentParser):
    g = p.add_argument_group("global")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir", default="out")
    g.add_argument("--format", default="csv,json,svg",
                   help="comma-separated subset of csv,json,svg")
    g.add_argument("--threads", type=int, default=1)
    g.add_argument("--trace", action="store_true", help="write per-iteration solver telemetry")
    g.add_argument("--full", action="store_true", help="full-scale replicate counts (200) and sample sizes (up to 1e5)")
    g.add_argument("--config", help="JSON file of option defaults")
    g.add_argument("--eps-target", type=float, default=1e-9)
    g.add_argument("--eps-factor", type=float, default=0.5)
    g.add_argument("--max-newton-iters", type=int, default=500)
    g.add_argument("--tau-rank", type=float, default=1e-6)


def _add_spec(p: argparse.ArgumentParser):
    g = p.add_argument_group("synthetic problem")
    g.add_argument("--p", type=int, default=4)
    g.add_argument("--q", type=int, default=4)
    g.add_argument("--r", type=int, default=2)
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--sigma-noise", type=float, default=1.0)
    g.add_argument("--mode", choices=("iid", "collaborative"), default="iid")
    g.add_argument("--n-x", type=int)
    g.add_argument("--n-y", type=int)
    g.add_argument("--design", choices=("identity", "random_pd"), default="identity")
    g.add_argument("--condition-target", type=float, default=10.0)
    g.add_argument("--exemplar", choices=("consistent", "inconsistent"),
                   help="search random designs for a consistent (||Lambda|| < 0.6) or "
                        "inconsistent (||Lambda|| > 3) exemplar")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="tracenorm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("solve", help="solve at one lambda")
    _add_common(p)
    _add_spec(p)
    p.add_argument("--data", help="observation CSV (JSON manifest alongside)")
    p.add_argument("--lambda", dest="lam", type=float, required=False)
    p.add_argument("--method", choices=("plain", "adaptive"), default="plain")
    p.add_argument("--gamma", type=float, default=0.5)
    subs["solve"] = p

    p = sub.add_parser("path", help="regularisation path and singular-value plot")
    _add_common(p)
    _add_spec(p)
    p.add_argument("--data")
    p.add_argument("--grid-size", type=int, default=50)
    p.add_argument("--eps-rel", type=float, default=1e-4)
    p.add_argument("--method", choices=("plain", "adaptive"), default="plain")
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--cold", action="store_true", help="disable warm starts")
    subs["path"] = p

    p = sub.add_parser("consistency-check", help="Lambda matrix and consistency conditions")
    _add_common(p)
    _add_spec(p)
    p.add_argument("--margin", type=float, default=1e-8)
    subs["consistency-check"] = p

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    _add_common(p)
    _add_spec(p)
    p.add_argument("--replicate", type=int, default=0)
    subs["simulate"] = p

    p = sub.add_parser("replicate", help="Monte Carlo rank-selection curves")
    _add_common(p)
    _add_spec(p)
    p.add_argument("--n-values", default="100,1000,10000")
    p.add_argument("--replicates", type=int, default=50)
    p.add_argument("--method", choices=("plain", "adaptive"), default="plain")
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--lambda-min", type=float, default=1e-4)
    p.add_argument("--lambda-max", type=float, default=10.0)
    p.add_argument("--per-decade", type=int, default=10)
    subs["replicate"] = p

    p = sub.add_parser("scatter", help="best correct-rank error against ||Lambda||")
    _add_common(p)
    _add_spec(p)
    p.add_argument("--designs", type=int, default=100)
    p.add_argument("--cond-max", type=float, default=1e3)
    p.add_argument("--lambda-min", type=float, default=1e-4)
    p.add_argument("--lambda-max", type=float, default=10.0)
    p.add_argument("--per-decade", type=int, default=10)
    subs["scatter"] = p
    return parser, subs


def parse_args(argv=None) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise InputError("config file must hold a JSON object")
        sp = subs[args.command]
        known = {a.dest for a in sp._actions}
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        if k_bad := sorted(set(cfg) - known - {"lambda"}):
            raise InputError(f"unknown config keys: {', '.join(k_bad)}")
        if "lambda" in cfg:
            cfg["lam"] = cfg.pop("lambda")
        sp.set_defaults(**cfg)
        args = parser.parse_args(argv)  # explicit flags override the file
    args.formats = {f.strip() for f in args.format.split(",") if f.strip()}
    if not args.formats <= set(FORMATS):
        raise InputError(f"unknown format in {args.format!r}")
    return args


def solver_config(args, **kw) -> SolverConfig:
    return SolverConfig(eps_target=args.eps_target, eps_factor=args.eps_factor,
                        max_newton_iters=args.max_newton_iters, tau_rank=args.tau_rank,
                        record_trace=args.trace, **kw)


def synthetic_spec(args, n=None) -> SyntheticSpec:
    base = SyntheticSpec(
        p=args.p, q=args.q, r=args.r, n=n or args.n, sigma_noise=args.sigma_noise, mode=args.mode,
        n_x=args.n_x, n_y=args.n_y, design=args.design, condition_target=args.condition_target,
        seed=args.seed,
    )
    if args.exemplar:
        _, base, _ = find_exemplar(base, args.seed, args.exemplar)
    return base


def _resolved(args) -> dict:
    d = {k: v for k, v in vars(args).items() if k not in ("formats",)}
    d["solver_defaults"] = asdict(solver_config(args))
    return d


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))


def _load_problem(args):
    """Moments plus (optionally) the ground-truth model for synthetic input."""
    if getattr(args, "data", None):
        obs = read_observations(args.data)
        return assemble_moments(obs), None, None
    spec = synthetic_spec(args)
    model = generate_ground_truth(spec)
    return assemble_moments(sample(spec, model, 0)), model, spec


# ---------------------------------------------------------------------------
# subcommands


def cmd_solve(args):
    if args.lam is None:
        raise InputError("--lambda is required")
    moments, model, spec = _load_problem(args)
    config = solver_config(args)
    if args.method == "adaptive":
        w = adaptive_weights(least_squares_estimate(moments), args.gamma, moments.n)
        res = adaptive_solve(moments, args.lam, w, config)
    else:
        res = smoothed_solve(moments, args.lam, config)
    out = Path(args.out_dir)
    summary = {
        "lambda": args.lam, "estimated_rank": res.estimated_rank,
        "singular_values": res.svd.s.tolist(), "duality_gap": res.duality_gap,
        "raw_gap_bound": res.raw_gap_bound, "newton_iters": res.newton_iters,
        "eps_final": res.eps_final, "converged": res.converged, "W": res.W.tolist(),
    }
    if model is not None:
        summary["error_fro"] = float(np.linalg.norm(res.W - model.W))
    meta = {"command": "solve", "args": _resolved(args)}
    if "csv" in args.formats:
        write_table(out / "solve_W.csv", [f"col{j + 1}" for j in range(res.W.shape[1])], res.W, meta)
    if "json" in args.formats:
        out.mkdir(parents=True, exist_ok=True)
        (out / "solve.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json_default))
    if args.trace:
        rows = [[t["stage"], t["eps"], t["objective"], t["gap"], t["step"], t["grad_norm"]] for t in res.trace]
        write_table(out / "trace.csv", ["stage", "eps", "objective", "gap", "step", "grad_norm"], rows, meta)
    _emit(summary)


def _path_plot(lambdas, sv, pop, title):
    plot = svgplot.Plot(title=title, xlabel="lambda", ylabel="singular values", xlog=True)
    for k in range(sv.shape[1]):
        plot.series.append(svgplot.Series(lambdas, sv[:, k], label=f"s{k + 1}" if k < 8 else "",
                                          color=svgplot.PALETTE[k % 8]))
    if pop is not None:
        for k, v in enumerate(pop):
            plot.series.append(svgplot.Series(lambdas, np.full(len(lambdas), v), dotted=True,
                                              color=svgplot.PALETTE[k % 8]))
    return plot


def cmd_path(args):
    moments, model, spec = _load_problem(args)
    config = solver_config(args)
    if args.method == "adaptive":
        w = adaptive_weights(least_squares_estimate(moments), args.gamma, moments.n)
        path = adaptive_path(moments, w, None, config, warm_start=not args.cold,
                             grid_size=args.grid_size, eps_rel=args.eps_rel)
    else:
        path = regularization_path(moments, args.grid_size, config, eps_rel=args.eps_rel,
                                   warm_start=not args.cold)
    m = min(moments.p, moments.q)
    sv = path.singular_values
    header = ["lambda"] + [f"s{k + 1}" for k in range(m)] + ["rank", "gap"]
    if model is not None:
        header.append("rmse")
    rows = []
    for i, lam in enumerate(path.lambdas):
        r = path.results[i]
        row = [lam] + list(sv[i]) + [path.ranks[i], path.gaps[i]]
        if model is not None:
            row.append(np.linalg.norm(r.W - model.W) if r is not None else np.nan)
        rows.append(row)
    out = Path(args.out_dir)
    meta = {"command": "path", "args": _resolved(args),
            "failed_points": {str(k): v for k, v in path.errors.items()},
            "total_newton_iters": path.total_newton_iters}
    if "csv" in args.formats:
        write_table(out / "path.csv", header, rows, meta)
    if "svg" in args.formats:
        pop = None if model is None else np.concatenate([model.s, np.zeros(m - model.r)])
        svgplot.save(_path_plot(path.lambdas, sv, pop, f"singular value path ({args.method})"),
                     out / "path.svg")
    summary = {"points": len(path.lambdas), "failed": len(path.errors),
               "ranks": path.ranks.tolist(), "total_newton_iters": path.total_newton_iters}
    if "json" in args.formats:
        out.mkdir(parents=True, exist_ok=True)
        (out / "path.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json_default))
    _emit(summary)
    return 1 if len(path.errors) == len(path.lambdas) else 0


def cmd_consistency(args):
    spec = synthetic_spec(args)
    model = generate_ground_truth(spec)
    report = check_conditions(model, args.margin)
    d = report.to_dict()
    d["spec"] = spec.to_dict()
    out = Path(args.out_dir)
    if "json" in args.formats:
        out.mkdir(parents=True, exist_ok=True)
        (out / "consistency.json").write_text(json.dumps(d, indent=2, sort_keys=True, default=_json_default))
    if "csv" in args.formats:
        write_table(out / "lambda_matrix.csv",
                    [f"col{j + 1}" for j in range(report.Lambda.shape[1])], report.Lambda,
                    {"command": "consistency-check", "args": _resolved(args)})
    _emit({k: d[k] for k in ("lambda_norm", "weak_ok", "strict_ok", "boundary")})


def cmd_simulate(args):
    spec = synthetic_spec(args)
    model = generate_ground_truth(spec)
    obs = sample(spec, model, args.replicate)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = write_observations(out / "data.csv", obs,
                              metadata={"spec": spec.to_dict(), "replicate": args.replicate,
                                        "W": model.W.tolist()})
    _emit({"dataset": str(path), "n": len(obs), "p": obs.p, "q": obs.q})


def _grid(args):
    return tuple(default_lambda_grid(args.lambda_min, args.lambda_max, args.per_decade))


def cmd_replicate(args):
    n_values = [int(float(v)) for v in args.n_values.split(",") if v.strip()]
    reps = args.replicates
    if args.full:
        reps = 200
        n_values = sorted(set(n_values) | {100000})
    base = synthetic_spec(args)
    model = generate_ground_truth(base)
    config0 = solver_config(args)
    out = Path(args.out_dir)
    summary = {"lambda_norm": None, "runs": []}
    freq_plot = svgplot.Plot(title=f"correct rank frequency ({args.method})", xlabel="lambda",
                             ylabel="P(rank = r)", xlog=True, hlines=[0.8])
    err_plot = svgplot.Plot(title=f"log10 mean error ({args.method})", xlabel="lambda",
                            ylabel="log10 mean ||W - W0||_F", xlog=True)
    for k, n in enumerate(n_values):
        spec = SyntheticSpec(**{**{f: getattr(base, f) for f in base.__dataclass_fields__}, "n": n})
        cfg = ExperimentConfig(spec=spec, method=args.method, gamma=args.gamma, lambdas=_grid(args),
                               n_replicates=reps, solver=config0, threads=args.threads)
        rep = run_replications(cfg, model)
        summary["lambda_norm"] = rep.lambda_norm
        iv = frequency_interval(rep)
        run = {"n": n, "n_used": rep.n_used, "n_failed": rep.n_failed,
               "interval": None if iv is None else {"lambda_low": iv[0], "lambda_high": iv[1],
                                                    "log10_center": iv[2]},
               "tradeoff_points": tradeoff_points(rep).tolist()}
        summary["runs"].append(run)
        if "csv" in args.formats:
            write_table(out / f"replicate_{args.method}_n{n}.csv", rep.header, list(rep.rows()),
                        {"command": "replicate", "args": _resolved(args), "experiment": rep.config,
                         "lambda_norm": rep.lambda_norm, **run})
        color = svgplot.PALETTE[k % 8]
        freq_plot.series.append(svgplot.Series(rep.lambdas, rep.correct_rank_frequency, f"n={n}", color=color))
        err_plot.series.append(svgplot.Series(rep.lambdas, rep.mean_log_rmse, f"n={n}", color=color))
    if "svg" in args.formats:
        svgplot.save(freq_plot, out / f"replicate_{args.method}_frequency.svg")
        svgplot.save(err_plot, out / f"replicate_{args.method}_error.svg")
    if "json" in args.formats:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"replicate_{args.method}.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True, default=_json_default))
    _emit(summary)


def cmd_scatter(args):
    template = synthetic_spec(args)
    rep = lambda_error_scatter(args.designs, template, args.seed, _grid(args), solver_config(args),
                               threads=args.threads, cond_range=(1.0, args.cond_max))
    out = Path(args.out_dir)
    summary = {"sign_test_k": rep.sign_test_k, "sign_test_n": rep.sign_test_n,
               "p_value": rep.p_value, "median_low": rep.median_low, "median_high": rep.median_high,
               "flagged": int(sum(r[8] for r in rep.rows))}
    if "csv" in args.formats:
        write_table(out / "scatter.csv", rep.header, rep.rows,
                    {"command": "scatter", "args": _resolved(args), "experiment": rep.config, **summary})
    if "svg" in args.formats:
        rows = np.array(rep.rows, dtype=float)
        ok, bad = rows[:, 8] == 0, rows[:, 8] == 1
        plot = svgplot.Plot(title=f"best correct-rank error, n={template.n}", xlabel="log10 ||Lambda||_2",
                            ylabel="error", ylog=True, vlines=[0.0])
        plot.series.append(svgplot.Series(rows[ok, 5], rows[ok, 6], "correct rank", markers=True))
        if bad.any():
            plot.series.append(svgplot.Series(rows[bad, 5], rows[bad, 6], "no correct rank",
                                              markers=True, color="#999999"))
        svgplot.save(plot, out / "scatter.svg")
    if "json" in args.formats:
        out.mkdir(parents=True, exist_ok=True)
        (out / "scatter.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    _emit(summary)


COMMANDS = {
    "solve": cmd_solve,
    "path": cmd_path,
    "consistency-check": cmd_consistency,
    "simulate": cmd_simulate,
    "replicate": cmd_replicate,
    "scatter": cmd_scatter,
}


def _fail(code, exc):
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args) or 0
    except (InvalidInput, InputError, FileNotFoundError, ValueError) as exc:
        return _fail(2, exc)
    except (NonConverged, InfeasibleDual, RuntimeError, np.linalg.LinAlgError, ArithmeticError) as exc:
        return _fail(1, exc)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
