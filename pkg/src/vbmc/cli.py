"""Command-line interface.

Subcommands:
  run          inference on a named problem or an external worker target
  bench        the reproducible benchmark grid from a JSON config
  metrics      score a saved run log against a ground-truth bundle
  demo-banana  quick two-dimensional demo with emulated noise
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from vbmc.acquisition import ACQ_KINDS
from vbmc.bench import load_run, run_benchmark, run_one, sanitize_row
from vbmc.engine import EngineOptions, run_vbmc
from vbmc.metrics import evaluate_against_truth
from vbmc.problems import PROBLEM_NAMES, get_problem
from vbmc.spaces import ParamSpace
from vbmc.targets import ExternalTarget
from vbmc.variational import VariationalPosterior


def _result_summary(result) -> dict:
    return {
        "elbo": float(result.elbo.elbo_mean),
        "elbo_sd": float(result.elbo.elbo_sd),
        "n_evals": int(result.n_evals),
        "K": int(result.vp.K),
        "success": bool(result.success),
        "message": result.message,
        "posterior_mean_original": result.space.from_inference(
            result.vp.sample(20_000, np.random.default_rng(0))
        ).mean(axis=0).tolist(),
    }


def _write_log(path, result, per_iter_rows):
    tail = {"final": True, **_result_summary(result),
            "vp": result.vp.to_dict(), "space": result.space.to_dict()}
    with open(path, "w") as fh:
        for row in per_iter_rows:
            fh.write(json.dumps(sanitize_row(row)) + "\n")
        fh.write(json.dumps(tail) + "\n")


def cmd_run(args) -> int:
    if args.problem is not None:
        result, final = run_one(args.problem, args.acq, args.seed,
                                args.budget, n_sim=args.n_sim,
                                sigma_obs=args.sigma_obs,
                                sigma_sigma=args.sigma_sigma,
                                jsonl_path=args.out)
        summary = _result_summary(result)
        if final is not None:
            summary.update(sanitize_row(
                {k: v for k, v in final.as_dict().items()
                 if k in ("lml_loss", "mmtv", "gskl")}))
        print(json.dumps(summary, indent=2))
        return 0

    bounds = json.loads(Path(args.bounds).read_text())
    space = ParamSpace(np.asarray(bounds["lb"], float),
                       np.asarray(bounds["ub"], float),
                       np.asarray(bounds["plb"], float),
                       np.asarray(bounds["pub"], float))
    options = EngineOptions(budget=args.budget, acq=args.acq,
                            seed=args.seed)
    rows = []
    t0 = time.perf_counter()

    def on_iteration(rec, *unused):
        row = rec.as_dict()
        row["wall_s"] = time.perf_counter() - t0
        rows.append(row)

    with ExternalTarget(args.target_cmd, space.D,
                        run_id=f"run{args.seed}") as target:
        result = run_vbmc(target, space, options, callback=on_iteration)
    if args.out:
        _write_log(args.out, result, rows)
    print(json.dumps(_result_summary(result), indent=2))
    return 0


def cmd_bench(args) -> int:
    config = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.seeds is not None:
        config["seeds"] = args.seeds
    csv_path = run_benchmark(config, args.out or Path("bench_out"))
    print(f"summary written to {csv_path}")
    return 0


def cmd_metrics(args) -> int:
    _, final = load_run(args.run)
    if "vp" not in final or "space" not in final:
        print("run log has no serialized posterior in its final line",
              file=sys.stderr)
        return 1
    truth = json.loads(Path(args.truth).read_text())
    vp = VariationalPosterior.from_dict(final["vp"])
    space = ParamSpace.from_dict(final["space"])
    elbo = final.get("elbo")
    rec = evaluate_against_truth(
        vp, space, elbo if elbo is not None else np.nan, truth,
        np.random.default_rng(args.seed))
    out = sanitize_row({"lml_loss": rec.lml_loss, "mmtv": rec.mmtv,
                        "gskl": rec.gskl})
    print(json.dumps(out, indent=2))
    return 0


def cmd_demo_banana(args) -> int:
    problem = get_problem("banana")
    rng = np.random.default_rng(args.seed + 1_000_003)
    target = problem.make_target(rng, sigma_obs=args.sigma_obs)
    options = EngineOptions(budget=args.budget or 100, acq=args.acq,
                            seed=args.seed)
    result = run_vbmc(target, problem.space, options)
    summary = _result_summary(result)
    if problem.truth is not None:
        summary["true_lml"] = problem.truth["lml"]
        summary["elbo_error"] = abs(summary["elbo"]
                                    - problem.truth["lml"])
        m = evaluate_against_truth(result.vp, result.space,
                                   result.elbo.elbo_mean, problem.truth,
                                   np.random.default_rng(0))
        summary["mmtv"] = m.mmtv
        summary["gskl"] = m.gskl
    print(json.dumps(summary, indent=2))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="vbmc",
        description="Variational Bayesian Monte Carlo for noisy "
                    "log-likelihood targets.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run inference")
    group = p_run.add_mutually_exclusive_group(required=True)
    group.add_argument("--problem", choices=PROBLEM_NAMES)
    group.add_argument("--target-cmd",
                       help="command line of an external worker process")
    p_run.add_argument("--bounds",
                       help="JSON file with lb/ub/plb/pub "
                            "(required with --target-cmd)")
    p_run.add_argument("--n-sim", type=int, default=100)
    p_run.add_argument("--sigma-obs", type=float, default=1.0)
    p_run.add_argument("--sigma-sigma", type=float, default=0.0)
    p_run.add_argument("--acq", choices=ACQ_KINDS, default="viqr")
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--budget", type=int, default=None,
                       help="evaluation budget (default: 50*(D+2))")
    p_run.add_argument("--out", type=Path, default=None,
                       help="JSONL run log path")
    p_run.set_defaults(func=cmd_run)

    p_bench = sub.add_parser("bench", help="run the benchmark grid")
    p_bench.add_argument("--config", help="JSON benchmark config")
    p_bench.add_argument("--seeds", type=int, nargs="+", default=None)
    p_bench.add_argument("--out", type=Path, default=None)
    p_bench.set_defaults(func=cmd_bench)

    p_metrics = sub.add_parser(
        "metrics", help="score a saved run log against a truth bundle")
    p_metrics.add_argument("--run", required=True,
                           help="JSONL run log written by `vbmc run`")
    p_metrics.add_argument("--truth", required=True,
                           help="ground-truth bundle JSON")
    p_metrics.add_argument("--seed", type=int, default=0)
    p_metrics.set_defaults(func=cmd_metrics)

    p_demo = sub.add_parser("demo-banana", help="quick 2-D noisy demo")
    p_demo.add_argument("--sigma-obs", type=float, default=1.0)
    p_demo.add_argument("--acq", choices=ACQ_KINDS, default="viqr")
    p_demo.add_argument("--seed", type=int, default=0)
    p_demo.add_argument("--budget", type=int, default=None)
    p_demo.set_defaults(func=cmd_demo_banana)

    args = parser.parse_args(argv)
    if (args.command == "run" and args.target_cmd is not None
            and args.bounds is None):
        parser.error("--target-cmd requires --bounds")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
