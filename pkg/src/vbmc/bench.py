"""Reproducible benchmark harness.

Runs the inference engine over a grid of (problem, acquisition, seed)
configurations, logging one JSON line per iteration and summarizing the
final metrics per configuration with bootstrapped confidence intervals.
"""

from __future__ import annotations

import csv
import json
import time
from pathlib import Path

import numpy as np

from vbmc.engine import EngineOptions, run_vbmc
from vbmc.metrics import evaluate_against_truth
from vbmc.problems import get_problem

DEFAULT_CONFIG = {
    "problems": ["ricker"],
    "acqs": ["viqr"],
    "seeds": [0, 1, 2],
    "budget_multiplier": 50,
    "overrides": {},
}

# Target/metric settings accepted inside ``overrides`` (everything else
# is passed through to the engine options).
_TARGET_KEYS = ("budget", "n_sim", "sigma_obs", "sigma_sigma",
                "metric_samples")
_TARGET_DEFAULTS = {"budget": None, "n_sim": 100, "sigma_obs": 1.0,
                    "sigma_sigma": 0.0, "metric_samples": 50_000}


def _jsonable(value):
    """JSON-safe scalar: non-finite floats become None."""
    if isinstance(value, (float, np.floating)):
        return float(value) if np.isfinite(value) else None
    if isinstance(value, (np.integer,)):
        return int(value)
    return value


def sanitize_row(row: dict) -> dict:
    return {k: _jsonable(v) for k, v in row.items()}


def run_one(problem_name: str, acq: str, seed: int, budget: int = None,
            n_sim: int = 100, sigma_obs: float = 1.0,
            sigma_sigma: float = 0.0, jsonl_path=None,
            metric_samples: int = 50_000, engine_overrides: dict = None):
    """Run one configuration; returns (result, final metrics record).

    When ``jsonl_path`` is given, one JSON line is written per iteration
    plus a final line carrying the metrics and the serialized posterior,
    so a saved run can be re-scored later.
    """
    problem = get_problem(problem_name)
    rng = np.random.default_rng(seed + 1_000_003)
    target = problem.make_target(rng, n_sim=n_sim, sigma_obs=sigma_obs,
                                 sigma_sigma=sigma_sigma)
    options = EngineOptions(budget=budget, acq=acq, seed=seed,
                            **(engine_overrides or {}))
    metric_rng = np.random.default_rng(seed + 7)
    lines = []
    t_run0 = time.perf_counter()

    def on_iteration(record, vp, space, estimate):
        row = record.as_dict()
        row["wall_s"] = time.perf_counter() - t_run0
        if problem.truth is not None:
            m = evaluate_against_truth(vp, space, estimate.elbo_mean,
                                       problem.truth, metric_rng,
                                       n_samples=metric_samples)
            row.update(lml_loss=m.lml_loss, mmtv=m.mmtv, gskl=m.gskl)
        lines.append(sanitize_row(row))

    result = run_vbmc(target, problem.space, options,
                      callback=on_iteration)
    final = None
    if problem.truth is not None:
        final = evaluate_against_truth(
            result.vp, result.space, result.elbo.elbo_mean, problem.truth,
            metric_rng, n_samples=metric_samples)
        final.evaluations = result.n_evals
        final.seed = seed
        final.extra["elbo"] = float(result.elbo.elbo_mean)
        final.extra["wall_s"] = time.perf_counter() - t_run0
    if jsonl_path is not None:
        tail = {"final": True,
                "problem": problem_name, "acq": acq, "seed": seed,
                "evals": result.n_evals,
                "elbo": _jsonable(result.elbo.elbo_mean),
                "elbo_sd": _jsonable(result.elbo.elbo_sd),
                "success": bool(result.success),
                "message": result.message,
                "vp": result.vp.to_dict(),
                "space": result.space.to_dict()}
        if final is not None:
            tail.update(sanitize_row(final.as_dict()))
        with open(jsonl_path, "w") as fh:
            for row in lines:
                fh.write(json.dumps(row) + "\n")
            fh.write(json.dumps(tail) + "\n")
    return result, final


def load_run(jsonl_path):
    """Read a saved run log; returns (iteration rows, final row)."""
    rows = []
    final = None
    with open(jsonl_path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if row.get("final"):
                final = row
            else:
                rows.append(row)
    if final is None:
        raise ValueError(f"{jsonl_path}: no final line in run log")
    return rows, final


def bootstrap_median_ci(values, n_boot: int = 1000, level: float = 0.95,
                        rng: np.random.Generator = None):
    """Percentile bootstrap CI of the median."""
    rng = rng or np.random.default_rng(0)
    v = np.asarray(values, float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return np.nan, np.nan, np.nan
    meds = np.median(v[rng.integers(0, v.size, size=(n_boot, v.size))],
                     axis=1)
    alpha = 100 * (1.0 - level) / 2
    return (float(np.median(v)), float(np.percentile(meds, alpha)),
            float(np.percentile(meds, 100 - alpha)))


def run_benchmark(config: dict, out_dir) -> Path:
    """Run the full benchmark grid; returns the summary CSV path.

    ``config`` follows :data:`DEFAULT_CONFIG`: lists of problems,
    acquisitions, and seeds; a budget multiplier (budget is the
    multiplier times D + 2 per problem); and an ``overrides`` mapping
    tweaking target settings or any engine option.  Per-run JSONL logs
    and a CSV of medians with bootstrap 95% CIs are written under
    ``out_dir``.
    """
    cfg = {**DEFAULT_CONFIG, **(config or {})}
    overrides = dict(cfg.get("overrides") or {})
    tgt = {k: overrides.pop(k, _TARGET_DEFAULTS[k]) for k in _TARGET_KEYS}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as fh:
        json.dump(cfg, fh, indent=2)

    rows = []
    for problem in cfg["problems"]:
        D = get_problem(problem).space.D
        budget = (tgt["budget"] if tgt["budget"] is not None
                  else cfg["budget_multiplier"] * (D + 2))
        for acq in cfg["acqs"]:
            finals = []
            for seed in cfg["seeds"]:
                tag = f"{problem}_{acq}_seed{seed}"
                _, final = run_one(
                    problem, acq, seed, budget,
                    n_sim=tgt["n_sim"], sigma_obs=tgt["sigma_obs"],
                    sigma_sigma=tgt["sigma_sigma"],
                    jsonl_path=out_dir / f"{tag}.jsonl",
                    metric_samples=tgt["metric_samples"],
                    engine_overrides=overrides)
                if final is not None:
                    finals.append(final)
            if not finals:
                continue
            row = {"problem": problem, "acq": acq,
                   "n_seeds": len(finals)}
            for metric in ("lml_loss", "mmtv", "gskl", "wall_s"):
                vals = [f.as_dict().get(metric, np.nan) for f in finals]
                med, lo, hi = bootstrap_median_ci(vals)
                row[f"{metric}_median"] = med
                row[f"{metric}_ci_lo"] = lo
                row[f"{metric}_ci_hi"] = hi
            rows.append(row)

    csv_path = out_dir / "summary.csv"
    if rows:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return csv_path
