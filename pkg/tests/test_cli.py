import json
import sys
import textwrap

import numpy as np
import pytest

from vbmc.cli import main


def test_cli_requires_subcommand(capsys):
    with pytest.raises(SystemExit):
        main([])


def test_cli_run_requires_target(capsys):
    with pytest.raises(SystemExit):
        main(["run"])


def test_cli_target_cmd_requires_bounds(capsys):
    with pytest.raises(SystemExit):
        main(["run", "--target-cmd", "worker"])


def test_cli_run_banana_and_metrics(tmp_path, capsys):
    out = tmp_path / "run.jsonl"
    rc = main(["run", "--problem", "banana", "--acq", "pro",
               "--seed", "1", "--budget", "35", "--out", str(out)])
    assert rc == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["n_evals"] <= 35
    assert "lml_loss" in summary

    # Score the saved log against the shipped truth bundle.
    from importlib import resources
    truth = resources.files("vbmc").joinpath("data", "truth_banana.json")
    rc = main(["metrics", "--run", str(out), "--truth", str(truth)])
    assert rc == 0
    scored = json.loads(capsys.readouterr().out)
    assert set(scored) == {"lml_loss", "mmtv", "gskl"}
    assert scored["lml_loss"] == pytest.approx(summary["lml_loss"],
                                               abs=1e-6)


def test_cli_run_external_worker(tmp_path, capsys):
    worker = tmp_path / "worker.py"
    worker.write_text(textwrap.dedent("""
        import sys
        line = sys.stdin.readline().split()
        D = int(line[2])
        print("READY", flush=True)
        for line in sys.stdin:
            parts = line.split()
            if parts[:2] != ["EVAL", "v1"]:
                continue
            x = [float(v) for v in parts[3:]]
            y = -0.5 * sum(v * v for v in x)
            print(f"RET {y!r} 0.5", flush=True)
    """))
    bounds = tmp_path / "bounds.json"
    bounds.write_text(json.dumps({"lb": [-5, -5], "ub": [5, 5],
                                  "plb": [-2, -2], "pub": [2, 2]}))
    out = tmp_path / "ext.jsonl"
    rc = main(["run", "--target-cmd", f"{sys.executable} {worker}",
               "--bounds", str(bounds), "--budget", "30",
               "--seed", "2", "--out", str(out)])
    assert rc == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["n_evals"] <= 30
    mean = np.asarray(summary["posterior_mean_original"])
    assert np.all(np.abs(mean) < 1.5)
    lines = [json.loads(ln) for ln in out.read_text().splitlines()]
    assert lines[-1]["final"] is True
    assert "vp" in lines[-1]
    for row in lines[:-1]:
        assert set(row) >= {"t", "evals", "elbo", "elbo_sd", "K", "r",
                            "r1", "r2", "r3", "whitened", "wall_s"}


def test_cli_bench(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(
        {"problems": ["banana"], "acqs": ["pro"], "seeds": [0],
         "budget_multiplier": 8,
         "overrides": {"metric_samples": 5000, "vp_steps": 80,
                       "vp_steps_final": 120, "n_init": 8}}))
    rc = main(["bench", "--config", str(cfg), "--out", str(tmp_path)])
    assert rc == 0
    assert (tmp_path / "summary.csv").exists()


def test_cli_demo_banana(capsys):
    rc = main(["demo-banana", "--budget", "30", "--seed", "4"])
    assert rc == 0
    summary = json.loads(capsys.readouterr().out)
    assert "elbo" in summary and "mmtv" in summary
