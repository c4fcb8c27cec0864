"""The three command-line steps, run on a small world in a temporary folder.

    cropdisagg synth    --config synth.toml --out world
    cropdisagg train    --data world --model lstm --variant trend --out run_trend --config run.toml
    cropdisagg evaluate --data world --checkpoints run_trend/checkpoint.json ... --out eval

Config files are flat ``key = value`` lines. Every output file starts with a
``# cropdisagg <version> seed=<s> config=<hash>`` comment, and reruns with
the same seed are byte-identical.

Run: ``python demos/04_command_line.py``  (under a minute)
"""

import json
import subprocess
import sys
import tempfile
from pathlib import Path


def cli(*args):
    cmd = [sys.executable, "-m", "cropdisagg", *map(str, args)]
    print("$ cropdisagg", " ".join(map(str, args)))
    subprocess.run(cmd, check=True)


with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    (tmp / "synth.toml").write_text(
        "parents_per_country = 2\nchildren_per_parent = 3\nn_years = 16\nT = 12\nS = 9\nseed = 1\n")
    # tiny grid so the demo is quick; the defaults tune over 16 points
    (tmp / "run.toml").write_text(
        "lr_grid = [0.003]\nl2_grid = [0.0]\nmax_epochs = 5\n"
        "gbdt_grid = [[20, 2, 0.1]]\ngbdt_min_samples_leaf = 2\n")

    cli("synth", "--config", tmp / "synth.toml", "--out", tmp / "world")
    print("  ", sorted(p.name for p in (tmp / "world").iterdir()))

    for variant in ("trend", "no_trend"):
        cli("train", "--data", tmp / "world", "--variant", variant, "--out", tmp / f"run_{variant}",
            "--config", tmp / "run.toml", "--seed", 0)
    hyper = json.loads((tmp / "run_trend" / "hyperparameters.json").read_text())
    print("   chosen:", {k: hyper[k] for k in ("lr", "l2_lambda", "epochs")})

    cli("evaluate", "--data", tmp / "world",
        "--checkpoints", tmp / "run_trend/checkpoint.json", tmp / "run_no_trend/checkpoint.json",
        "--baselines", "all", "--out", tmp / "eval", "--config", tmp / "run.toml", "--seed", 0)

    print((tmp / "eval" / "report.csv").read_text())
    lines = (tmp / "eval" / "forecasts.csv").read_text().splitlines()
    print("\n".join(lines[:4]), f"\n... {len(lines) - 2} forecast rows")
