import hashlib
import json
import subprocess
import sys

import pytest

from cropdisagg import __version__
from cropdisagg.cli import main
from cropdisagg.config import write_flat_config
from cropdisagg.weaksup import WsModel


def digests(folder):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(folder.iterdir())}


def test_version_subprocess():
    out = subprocess.run([sys.executable, "-m", "cropdisagg", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip() == f"cropdisagg {__version__}"


def test_missing_config_is_usage_error(tmp_path, capsys):
    assert main(["synth", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path / "w")]) == 2
    err = capsys.readouterr().err
    assert "InvalidConfigError" in err and "usage: cropdisagg synth" in err


def test_argparse_errors_exit_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--data", str(tmp_path)])
    assert exc.value.code == 2


def test_synth_files_and_determinism(tmp_path):
    cfg = tmp_path / "s.toml"
    write_flat_config(cfg, {"n_years": 12, "parents_per_country": 1, "children_per_parent": 2, "T": 8})
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    assert sorted(digests(tmp_path / "a")) == sorted(
        ["regions.csv", "seasonal.csv", "static.csv", "labels_nuts2.csv", "truth_nuts3.csv"])
    assert digests(tmp_path / "a") == digests(tmp_path / "b")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "c"), "--seed", "5"]) == 0
    assert digests(tmp_path / "c") != digests(tmp_path / "a")


def test_synth_invalid_value(tmp_path):
    cfg = tmp_path / "s.toml"
    cfg.write_text("noise_sd = -2\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "w")]) == 2


def test_train_rejects_same_dirs(tiny_data, tiny_config):
    assert main(["train", "--data", str(tiny_data), "--out", str(tiny_data), "--config", str(tiny_config)]) == 2


def test_train_schema_failure(tiny_data, tiny_config, tmp_path):
    bad = tmp_path / "bad"
    bad.mkdir()
    for p in tiny_data.iterdir():
        (bad / p.name).write_bytes(p.read_bytes())
    (bad / "labels_nuts2.csv").write_text("parent,year\nX,2000\n")
    code = main(["train", "--data", str(bad), "--out", str(tmp_path / "o"), "--config", str(tiny_config)])
    assert code == 3


@pytest.fixture(scope="module")
def trained(tiny_data, tiny_config, tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    for variant in ("trend", "no_trend"):
        argv = ["train", "--data", str(tiny_data), "--model", "lstm", "--variant", variant,
                "--out", str(root / variant), "--config", str(tiny_config), "--seed", "0"]
        assert main(argv) == 0
    return root


def test_train_outputs(trained):
    names = set(digests(trained / "trend"))
    assert names == {"checkpoint.json", "train_log.csv", "train_log_final.csv", "tuning.csv", "hyperparameters.json"}
    log = (trained / "trend" / "train_log.csv").read_text().splitlines()
    assert log[0].startswith("# cropdisagg") and "seed=0" in log[0]
    assert log[1] == "epoch,train_loss,val_loss"
    hyper = json.loads((trained / "trend" / "hyperparameters.json").read_text())
    assert hyper["lr"] == 0.003 and hyper["variant"] == "trend" and hyper["epochs"] >= 1
    m = WsModel.load(trained / "no_trend" / "checkpoint.json")
    assert m.variant == "no_trend" and m.kind == "lstm"
    assert m.checkpoint_header["meta"].startswith("cropdisagg")


def evaluate(trained, tiny_data, tiny_config, out, baselines="all"):
    return main(["evaluate", "--data", str(tiny_data), "--checkpoints",
                 str(trained / "trend" / "checkpoint.json"), str(trained / "no_trend" / "checkpoint.json"),
                 "--baselines", baselines, "--out", str(out), "--config", str(tiny_config), "--seed", "0"])


def test_evaluate_outputs_and_rerun(trained, tiny_data, tiny_config, tmp_path):
    assert evaluate(trained, tiny_data, tiny_config, tmp_path / "e1") == 0
    files = digests(tmp_path / "e1")
    assert set(files) == {"forecasts.csv", "report.json", "report.csv", "spatial_variability.csv"}
    rows = (tmp_path / "e1" / "forecasts.csv").read_text().splitlines()
    assert rows[1] == "model,variant,level,region_id,year,yield_hat,fraction_hat,area_hat"
    tags = {tuple(r.split(",")[:2]) for r in rows[2:]}
    assert tags == {("ws_lstm", "trend"), ("ws_lstm", "no_trend"), ("naive_trend", "baseline"),
                    ("trend_l3", "baseline"), ("trend_l2", "baseline"), ("gbdt_l3", "baseline"),
                    ("gbdt_l2", "baseline")}
    report = json.loads((tmp_path / "e1" / "report.json").read_text())
    child = report["reports"]["NUTS3"]["models"]
    parent = report["reports"]["NUTS2"]["models"]
    for name in ("naive_trend", "trend_l3", "gbdt_l3"):
        assert 0 <= child[name]["p_value"] <= 1
    for name in ("trend_l2", "gbdt_l2"):
        assert 0 <= parent[name]["p_value"] <= 1

    assert evaluate(trained, tiny_data, tiny_config, tmp_path / "e2") == 0
    assert digests(tmp_path / "e2") == files


def test_evaluate_matches_in_process_forecasts(trained, tiny_data, tiny_config, tmp_path):
    from cropdisagg import pipeline as pl
    from cropdisagg.dataio import load_dataset
    from cropdisagg.hierarchy import RegionHierarchy

    assert evaluate(trained, tiny_data, tiny_config, tmp_path / "e", baselines="none") == 0
    recs = pl.read_forecasts(tmp_path / "e" / "forecasts.csv")
    h = RegionHierarchy.from_csv(tiny_data / "regions.csv")
    prep = pl.prepare(load_dataset(tiny_data, h), h, pl.RunConfig())
    model = WsModel.load(trained / "trend" / "checkpoint.json")
    direct = [r for r in pl.ws_records(model, prep.test)]
    mine = [r for r in recs if r.variant == "trend"]
    assert [(r.region_id, r.year) for r in mine] == [(r.region_id, r.year) for r in direct]
    assert all(a.yield_hat == b.yield_hat for a, b in zip(mine, direct))


def test_evaluate_errors(trained, tiny_data, tiny_config, tmp_path):
    code = main(["evaluate", "--data", str(tiny_data), "--checkpoints", str(tmp_path / "missing.json"),
                 "--out", str(tmp_path / "o")])
    assert code == 3
    assert evaluate(trained, tiny_data, tiny_config, tmp_path / "o", baselines="gbdt_l4") == 2
    assert main(["evaluate", "--data", str(tiny_data), "--baselines", "none", "--out", str(tmp_path / "o")]) == 2
