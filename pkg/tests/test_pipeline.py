import hashlib
import math

import pytest

from cropdisagg import pipeline as pl
from cropdisagg.config import read_flat_config, write_flat_config
from cropdisagg.errors import EmptyBatchListError, InvalidConfigError

from conftest import TINY_RUN


@pytest.fixture(scope="module")
def tiny_result(tiny_world):
    cfg = pl.RunConfig.from_dict({**TINY_RUN, "seed": 0})
    return pl.run_experiment(tiny_world.dataset, tiny_world.hierarchy, cfg)


def test_run_config_defaults_and_validation():
    cfg = pl.RunConfig()
    assert cfg.cutoff_for(36) == 30 and cfg.cutoff_for(12) == 10
    assert pl.RunConfig(season_cutoff=7).cutoff_for(36) == 7
    assert len(cfg.lr_grid) * len(cfg.l2_grid) == 16
    with pytest.raises(InvalidConfigError):
        pl.RunConfig.from_dict({"learning_rate": 0.1})
    assert "workers" not in cfg.to_dict()


def test_run_config_file_round_trip(tmp_path):
    cfg = pl.RunConfig(seed=3, gbdt_grid=((10, None, 0.5),), season_cutoff=9)
    write_flat_config(tmp_path / "r.toml", cfg.to_dict())
    assert pl.RunConfig.from_dict(read_flat_config(tmp_path / "r.toml")) == cfg


def test_workers_from_env(monkeypatch):
    monkeypatch.delenv("DISAGG_THREADS", raising=False)
    assert pl.workers_from_env() == 1
    monkeypatch.setenv("DISAGG_THREADS", "3")
    assert pl.workers_from_env() == 3
    monkeypatch.setenv("DISAGG_THREADS", "lots")
    assert pl.workers_from_env() == 1


def test_prepare_matches_split(tiny_world):
    prep = pl.prepare(tiny_world.dataset, tiny_world.hierarchy, pl.RunConfig())
    years = tiny_world.dataset.years
    assert prep.split.test_years == tuple(years[-5:])
    assert {b.year for b in prep.test} == set(years[-5:])
    assert all(b.seasonal.shape[1] == 10 for b in prep.train)
    assert max(b.year for b in prep.train) < min(prep.split.test_years)
    assert [len(va) for _, va in prep.folds] == [4] * 5


def test_short_record_fails_clearly(small_world):
    prep = pl.prepare(small_world.dataset, small_world.hierarchy, pl.RunConfig())
    with pytest.raises(EmptyBatchListError, match="16 years"):
        pl.train_ws(prep, "lstm", "trend", pl.RunConfig.from_dict(TINY_RUN))


def test_experiment_arms(tiny_result, tiny_world):
    tags = {pl.model_key(r.model, r.variant) for r in tiny_result.records}
    assert tags == {"ws_lstm/trend", "ws_lstm/no_trend", *pl.BASELINES}
    n_child = sum(len(tiny_world.hierarchy.children_of(p)) for p in tiny_world.dataset.parent_ids)
    for tag in ("ws_lstm/trend", "naive_trend", "trend_l3", "gbdt_l3"):
        assert sum(pl.model_key(r.model, r.variant) == tag and r.level == "NUTS3"
                   for r in tiny_result.records) == n_child * 5


def test_reports_pair_reference_with_every_arm(tiny_result):
    child = tiny_result.reports["NUTS3"]
    assert child["reference"] == "ws_lstm/trend"
    others = set(child["models"]) - {"ws_lstm/trend"}
    assert others == {"ws_lstm/no_trend", "naive_trend", "trend_l3", "gbdt_l3"}
    assert all(0 <= child["models"][m]["p_value"] <= 1 for m in others)
    parent = tiny_result.reports["NUTS2"]
    assert set(parent["models"]) == {"ws_lstm/trend", "ws_lstm/no_trend", "trend_l2", "gbdt_l2"}


def test_spatial_summary(tiny_result):
    assert len(tiny_result.spatial_summary) == 4 * 5
    assert all(s["sd_naive_trend"] == 0.0 for s in tiny_result.spatial_summary)
    assert any(s["sd_no_trend"] > 0 for s in tiny_result.spatial_summary)
    assert len(tiny_result.spatial_rows) == sum(s["n_children"] for s in tiny_result.spatial_summary)


def test_ws_model_carries_run_metadata(tiny_result):
    m = tiny_result.ws_runs["ws_lstm/trend"].model
    assert set(m.hyper) >= {"lr", "l2_lambda", "epochs", "season_cutoff"}
    assert m.scaler is not None and m.hyper["lr"] == 0.003


def _digests(folder):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(folder.iterdir())}


def test_evaluation_files_deterministic(tiny_world, tiny_result, tmp_path):
    h = pl.header_line(0, "abc")
    paths = pl.write_evaluation(tmp_path / "a", tiny_result, h)
    assert sorted(p.name for p in paths) == ["forecasts.csv", "report.csv", "report.json", "spatial_variability.csv"]
    assert all(p.read_text().startswith("# cropdisagg") or p.name == "report.json" for p in paths)
    assert '"meta": "cropdisagg' in (tmp_path / "a" / "report.json").read_text()

    again = pl.run_experiment(tiny_world.dataset, tiny_world.hierarchy, pl.RunConfig.from_dict({**TINY_RUN, "seed": 0}))
    pl.write_evaluation(tmp_path / "b", again, h)
    assert _digests(tmp_path / "a") == _digests(tmp_path / "b")


def test_forecasts_round_trip(tiny_result, tmp_path):
    path = pl.write_forecasts(tmp_path / "f.csv", tiny_result.records, "hdr")
    back = pl.read_forecasts(path)
    assert len(back) == len(tiny_result.records)
    for a, b in zip(back, tiny_result.records):
        assert (a.model, a.variant, a.level, a.region_id, a.year) == (b.model, b.variant, b.level, b.region_id, b.year)
        for f in ("yield_hat", "fraction_hat", "area_hat"):
            x, y = getattr(a, f), getattr(b, f)
            assert (math.isnan(x) and math.isnan(y)) or x == y
