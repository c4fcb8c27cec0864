"""End-to-end experiment: split, tune, train, forecast, compare.

``run_experiment`` is what the CLI's ``train`` + ``evaluate`` do in one
process; the pieces are exposed separately for the CLI and for tests.
"""

from __future__ import annotations

import csv
import functools
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import baselines as bl
from . import evaluation as ev
from . import weaksup as ws
from .config import config_hash
from .dataio import BatchList, Dataset, TemporalSplit, assemble_batches, make_temporal_split, standardize
from .encoders import N_TREND
from .errors import EmptyBatchListError
from .hierarchy import RegionHierarchy

log = logging.getLogger(__name__)

BASELINES = ("naive_trend", "trend_l3", "trend_l2", "gbdt_l3", "gbdt_l2")
CHILD_LEVEL, PARENT_LEVEL = "NUTS3", "NUTS2"
FORECAST_COLUMNS = ["model", "variant", "level", "region_id", "year", "yield_hat", "fraction_hat", "area_hat"]
DEFAULT_GBDT_GRID = tuple((n, d, e) for n in (100, 200) for d in (2, 3) for e in (0.05, 0.1))


@dataclass
class RunConfig:
    seed: int = 0
    season_cutoff: int | None = None  # default: round(5/6 * T)
    lr_grid: tuple[float, ...] = ws.DEFAULT_LR_GRID
    l2_grid: tuple[float, ...] = ws.DEFAULT_L2_GRID
    max_epochs: int = 60
    units_per_step: int = 8
    gbdt_grid: tuple[tuple[int, int, float], ...] = DEFAULT_GBDT_GRID
    gbdt_min_samples_leaf: int = 5
    workers: int = 1

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        v = dict(values)
        for k in ("lr_grid", "l2_grid"):
            if k in v:
                v[k] = tuple(float(x) for x in v[k])
        if "gbdt_grid" in v:
            v["gbdt_grid"] = tuple((int(n), None if d is None else int(d), float(e)) for n, d, e in v["gbdt_grid"])
        unknown = sorted(set(v) - set(cls.__dataclass_fields__))
        if unknown:
            from .errors import InvalidConfigError

            raise InvalidConfigError(f"unknown run config keys: {unknown}")
        return cls(**v)

    def cutoff_for(self, T: int) -> int:
        return self.season_cutoff if self.season_cutoff else max(1, int(round(T * 5 / 6)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("workers")
        return d


def workers_from_env(default: int = 1) -> int:
    try:
        return max(1, int(os.environ.get("DISAGG_THREADS", default)))
    except ValueError:
        return default


# ---------------------------------------------------------------- preparation


@dataclass
class Prepared:
    hierarchy: RegionHierarchy
    raw: Dataset
    scaled: Dataset
    split: TemporalSplit
    cutoff: int
    folds: list[tuple[BatchList, BatchList]]
    pre_validation: BatchList
    validation: BatchList
    train: BatchList
    test: BatchList


def prepare(dataset: Dataset, hierarchy: RegionHierarchy, cfg: RunConfig) -> Prepared:
    split = make_temporal_split(dataset.years)
    scaled, _ = standardize(dataset, split.train_years)
    cutoff = cfg.cutoff_for(dataset.T)
    batches = functools.partial(assemble_batches, scaled, hierarchy, season_cutoff=cutoff)
    folds = [(batches(tr), batches([val])) for tr, val in split.folds]
    first_val = split.validation_years[0]
    return Prepared(
        hierarchy=hierarchy,
        raw=dataset,
        scaled=scaled,
        split=split,
        cutoff=cutoff,
        folds=folds,
        pre_validation=batches([y for y in split.train_years if y < first_val]),
        validation=batches(split.validation_years),
        train=batches(split.train_years),
        test=batches(split.test_years),
    )


def require_folds(prep: Prepared) -> None:
    """Fail early when a tuning fold has no usable parent-years."""
    for k, (tr, va) in enumerate(prep.folds, start=1):
        if not tr or not va:
            val_year = prep.split.folds[k - 1][1]
            raise EmptyBatchListError(
                f"fold {k} (validation year {val_year}) has no {'training' if not tr else 'validation'} "
                f"parent-years; trend features need {N_TREND} earlier labelled years, so tuning needs "
                f"at least 16 years of data"
            )


# ---------------------------------------------------------------- weak supervision


@dataclass
class WsRun:
    model: ws.WsModel
    tuning: ws.TuneResult
    selection: ws.TrainResult
    final: ws.TrainResult


def _model_factory(kind: str, channels: int, static_len: int, T: int, variant: str, seed: int):
    return functools.partial(ws.WsModel, kind, channels, static_len, T, variant, seed)


def train_ws(prep: Prepared, kind: str, variant: str, cfg: RunConfig) -> WsRun:
    """Tune (lr, l2) on the sliding folds, pick the epoch count on the joint
    validation years, then retrain on every pre-test year for that many epochs."""
    require_folds(prep)
    make = _model_factory(kind, prep.scaled.C, prep.scaled.S, prep.cutoff, variant, cfg.seed)
    base = ws.TrainConfig(max_epochs=cfg.max_epochs, units_per_step=cfg.units_per_step, seed=cfg.seed)
    grid = [(lr, lam) for lr in cfg.lr_grid for lam in cfg.l2_grid]
    tuning = ws.tune(make, prep.folds, grid, base, workers=cfg.workers)
    lr, lam = tuning.best
    tcfg = ws.TrainConfig(lr=lr, l2_lambda=lam, max_epochs=cfg.max_epochs,
                          units_per_step=cfg.units_per_step, seed=cfg.seed)
    probe = make()
    selection = ws.train(probe, prep.pre_validation, prep.validation, tcfg)
    epochs = max(1, selection.best_epoch)
    model = make()
    final = ws.train(model, prep.train, None, ws.TrainConfig(**{**asdict(tcfg), "max_epochs": epochs}))
    model.scaler = prep.scaled.scaler
    model.hyper.update({"lr": lr, "l2_lambda": lam, "epochs": epochs, "season_cutoff": prep.cutoff})
    return WsRun(model, tuning, selection, final)


def ws_records(model: ws.WsModel, batches: Sequence) -> list[ws.ForecastRecord]:
    return ws.forecast(model, batches, name=f"ws_{model.kind}")


# ---------------------------------------------------------------- baselines


def _child_history(ds: Dataset, child_index: int, year: int) -> np.ndarray | None:
    if ds.truth is None:
        return None
    cols = []
    for y in range(year - N_TREND, year):
        if y not in ds.years:
            return None
        v = ds.truth[child_index, ds.year_index(y), 0]
        if np.isnan(v):
            return None
        cols.append(v)
    return np.array(cols)


def _child_rows(prep: Prepared, batches) -> tuple[np.ndarray, np.ndarray, list[tuple[str, int]]]:
    ci = {c: i for i, c in enumerate(prep.raw.child_ids)}
    X, y, keys = [], [], []
    for b in batches:
        if b.truth_yield is None:
            continue
        summ = bl.season_summary(b.seasonal)
        for k, cid in enumerate(b.child_ids):
            hist = _child_history(prep.raw, ci[cid], b.year)
            if hist is None:
                continue
            X.append(np.concatenate([summ[k], b.static[k], hist]))
            y.append(b.truth_yield[k])
            keys.append((cid, b.year))
    return np.array(X), np.array(y), keys


def _parent_rows(batches) -> tuple[np.ndarray, np.ndarray]:
    X = [np.concatenate([bl.season_summary(b.seasonal).mean(axis=0), b.static.mean(axis=0), b.trend_raw])
         for b in batches]
    return np.array(X), np.array([b.label_yield for b in batches])


def _rec(model, level, region, year, y, frac=math.nan, area=math.nan):
    return ws.ForecastRecord(model, "baseline", level, region, int(year), float(y), float(frac), float(area))


def baseline_records(prep: Prepared, which: Sequence[str], cfg: RunConfig) -> tuple[list[ws.ForecastRecord], dict]:
    """Forecast records for the requested baselines on the test batches."""
    out: list[ws.ForecastRecord] = []
    info: dict = {}
    test = prep.test
    has_truth = prep.raw.truth is not None
    ci = {c: i for i, c in enumerate(prep.raw.child_ids)}
    hist_years = list(range(-N_TREND, 0))

    if "naive_trend" in which:
        for b in test:
            v = bl.trend_fit_predict(b.trend_raw, hist_years, 0)
            out += [_rec("naive_trend", CHILD_LEVEL, c, b.year, v) for c in b.child_ids]
    if "trend_l3" in which and has_truth:
        for b in test:
            for cid in b.child_ids:
                hist = _child_history(prep.raw, ci[cid], b.year)
                if hist is None:
                    raise bl.MissingHistoryError(f"no child yield history for ({cid}, {b.year})")
                out.append(_rec("trend_l3", CHILD_LEVEL, cid, b.year, bl.trend_fit_predict(hist, hist_years, 0)))
    if "trend_l2" in which:
        for b in test:
            out.append(_rec("trend_l2", PARENT_LEVEL, b.parent_id, b.year, bl.trend_fit_predict(b.trend_raw, hist_years, 0)))

    base = bl.GbdtConfig(min_samples_leaf=cfg.gbdt_min_samples_leaf, seed=cfg.seed)
    if {"gbdt_l3", "gbdt_l2"} & set(which):
        require_folds(prep)
    if "gbdt_l3" in which and has_truth:
        folds = []
        for tr, va in prep.folds:
            Xt, yt, _ = _child_rows(prep, tr)
            Xv, yv, _ = _child_rows(prep, va)
            folds.append((Xt, yt, Xv, yv))
        best, table = bl.gbdt_tune(folds, cfg.gbdt_grid, base)
        Xt, yt, _ = _child_rows(prep, prep.train)
        model = bl.gbdt_fit(Xt, yt, best)
        Xs, _, keys = _child_rows(prep, test)
        for (cid, year), v in zip(keys, bl.gbdt_predict(model, Xs)):
            out.append(_rec("gbdt_l3", CHILD_LEVEL, cid, year, v))
        info["gbdt_l3"] = {"best": asdict(best), "table": table}
    if "gbdt_l2" in which:
        folds = [(*_parent_rows(tr), *_parent_rows(va)) for tr, va in prep.folds]
        best, table = bl.gbdt_tune(folds, cfg.gbdt_grid, base)
        model = bl.gbdt_fit(*_parent_rows(prep.train), best)
        Xs, _ = _parent_rows(test)
        for b, v in zip(test, bl.gbdt_predict(model, Xs)):
            out.append(_rec("gbdt_l2", PARENT_LEVEL, b.parent_id, b.year, v))
        info["gbdt_l2"] = {"best": asdict(best), "table": table}
    return out, info


# ---------------------------------------------------------------- evaluation


def model_key(rec_or_model: str, variant: str) -> str:
    return rec_or_model if variant == "baseline" else f"{rec_or_model}/{variant}"


def residual_sets(records: Sequence[ws.ForecastRecord], prep: Prepared) -> dict[str, list[ev.ResidualSet]]:
    """Group forecasts into residual sets per level, pairing against truth / labels."""
    child_truth = {}
    parent_label = {}
    for b in prep.test:
        parent_label[(b.parent_id, b.year)] = (b.label_yield, b.country)
        if b.truth_yield is not None:
            for k, c in enumerate(b.child_ids):
                child_truth[(c, b.year)] = (b.truth_yield[k], b.country)
    sets: dict[tuple[str, str], ev.ResidualSet] = {}
    for r in records:
        ref = child_truth if r.level == CHILD_LEVEL else parent_label
        if (r.region_id, r.year) not in ref:
            continue
        key = (r.level, model_key(r.model, r.variant))
        rs = sets.setdefault(key, ev.ResidualSet(key[1], r.level))
        rep, country = ref[(r.region_id, r.year)]
        rs.add(r.region_id, r.year, r.yield_hat, rep, country)
    out: dict[str, list[ev.ResidualSet]] = {}
    for (level, _), rs in sets.items():
        out.setdefault(level, []).append(rs)
    return out


def pick_reference(names: Sequence[str]) -> str:
    ws_names = [n for n in names if n.startswith("ws_")]
    trend_first = [n for n in ws_names if n.endswith("/trend")]
    return (trend_first or ws_names or list(names))[0]


def spatial_tables(records: Sequence[ws.ForecastRecord], prep: Prepared, kind: str = "lstm"):
    """Per-child spatial-variability rows and per-parent-year summaries."""
    child = {}
    for r in records:
        if r.level == CHILD_LEVEL:
            child.setdefault(model_key(r.model, r.variant), {})[(r.region_id, r.year)] = r.yield_hat
    wt, nt = child.get(f"ws_{kind}/trend"), child.get(f"ws_{kind}/no_trend")
    if wt is None or nt is None:
        return [], []
    naive = child.get("naive_trend")
    rows, summaries = [], []
    for b in prep.test:
        if b.truth_yield is None:
            continue
        truth = dict(zip(b.child_ids, b.truth_yield))
        pick = lambda col: {c: col[(c, b.year)] for c in b.child_ids}  # noqa: E731
        extra = {"naive_trend": pick(naive)} if naive is not None else None
        r, s = ev.spatial_variability(pick(wt), pick(nt), truth, b.parent_id, b.year, b.child_ids, extra)
        rows += r
        summaries.append(s)
    return rows, summaries


def build_reports(records, prep: Prepared) -> dict:
    reports = {}
    for level, sets in sorted(residual_sets(records, prep).items()):
        sets = sorted(sets, key=lambda s: s.model)
        reports[level] = ev.build_report(sets, pick_reference([s.model for s in sets]))
    return reports


# ---------------------------------------------------------------- full experiment


@dataclass
class ExperimentResult:
    records: list[ws.ForecastRecord]
    reports: dict
    spatial_rows: list[dict]
    spatial_summary: list[dict]
    ws_runs: dict[str, WsRun] = field(default_factory=dict)
    baseline_info: dict = field(default_factory=dict)


def run_experiment(
    dataset: Dataset,
    hierarchy: RegionHierarchy,
    cfg: RunConfig,
    kinds: Sequence[str] = ("lstm",),
    variants: Sequence[str] = ("trend", "no_trend"),
    baselines: Sequence[str] = BASELINES,
) -> ExperimentResult:
    prep = prepare(dataset, hierarchy, cfg)
    records: list[ws.ForecastRecord] = []
    runs = {}
    for kind in kinds:
        for variant in variants:
            log.info("training ws_%s/%s", kind, variant)
            run = train_ws(prep, kind, variant, cfg)
            runs[f"ws_{kind}/{variant}"] = run
            records += ws_records(run.model, prep.test)
    base_recs, info = baseline_records(prep, baselines, cfg)
    records += base_recs
    reports = build_reports(records, prep)
    rows, summ = spatial_tables(records, prep, kinds[0]) if kinds else ([], [])
    return ExperimentResult(records, reports, rows, summ, runs, info)


# ---------------------------------------------------------------- output files


def header_line(seed: int, cfg_hash: str) -> str:
    return f"cropdisagg {__version__} seed={seed} config={cfg_hash}"


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns: Sequence[str], rows, header: str) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) if isinstance(row, dict) else _fmt(x) for c, x in
                        (zip(columns, [row[c] for c in columns]) if isinstance(row, dict) else zip(columns, row))])
    return path


def write_json(path, doc: dict, header: str) -> Path:
    path = Path(path)
    body = {"meta": header, **doc}
    path.write_text(json.dumps(body, sort_keys=True, indent=2, allow_nan=True) + "\n", encoding="utf-8")
    return path


def write_forecasts(path, records: Sequence[ws.ForecastRecord], header: str) -> Path:
    return write_csv(path, FORECAST_COLUMNS, [asdict(r) for r in records], header)


def read_forecasts(path) -> list[ws.ForecastRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        for r in rows:
            out.append(ws.ForecastRecord(r["model"], r["variant"], r["level"], r["region_id"], int(r["year"]),
                                         float(r["yield_hat"]), float(r["fraction_hat"]), float(r["area_hat"])))
    return out


def report_rows(reports: dict) -> list[dict]:
    rows = []
    for level, rep in sorted(reports.items()):
        for name, m in sorted(rep["models"].items()):
            rows.append({
                "level": level, "model": name, "reference": rep["reference"], "n": m["n"],
                "nrmse": m["nrmse"], "median_residual": m["median_residual"], "q1": m["q1"], "q3": m["q3"],
                "iqr": m["iqr"], "mean_residual": m["mean_residual"],
                "p_value": "" if m["p_value"] is None else m["p_value"],
            })
    return rows


REPORT_COLUMNS = ["level", "model", "reference", "n", "nrmse", "median_residual", "q1", "q3", "iqr",
                  "mean_residual", "p_value"]


def write_evaluation(out_dir, result: ExperimentResult, header: str) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [
        write_forecasts(out / "forecasts.csv", result.records, header),
        write_json(out / "report.json", {"reports": result.reports, "spatial_variability": result.spatial_summary},
                   header),
        write_csv(out / "report.csv", REPORT_COLUMNS, report_rows(result.reports), header),
    ]
    if result.spatial_rows:
        cols = list(result.spatial_rows[0])
        paths.append(write_csv(out / "spatial_variability.csv", cols, result.spatial_rows, header))
    return paths


def run_hash(cfg: RunConfig, extra: dict | None = None) -> str:
    return config_hash({**cfg.to_dict(), **(extra or {})})
