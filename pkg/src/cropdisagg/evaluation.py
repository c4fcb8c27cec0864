"""Error metrics, paired rank tests and model-comparison reports.

Conventions: residual = predicted - reported; quartiles use linear
interpolation between order statistics (numpy's default, Hyndman-Fan
type 7); zero differences are discarded before the signed-rank test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import (
    EmptyInputError,
    MissingCoverageError,
    NonPositiveMeanError,
    TooFewPairsError,
    UnpairedDataError,
)

EXACT_MAX_N = 20
MIN_PAIRS = 5


def nrmse(predictions, reported) -> float:
    """Root-mean-squared error as a percentage of the mean reported value."""
    p = np.asarray(predictions, dtype=float)
    r = np.asarray(reported, dtype=float)
    if p.size == 0 or p.shape != r.shape:
        raise EmptyInputError("nrmse needs paired, non-empty inputs")
    mu = r.mean()
    if not mu > 0:
        raise NonPositiveMeanError(f"mean reported value must be positive, got {mu}")
    return float(100.0 * np.sqrt(np.mean((p - r) ** 2)) / mu)


# ---------------------------------------------------------------- Wilcoxon


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    pvalue: float
    n: int
    method: str


def _exact_null_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """Number of sign assignments giving each doubled positive-rank sum.

    Ranks are doubled so average ranks (half-integers) become integers; the
    recursion adds one rank at a time, which counts all 2**n assignments.
    """
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        r = int(r)
        nxt = counts.copy()
        nxt[r:] += counts[: total + 1 - r]
        counts = nxt
    return counts


def wilcoxon_signed_rank(residuals_a, residuals_b, method: str = "auto") -> WilcoxonResult:
    """Two-sided paired signed-rank test on ``a - b``.

    ``method`` is ``"exact"`` (full null distribution), ``"approx"`` (normal
    with tie and continuity corrections) or ``"auto"``: exact up to 20
    non-zero pairs, approximate beyond.
    """
    a = np.asarray(residuals_a, dtype=float)
    b = np.asarray(residuals_b, dtype=float)
    if a.shape != b.shape:
        raise UnpairedDataError(f"residual vectors differ in length: {a.shape} vs {b.shape}")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n < MIN_PAIRS:
        raise TooFewPairsError(f"{n} non-zero differences; need at least {MIN_PAIRS}")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "approx"
    if method == "exact":
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = _exact_null_counts(doubled)
        tail = int(counts[: int(round(2 * w)) + 1].sum())
        p = min(1.0, 2.0 * tail / float(2**n))
    elif method == "approx":
        mu = n * (n + 1) / 4.0
        _, tie_sizes = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_sizes**3 - tie_sizes)) / 48.0
        z = max(abs(w - mu) - 0.5, 0.0) / math.sqrt(var)
        p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    else:
        raise ValueError(f"unknown method {method!r}")
    return WilcoxonResult(w, p, n, method)


# ---------------------------------------------------------------- box statistics


@dataclass(frozen=True)
class BoxStats:
    median: float
    q1: float
    q3: float
    iqr: float
    whisker_low: float
    whisker_high: float


def residual_boxstats(residuals) -> BoxStats:
    """Quartiles (linear interpolation) and Tukey whiskers at 1.5 IQR.

    Whiskers sit at the most extreme observations inside the fences.
    """
    r = np.asarray(residuals, dtype=float)
    if r.size == 0:
        raise EmptyInputError("box statistics need at least one residual")
    q1, med, q3 = np.percentile(r, [25, 50, 75])
    iqr = q3 - q1
    lo = r[r >= q1 - 1.5 * iqr].min()
    hi = r[r <= q3 + 1.5 * iqr].max()
    return BoxStats(float(med), float(q1), float(q3), float(iqr), float(lo), float(hi))


# ---------------------------------------------------------------- residual sets


@dataclass
class ResidualSet:
    """Predictions of one model at one level, keyed by (region, year)."""

    model: str
    level: str
    rows: dict[tuple[str, int], tuple[float, float, str]] = field(default_factory=dict)

    def add(self, region: str, year: int, predicted: float, reported: float, country: str) -> None:
        self.rows[(region, int(year))] = (float(predicted), float(reported), country)

    @property
    def keys(self) -> list[tuple[str, int]]:
        return sorted(self.rows)

    def arrays(self, keys=None):
        keys = self.keys if keys is None else keys
        pred = np.array([self.rows[k][0] for k in keys])
        rep = np.array([self.rows[k][1] for k in keys])
        return pred, rep

    def residuals(self, keys=None) -> np.ndarray:
        pred, rep = self.arrays(keys)
        return pred - rep

    def countries(self, keys=None) -> list[str]:
        keys = self.keys if keys is None else keys
        return [self.rows[k][2] for k in keys]


def _rank_corr(x: np.ndarray, y: np.ndarray) -> float:
    """Spearman correlation; 0.0 when either side is constant."""
    if x.size < 2 or np.all(x == x[0]) or np.all(y == y[0]):
        return 0.0
    rx, ry = rankdata(x), rankdata(y)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    return float(rx @ ry / math.sqrt((rx @ rx) * (ry @ ry)))


def _spread(v: np.ndarray) -> float:
    """Population standard deviation, exactly 0.0 for a constant vector.

    ``np.std`` can leave a few ulp behind when the mean of identical values
    rounds, so the constant case is short-circuited.
    """
    return 0.0 if np.all(v == v[0]) else float(v.std())


def spatial_variability(
    forecasts_with_trend: Mapping[str, float],
    forecasts_no_trend: Mapping[str, float],
    truth: Mapping[str, float],
    parent_id: str,
    year: int,
    children: Sequence[str] | None = None,
    extra: Mapping[str, Mapping[str, float]] | None = None,
) -> tuple[list[dict], dict]:
    """Per-child forecasts against truth inside one parent-year.

    Mappings are child id -> yield. ``extra`` adds further named columns
    (e.g. the naive trend). The summary holds the within-parent population
    standard deviation of each column, the mean residual of each forecast
    column and its rank correlation with truth (0.0 for constant columns).
    """
    kids = sorted(children if children is not None else truth)
    columns = {"with_trend": forecasts_with_trend, "no_trend": forecasts_no_trend, **(extra or {})}
    for name, col in {"truth": truth, **columns}.items():
        missing = [c for c in kids if c not in col]
        if missing:
            raise MissingCoverageError(f"{name} lacks {missing[:3]} for ({parent_id}, {year})")
    t = np.array([truth[c] for c in kids])
    rows = []
    for i, c in enumerate(kids):
        row = {"parent_id": parent_id, "year": int(year), "region_id": c, "truth": float(t[i])}
        row.update({name: float(col[c]) for name, col in columns.items()})
        rows.append(row)
    summary = {"parent_id": parent_id, "year": int(year), "n_children": len(kids), "sd_truth": _spread(t)}
    for name, col in columns.items():
        v = np.array([col[c] for c in kids])
        summary[f"sd_{name}"] = _spread(v)
        summary[f"mean_residual_{name}"] = float(np.mean(v - t))
        summary[f"rank_corr_{name}"] = _rank_corr(v, t)
    return rows, summary


# ---------------------------------------------------------------- reports


def _model_block(rs: ResidualSet, keys) -> dict:
    pred, rep = rs.arrays(keys)
    resid = pred - rep
    box = residual_boxstats(resid)
    countries = rs.countries(keys)
    per_country = {}
    for c in sorted(set(countries)):
        m = np.array([x == c for x in countries])
        per_country[c] = nrmse(pred[m], rep[m])
    return {
        "n": len(keys),
        "nrmse": nrmse(pred, rep),
        "nrmse_by_country": per_country,
        "median_residual": box.median,
        "q1": box.q1,
        "q3": box.q3,
        "iqr": box.iqr,
        "whisker_low": box.whisker_low,
        "whisker_high": box.whisker_high,
        "mean_residual": float(resid.mean()),
    }


def build_report(residual_sets: Sequence[ResidualSet], reference: str) -> dict:
    """Per-model metrics plus Wilcoxon p-values of the reference against every other model.

    All sets must share one level and cover the same (region, year) keys.
    """
    if not residual_sets:
        raise EmptyInputError("no residual sets")
    keys = residual_sets[0].keys
    for rs in residual_sets:
        if rs.keys != keys:
            raise UnpairedDataError(f"{rs.model} is not paired with {residual_sets[0].model}")
    by_name = {rs.model: rs for rs in residual_sets}
    if reference not in by_name:
        raise KeyError(f"reference model {reference!r} not among {sorted(by_name)}")
    ref_resid = by_name[reference].residuals(keys)
    models = {}
    for rs in residual_sets:
        block = _model_block(rs, keys)
        if rs.model == reference:
            block["p_value"] = None
            block["wilcoxon_statistic"] = None
        else:
            try:
                res = wilcoxon_signed_rank(ref_resid, rs.residuals(keys))
                block["p_value"], block["wilcoxon_statistic"] = res.pvalue, res.statistic
            except TooFewPairsError:
                block["p_value"], block["wilcoxon_statistic"] = 1.0, 0.0
        models[rs.model] = block
    return {"level": residual_sets[0].level, "reference": reference, "n": len(keys), "models": models}
