"""Dataset loading, temporal splits, standardisation and parent-year batching.

On-disk layout of a data directory (all UTF-8 CSV, header row required,
lines starting with ``#`` are comments)::

    regions.csv       id,level,parent_id,country,zone,land_area_ha
    seasonal.csv      region_id,year,t,channel,value        (long form)
    static.csv        region_id,feature,value
    labels_nuts2.csv  parent_id,year,yield_t_ha,crop_area_ha
    truth_nuts3.csv   region_id,year,yield_t_ha,area_fraction  (optional)

Country and agro-environmental zone one-hot columns are derived from
``regions.csv`` and appended after the continuous static features.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .encoders import N_TREND
from .errors import (
    DataError,
    InconsistentShapeError,
    MissingLabelError,
    SchemaMismatchError,
    TooFewYearsError,
    UnknownRegionError,
)
from .hierarchy import Level, RegionHierarchy

SEASONAL_COLUMNS = ["region_id", "year", "t", "channel", "value"]
STATIC_COLUMNS = ["region_id", "feature", "value"]
LABEL_COLUMNS = ["parent_id", "year", "yield_t_ha", "crop_area_ha"]
TRUTH_COLUMNS = ["region_id", "year", "yield_t_ha", "area_fraction"]

FILES = {
    "regions": "regions.csv",
    "seasonal": "seasonal.csv",
    "static": "static.csv",
    "labels": "labels_nuts2.csv",
    "truth": "truth_nuts3.csv",
}


class ZeroVarianceWarning(UserWarning):
    pass


@dataclass
class Dataset:
    """Aligned arrays for one crop.

    ``seasonal`` is (children, years, T, C) and only meaningful where
    ``has_series`` is set. ``labels`` is (parents, years, 2) holding
    (yield t/ha, crop area ha), NaN when absent; ``truth`` is the same for
    children (yield, area fraction) and only exists for synthetic worlds.
    """

    child_ids: list[str]
    parent_ids: list[str]
    years: list[int]
    channel_names: list[str]
    seasonal: np.ndarray
    has_series: np.ndarray
    static_names: list[str]
    static: np.ndarray
    onehot: np.ndarray
    labels: np.ndarray
    truth: np.ndarray | None = None
    scaler: "Scaler | None" = None

    @property
    def T(self) -> int:
        return self.seasonal.shape[2]

    @property
    def C(self) -> int:
        return self.seasonal.shape[3]

    @property
    def S(self) -> int:
        return self.static.shape[1]

    def year_index(self, year: int) -> int:
        return self.years.index(year)

    def label(self, parent_id: str, year: int) -> tuple[float, float] | None:
        if year not in self.years:
            return None
        y, a = self.labels[self.parent_ids.index(parent_id), self.year_index(year)]
        return None if np.isnan(y) else (float(y), float(a))

    def trend_features(self, parent_id: str, year: int) -> np.ndarray | None:
        """Parent yields for ``year-5 .. year-1``; None if any is missing."""
        vals = []
        for y in range(year - N_TREND, year):
            lab = self.label(parent_id, y)
            if lab is None:
                return None
            vals.append(lab[0])
        return np.array(vals)

    def counts(self, hierarchy: RegionHierarchy) -> dict[str, dict[int, int]]:
        """Child-year sample counts per country and year."""
        out: dict[str, dict[int, int]] = {}
        for i, cid in enumerate(self.child_ids):
            country = hierarchy[cid].country
            for j, year in enumerate(self.years):
                if self.has_series[i, j]:
                    out.setdefault(country, {}).setdefault(year, 0)
                    out[country][year] += 1
        return out


def _read_csv(path: Path, columns: list[str], required: bool = True) -> pd.DataFrame | None:
    if not path.exists():
        if required:
            raise SchemaMismatchError(f"missing data file {path}")
        return None
    try:
        df = pd.read_csv(path, comment="#", dtype={columns[0]: str}, float_precision="round_trip")
    except Exception as exc:  # pandas raises a zoo of parser errors
        raise SchemaMismatchError(f"{path}: {exc}") from None
    if list(df.columns) != columns:
        raise SchemaMismatchError(f"{path}: header must be {','.join(columns)}, got {','.join(df.columns)}")
    return df


def _impute(series: np.ndarray, has: np.ndarray) -> np.ndarray:
    """Forward-fill along time within each series, then fill with channel means."""
    out = series.copy()
    idx = np.nonzero(has)
    block = out[idx]  # (n, T, C)
    if np.isnan(block).any():
        for k in range(1, block.shape[1]):
            prev = block[:, k - 1]
            cur = block[:, k]
            gap = np.isnan(cur)
            cur[gap] = prev[gap]
        chan_mean = np.nanmean(block.reshape(-1, block.shape[2]), axis=0)
        chan_mean = np.where(np.isnan(chan_mean), 0.0, chan_mean)
        gap = np.isnan(block)
        block[gap] = np.broadcast_to(chan_mean, block.shape)[gap]
        out[idx] = block
    return out


def load_dataset(paths, hierarchy: RegionHierarchy | None = None) -> Dataset:
    """Load a data directory (or a mapping of role -> file path) into a Dataset."""
    if isinstance(paths, (str, Path)):
        root = Path(paths)
        paths = {role: root / name for role, name in FILES.items()}
    paths = {k: Path(v) for k, v in paths.items()}
    if hierarchy is None:
        hierarchy = RegionHierarchy.from_csv(paths["regions"])

    seasonal = _read_csv(paths["seasonal"], SEASONAL_COLUMNS)
    static = _read_csv(paths["static"], STATIC_COLUMNS)
    labels = _read_csv(paths["labels"], LABEL_COLUMNS)
    truth = _read_csv(paths["truth"], TRUTH_COLUMNS, required=False) if "truth" in paths else None

    for df, col, path in (
        (seasonal, "region_id", paths["seasonal"]),
        (static, "region_id", paths["static"]),
        (labels, "parent_id", paths["labels"]),
    ):
        unknown = sorted(set(df[col]) - set(hierarchy.regions))
        if unknown:
            raise UnknownRegionError(f"{path}: unknown regions {unknown[:5]}")
    bad_level = sorted(set(seasonal["region_id"]) - set(hierarchy.children))
    if bad_level:
        raise SchemaMismatchError(f"seasonal rows must reference NUTS3 regions: {bad_level[:5]}")
    bad_level = sorted(set(labels["parent_id"]) - set(hierarchy.parents))
    if bad_level:
        raise SchemaMismatchError(f"label rows must reference NUTS2 regions: {bad_level[:5]}")

    child_ids = hierarchy.children
    parent_ids = hierarchy.parents
    years = sorted({int(y) for y in seasonal["year"]} | {int(y) for y in labels["year"]})
    channel_names = [str(c) for c in pd.unique(seasonal["channel"])]

    # every series must span the same T and the same channel set
    shape = seasonal.groupby(["region_id", "year"]).agg(t_max=("t", "max"), n_chan=("channel", "nunique"))
    if shape["t_max"].nunique() > 1 or shape["n_chan"].nunique() > 1:
        raise InconsistentShapeError(
            f"seasonal series vary in length/channels: T in {sorted(shape['t_max'].unique() + 1)}, "
            f"C in {sorted(shape['n_chan'].unique())}"
        )
    T = int(shape["t_max"].iloc[0]) + 1 if len(shape) else 0
    C = len(channel_names)

    ci = {c: i for i, c in enumerate(child_ids)}
    yi = {y: i for i, y in enumerate(years)}
    chi = {c: i for i, c in enumerate(channel_names)}
    arr = np.full((len(child_ids), len(years), T, C), np.nan)
    r = seasonal["region_id"].map(ci).to_numpy()
    y = seasonal["year"].astype(int).map(yi).to_numpy()
    t = seasonal["t"].astype(int).to_numpy()
    c = seasonal["channel"].astype(str).map(chi).to_numpy()
    arr[r, y, t, c] = seasonal["value"].to_numpy(dtype=float)
    has = np.zeros((len(child_ids), len(years)), dtype=bool)
    has[r, y] = True
    arr = _impute(arr, has)

    static_names = [str(f) for f in pd.unique(static["feature"])]
    fi = {f: i for i, f in enumerate(static_names)}
    st = np.full((len(child_ids), len(static_names)), np.nan)
    srows = static[static["region_id"].isin(ci)]
    st[srows["region_id"].map(ci).to_numpy(), srows["feature"].astype(str).map(fi).to_numpy()] = srows[
        "value"
    ].to_numpy(dtype=float)
    if np.isnan(st).any():
        col_mean = np.nanmean(st, axis=0)
        st = np.where(np.isnan(st), np.where(np.isnan(col_mean), 0.0, col_mean), st)

    countries = sorted({hierarchy[c].country for c in child_ids})
    zones = sorted({hierarchy[c].agro_env_zone for c in child_ids})
    oh_names = [f"country={k}" for k in countries] + [f"zone={z}" for z in zones]
    oh = np.zeros((len(child_ids), len(oh_names)))
    for i, cid in enumerate(child_ids):
        oh[i, countries.index(hierarchy[cid].country)] = 1.0
        oh[i, len(countries) + zones.index(hierarchy[cid].agro_env_zone)] = 1.0
    static_all = np.concatenate([st, oh], axis=1)
    onehot = np.array([False] * len(static_names) + [True] * len(oh_names))

    pi = {p: i for i, p in enumerate(parent_ids)}
    lab = np.full((len(parent_ids), len(years), 2), np.nan)
    li = labels["parent_id"].map(pi).to_numpy()
    ly = labels["year"].astype(int).map(yi).to_numpy()
    lab[li, ly, 0] = labels["yield_t_ha"].to_numpy(dtype=float)
    lab[li, ly, 1] = labels["crop_area_ha"].to_numpy(dtype=float)
    if not np.all(np.isfinite(lab[li, ly])):
        raise SchemaMismatchError(f"{paths['labels']}: non-finite label values")
    if (lab[li, ly] < 0).any():
        raise DataError(f"{paths['labels']}: negative yield or crop area")

    for p in parent_ids:
        kids = [ci[k] for k in hierarchy.children_of(p)]
        land = sum(hierarchy[k].land_area for k in hierarchy.children_of(p))
        for j, year in enumerate(years):
            if has[kids, j].any() and np.isnan(lab[pi[p], j, 0]):
                raise MissingLabelError(f"no NUTS2 label for ({p}, {year}) but child features exist")
            if lab[pi[p], j, 1] > land * (1 + 1e-12):
                raise DataError(f"({p}, {year}): crop area exceeds children's land area")

    tr = None
    if truth is not None:
        unknown = sorted(set(truth["region_id"]) - set(ci))
        if unknown:
            raise UnknownRegionError(f"{paths['truth']}: unknown child regions {unknown[:5]}")
        tr = np.full((len(child_ids), len(years), 2), np.nan)
        ti = truth["region_id"].map(ci).to_numpy()
        ty = truth["year"].astype(int).map(yi).to_numpy()
        tr[ti, ty, 0] = truth["yield_t_ha"].to_numpy(dtype=float)
        tr[ti, ty, 1] = truth["area_fraction"].to_numpy(dtype=float)

    return Dataset(
        child_ids=child_ids,
        parent_ids=parent_ids,
        years=years,
        channel_names=channel_names,
        seasonal=arr,
        has_series=has,
        static_names=static_names + oh_names,
        static=static_all,
        onehot=onehot,
        labels=lab,
        truth=tr,
    )


# ---------------------------------------------------------------- temporal split


@dataclass(frozen=True)
class TemporalSplit:
    train_years: tuple[int, ...]
    test_years: tuple[int, ...]
    folds: tuple[tuple[tuple[int, ...], int], ...]

    @property
    def validation_years(self) -> tuple[int, ...]:
        return tuple(v for _, v in self.folds)


def make_temporal_split(years, test_fraction: float = 0.30, n_folds: int = 5) -> TemporalSplit:
    """Most recent ``ceil(test_fraction * n)`` years go to test.

    Fold k (k = 1..n_folds) validates on the (n_folds + 1 - k)-th most recent
    training year and trains on every training year before it.
    """
    ys = sorted(set(int(y) for y in years))
    if len(ys) < 10:
        raise TooFewYearsError(f"need at least 10 distinct years, got {len(ys)}")
    n_test = math.ceil(round(test_fraction * len(ys), 9))
    train, test = ys[:-n_test], ys[-n_test:]
    if len(train) <= n_folds:
        raise TooFewYearsError(f"{len(train)} training years cannot host {n_folds} folds")
    folds = []
    for k in range(1, n_folds + 1):
        val = train[-(n_folds + 1 - k)]
        folds.append((tuple(y for y in train if y < val), val))
    return TemporalSplit(tuple(train), tuple(test), tuple(folds))


# ---------------------------------------------------------------- scaling


@dataclass
class Scaler:
    """Per-column affine maps fitted on reference years only.

    One-hot static columns carry mean 0 and scale 1 so they pass through.
    """

    seasonal_mean: np.ndarray
    seasonal_scale: np.ndarray
    static_mean: np.ndarray
    static_scale: np.ndarray
    trend_mean: np.ndarray
    trend_scale: np.ndarray
    reference_years: tuple[int, ...] = ()
    zero_variance: list[str] = field(default_factory=list)

    def transform_seasonal(self, x: np.ndarray) -> np.ndarray:
        return (x - self.seasonal_mean) / self.seasonal_scale

    def transform_static(self, x: np.ndarray) -> np.ndarray:
        return (x - self.static_mean) / self.static_scale

    def transform_trend(self, x: np.ndarray) -> np.ndarray:
        return (x - self.trend_mean) / self.trend_scale

    def to_dict(self) -> dict:
        d = {k: getattr(self, k).tolist() for k in (
            "seasonal_mean", "seasonal_scale", "static_mean", "static_scale", "trend_mean", "trend_scale")}
        d["reference_years"] = list(self.reference_years)
        d["zero_variance"] = list(self.zero_variance)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        arrays = {k: np.asarray(v, dtype=float) for k, v in d.items() if k not in ("reference_years", "zero_variance")}
        return cls(**arrays, reference_years=tuple(d["reference_years"]), zero_variance=list(d["zero_variance"]))

    def apply(self, dataset: Dataset) -> Dataset:
        seasonal = np.where(
            dataset.has_series[:, :, None, None], self.transform_seasonal(dataset.seasonal), dataset.seasonal
        )
        return replace(dataset, seasonal=seasonal, static=self.transform_static(dataset.static), scaler=self)


def _moments(x: np.ndarray, axis, names: list[str], kind: str, zero_var: list[str]):
    mu = x.mean(axis=axis)
    sd = x.std(axis=axis)
    scale = np.where(sd > 0, sd, 1.0)
    for name, s in zip(names, sd):
        if not s > 0:
            zero_var.append(f"{kind}:{name}")
            warnings.warn(f"{kind} column {name!r} is constant over the reference years", ZeroVarianceWarning)
    return mu, scale


def standardize(dataset: Dataset, reference_years) -> tuple[Dataset, Scaler]:
    """Z-score continuous inputs with population moments from ``reference_years``.

    Constant columns are centred and left at scale 1 (recorded in
    ``scaler.zero_variance`` and emitted as :class:`ZeroVarianceWarning`).
    """
    ref = sorted(set(int(y) for y in reference_years))
    missing = sorted(set(ref) - set(dataset.years))
    if missing:
        raise DataError(f"reference years {missing} not in dataset")
    cols = [dataset.year_index(y) for y in ref]
    zero_var: list[str] = []

    mask = dataset.has_series[:, cols]
    block = dataset.seasonal[:, cols][mask]  # (n, T, C)
    s_mu, s_sc = _moments(block.reshape(-1, dataset.C), 0, dataset.channel_names, "seasonal", zero_var)

    cont = ~dataset.onehot
    st_mu = np.zeros(dataset.S)
    st_sc = np.ones(dataset.S)
    names = [n for n, c in zip(dataset.static_names, cont) if c]
    st_mu[cont], st_sc[cont] = _moments(dataset.static[:, cont], 0, names, "static", zero_var)

    trends = [
        tr for p in dataset.parent_ids for y in ref
        if dataset.label(p, y) is not None and (tr := dataset.trend_features(p, y)) is not None
    ]
    if trends:
        t_mu, t_sc = _moments(np.array(trends), 0, [f"lag{N_TREND - k}" for k in range(N_TREND)], "trend", zero_var)
    else:
        t_mu, t_sc = np.zeros(N_TREND), np.ones(N_TREND)

    scaler = Scaler(s_mu, s_sc, st_mu, st_sc, t_mu, t_sc, tuple(ref), zero_var)
    return scaler.apply(dataset), scaler


# ---------------------------------------------------------------- batches


@dataclass
class SupervisionBatch:
    """All children of one parent in one year, plus the parent's labels."""

    parent_id: str
    year: int
    child_ids: list[str]
    seasonal: np.ndarray  # (n, T, C)
    static: np.ndarray  # (n, S)
    land_area: np.ndarray  # (n,)
    trend: np.ndarray | None  # (5,) scaled
    trend_raw: np.ndarray  # (5,) t/ha
    label_yield: float
    label_area: float
    country: str = ""
    truth_yield: np.ndarray | None = None
    truth_fraction: np.ndarray | None = None

    @property
    def n_children(self) -> int:
        return len(self.child_ids)


class BatchList(list):
    """List of batches that also remembers which parent-years were skipped."""

    def __init__(self, items=(), skipped=()):
        super().__init__(items)
        self.skipped: list[tuple[str, int, str]] = list(skipped)


def assemble_batches(
    dataset: Dataset,
    hierarchy: RegionHierarchy,
    years,
    season_cutoff: int | None = None,
    with_trend: bool = True,
) -> BatchList:
    """One :class:`SupervisionBatch` per complete (parent, year) in ``years``.

    Parent-years lacking any child series, the label, or the five previous
    parent yields are skipped and listed in ``.skipped``. Series are cut to
    their first ``season_cutoff`` steps when given.
    """
    out = BatchList()
    ci = {c: i for i, c in enumerate(dataset.child_ids)}
    scaler = dataset.scaler
    T = dataset.T if season_cutoff is None else min(season_cutoff, dataset.T)
    for year in sorted(set(int(y) for y in years)):
        for p in dataset.parent_ids:
            if year not in dataset.years:
                out.skipped.append((p, year, "year not in dataset"))
                continue
            j = dataset.year_index(year)
            kids = hierarchy.children_of(p)
            idx = [ci[k] for k in kids]
            lab = dataset.label(p, year)
            trend_raw = dataset.trend_features(p, year)
            if not dataset.has_series[idx, j].all():
                out.skipped.append((p, year, "missing child series"))
            elif lab is None:
                out.skipped.append((p, year, "missing label"))
            elif trend_raw is None:
                out.skipped.append((p, year, "missing trend history"))
            else:
                trend = scaler.transform_trend(trend_raw) if scaler is not None else trend_raw.copy()
                truth_y = truth_f = None
                if dataset.truth is not None and not np.isnan(dataset.truth[idx, j, 0]).any():
                    truth_y = dataset.truth[idx, j, 0].copy()
                    truth_f = dataset.truth[idx, j, 1].copy()
                out.append(
                    SupervisionBatch(
                        parent_id=p,
                        year=year,
                        child_ids=kids,
                        seasonal=dataset.seasonal[idx, j, :T].copy(),
                        static=dataset.static[idx].copy(),
                        land_area=np.array([hierarchy[k].land_area for k in kids]),
                        trend=trend if with_trend else None,
                        trend_raw=trend_raw,
                        label_yield=lab[0],
                        label_area=lab[1],
                        country=hierarchy[p].country,
                        truth_yield=truth_y,
                        truth_fraction=truth_f,
                    )
                )
    return out


