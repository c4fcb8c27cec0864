"""Comparison models: linear yield trends, naive trend disaggregation, GBDT."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .encoders import N_TREND
from .errors import (
    DegenerateFitError,
    EmptyGridError,
    MissingHistoryError,
    NonFiniteInputError,
    ShapeMismatchError,
    TooFewSamplesError,
)
from .hierarchy import RegionHierarchy

# ---------------------------------------------------------------- trends


def trend_fit_predict(yields: Sequence[float], years: Sequence[float], target_year: float) -> float:
    """OLS line through five (year, yield) points, evaluated at ``target_year``, clipped at 0."""
    y = np.asarray(yields, dtype=float)
    x = np.asarray(years, dtype=float)
    if y.shape != (N_TREND,) or x.shape != (N_TREND,):
        raise MissingHistoryError(f"trend fit needs exactly {N_TREND} points, got {y.size}")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
        raise NonFiniteInputError("trend fit inputs must be finite")
    xm = x.mean()
    xc = x - xm
    sxx = xc @ xc
    if sxx == 0:
        raise DegenerateFitError("all trend years identical")
    slope = (xc @ (y - y.mean())) / sxx
    return max(float(y.mean() + slope * (target_year - xm)), 0.0)


def trend_from_history(history: Mapping[int, float], target_year: int) -> float:
    years = list(range(target_year - N_TREND, target_year))
    missing = [y for y in years if y not in history or not np.isfinite(history[y])]
    if missing:
        raise MissingHistoryError(f"no yield history for years {missing} before {target_year}")
    return trend_fit_predict([history[y] for y in years], years, target_year)


def naive_trend_disagg(
    hierarchy: RegionHierarchy, parent_yields_history: Mapping[int, float], parent_id: str, target_year: int
) -> dict[str, float]:
    """Broadcast the parent's trend forecast to every child."""
    value = trend_from_history(parent_yields_history, target_year)
    return {c: value for c in hierarchy.children_of(parent_id)}


# ---------------------------------------------------------------- trees


@dataclass
class Tree:
    """Flat binary tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=int)
        active = self.feature[node] >= 0
        while active.any():
            rows = np.nonzero(active)[0]
            nd = node[rows]
            go_left = X[rows, self.feature[nd]] <= self.threshold[nd]
            node[rows] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return self.value[node]


def _best_split(X: np.ndarray, r: np.ndarray, min_leaf: int):
    n = r.size
    order = np.argsort(X, axis=0, kind="stable")
    xs = np.take_along_axis(X, order, axis=0)
    cs = np.cumsum(r[order], axis=0)
    total = cs[-1]
    k = np.arange(1, n)[:, None].astype(float)
    left = cs[:-1]
    gain = left**2 / k + (total - left) ** 2 / (n - k) - total**2 / n
    valid = (xs[:-1] < xs[1:]) & (k >= min_leaf) & (n - k >= min_leaf)
    gain = np.where(valid, gain, -np.inf)
    flat = int(np.argmax(gain))
    pos, feat = divmod(flat, X.shape[1])
    if not gain[pos, feat] > 0:
        return None
    lo, hi = xs[pos, feat], xs[pos + 1, feat]
    thr = 0.5 * (lo + hi)
    if not thr < hi:
        thr = lo
    return feat, thr


def fit_tree(X: np.ndarray, r: np.ndarray, max_depth: int | None, min_samples_leaf: int) -> Tree:
    """Greedy least-squares regression tree (variance-reduction splits)."""
    feature, threshold, left, right, value = [], [], [], [], []

    def grow(idx: np.ndarray, depth: int) -> int:
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(r[idx].mean()))
        rn = r[idx]
        if (max_depth is not None and depth >= max_depth) or idx.size < 2 * min_samples_leaf or np.all(rn == rn[0]):
            return node
        split = _best_split(X[idx], rn, min_samples_leaf)
        if split is None:
            return node
        f, thr = split
        mask = X[idx, f] <= thr
        feature[node], threshold[node] = f, thr
        left[node] = grow(idx[mask], depth + 1)
        right[node] = grow(idx[~mask], depth + 1)
        return node

    grow(np.arange(r.size), 0)
    return Tree(np.array(feature), np.array(threshold), np.array(left), np.array(right), np.array(value))


# ---------------------------------------------------------------- boosting


@dataclass(frozen=True)
class GbdtConfig:
    n_trees: int = 200
    max_depth: int | None = 3
    eta: float = 0.1
    min_samples_leaf: int = 5
    subsample: float = 1.0
    seed: int = 0


@dataclass
class GbdtModel:
    init: float
    eta: float
    n_features: int
    trees: list[Tree] = field(default_factory=list)

    def raw_predict(self, X: np.ndarray, n_trees: int | None = None) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ShapeMismatchError(f"expected (n, {self.n_features}) features, got {X.shape}")
        out = np.full(X.shape[0], self.init)
        for tree in self.trees[:n_trees]:
            out += self.eta * tree.predict(X)
        return out


def gbdt_fit(features, targets, config: GbdtConfig | None = None) -> GbdtModel:
    """Least-squares boosting: start at the mean, fit each tree to the residuals."""
    cfg = config or GbdtConfig()
    X = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ShapeMismatchError(f"features {X.shape} and targets {y.shape} do not align")
    if X.shape[0] < 2 * cfg.min_samples_leaf:
        raise TooFewSamplesError(f"{X.shape[0]} samples < 2 * min_samples_leaf ({cfg.min_samples_leaf})")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise NonFiniteInputError("GBDT inputs contain non-finite values")
    rng = np.random.default_rng(cfg.seed)
    model = GbdtModel(init=float(y.mean()), eta=cfg.eta, n_features=X.shape[1])
    pred = np.full(y.size, model.init)
    for _ in range(cfg.n_trees):
        resid = y - pred
        if cfg.subsample < 1.0:
            m = max(2 * cfg.min_samples_leaf, int(round(cfg.subsample * y.size)))
            idx = np.sort(rng.choice(y.size, size=min(m, y.size), replace=False))
            tree = fit_tree(X[idx], resid[idx], cfg.max_depth, cfg.min_samples_leaf)
        else:
            tree = fit_tree(X, resid, cfg.max_depth, cfg.min_samples_leaf)
        model.trees.append(tree)
        pred = pred + cfg.eta * tree.predict(X)
    return model


def gbdt_predict(model: GbdtModel, features) -> np.ndarray:
    return np.maximum(model.raw_predict(features), 0.0)


def gbdt_tune(folds, grid, base: GbdtConfig | None = None):
    """Grid search over ``(n_trees, max_depth, eta)`` by mean validation NRMSE.

    ``folds`` is a sequence of ``(X_train, y_train, X_val, y_val)``. Ties go
    to fewer trees, then shallower trees. Returns ``(best_config, table)``.
    """
    grid = list(grid)
    if not grid:
        raise EmptyGridError("empty GBDT grid")
    base = base or GbdtConfig()
    table = []
    for n_trees, depth, eta in grid:
        cfg = GbdtConfig(n_trees, depth, eta, base.min_samples_leaf, base.subsample, base.seed)
        row = {"n_trees": n_trees, "max_depth": depth, "eta": eta}
        scores = []
        for k, (Xt, yt, Xv, yv) in enumerate(folds, start=1):
            model = gbdt_fit(Xt, yt, cfg)
            p = gbdt_predict(model, Xv)
            s = float(100.0 * np.sqrt(np.mean((p - yv) ** 2)) / np.mean(yv))
            row[f"fold{k}"] = s
            scores.append(s)
        row["mean_nrmse"] = float(np.mean(scores))
        table.append(row)
    depth_key = lambda d: np.inf if d is None else d  # noqa: E731
    best = min(table, key=lambda r: (r["mean_nrmse"], r["n_trees"], depth_key(r["max_depth"])))
    cfg = GbdtConfig(best["n_trees"], best["max_depth"], best["eta"], base.min_samples_leaf, base.subsample, base.seed)
    return cfg, table


# ---------------------------------------------------------------- features


def season_summary(seasonal: np.ndarray) -> np.ndarray:
    """Per-channel (mean, min, max, last) over the season: (n, T, C) -> (n, 4C)."""
    s = np.asarray(seasonal, dtype=float)
    return np.concatenate([s.mean(axis=1), s.min(axis=1), s.max(axis=1), s[:, -1, :]], axis=1)
