"""Weakly supervised disaggregation model.

Children of one parent-year are encoded and passed through the head; their
predicted area fractions times land area give crop areas, which weight the
child yields into a parent yield. Only parent yields and parent crop areas
are supervised.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .dataio import Scaler, SupervisionBatch
from .encoders import (
    N_TREND,
    CnnEncoderSpec,
    Encoder,
    HeadSpec,
    encoder_spec_from_dict,
    head_forward,
    init_params,
    make_encoder_spec,
)
from .errors import (
    DegenerateWeightsError,
    EmptyBatchListError,
    EmptyGridError,
    NonPositiveMeanError,
    NumericalError,
    ShapeMismatchError,
)

log = logging.getLogger(__name__)

VARIANTS = ("trend", "no_trend")
DEFAULT_LR_GRID = (1e-4, 3e-4, 1e-3, 3e-3)
DEFAULT_L2_GRID = (0.0, 1e-5, 1e-4, 1e-3)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    l2_lambda: float = 0.0
    max_epochs: int = 60
    units_per_step: int = 8
    seed: int = 0
    patience: int = 2


@dataclass
class ChildPrediction:
    yield_hat: np.ndarray
    fraction_hat: np.ndarray
    area_hat: np.ndarray


@dataclass
class ForecastRecord:
    model: str
    variant: str
    level: str  # "NUTS3" or "NUTS2"
    region_id: str
    year: int
    yield_hat: float
    fraction_hat: float
    area_hat: float


class WsModel:
    """Encoder + head with fixed variant (``trend`` or ``no_trend``)."""

    def __init__(
        self,
        encoder: str = "lstm",
        channels: int = 11,
        static_len: int = 31,
        T: int = 30,
        variant: str = "trend",
        seed: int = 0,
    ):
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.variant = variant
        self.seed = seed
        self.T = T
        self.static_len = static_len
        self.encoder_spec = make_encoder_spec(encoder, channels)
        n_in = self.encoder_spec.out_features(T) + static_len + (N_TREND if variant == "trend" else 0)
        self.head_spec = HeadSpec(in_features=n_in)
        self.encoder = Encoder(self.encoder_spec, init_params(self.encoder_spec, seed))
        self.head = {k: dc.Parameter(v, name=k) for k, v in init_params(self.head_spec, seed + 1).items()}
        self.train_means: tuple[float, float] | None = None
        self.scaler: Scaler | None = None
        self.hyper: dict = {}

    @property
    def kind(self) -> str:
        return self.encoder_spec.kind

    @property
    def uses_trend(self) -> bool:
        return self.variant == "trend"

    @property
    def params(self) -> dict[str, dc.Tensor]:
        return {**self.encoder.params, **self.head}

    # ------------------------------------------------------------ forward

    def forward(self, series, static, trend=None, train: bool = False, rng=None, update_stats: bool = True):
        """Child-level ``(yield_hat, fraction_hat)`` tensors for stacked inputs."""
        feats = self.encoder(series, train=train, rng=rng, update_stats=update_stats)
        return head_forward(self.head, feats, static, trend if self.uses_trend else None)

    def forward_units(self, stacked: "Stacked", train: bool = False, rng=None, update_stats: bool = True):
        y, f = self.forward(
            dc.Tensor(stacked.seasonal), dc.Tensor(stacked.static),
            dc.Tensor(stacked.trend) if self.uses_trend else None,
            train=train, rng=rng, update_stats=update_stats,
        )
        area = dc.mul(f, dc.Tensor(stacked.land))
        py, pa = aggregate_tensors(y, area, stacked.membership)
        return y, f, area, py, pa

    def predict_children(self, batch: SupervisionBatch) -> ChildPrediction:
        st = stack([batch], self.uses_trend)
        self._check(st)
        y, f, area, _, _ = self.forward_units(st, train=False)
        return ChildPrediction(y.data.copy(), f.data.copy(), area.data.copy())

    def _check(self, st: "Stacked") -> None:
        if st.seasonal.shape[2] != self.encoder_spec.input_channels:
            raise ShapeMismatchError(
                f"model expects {self.encoder_spec.input_channels} channels, batch has {st.seasonal.shape[2]}"
            )
        if st.static.shape[1] != self.static_len:
            raise ShapeMismatchError(f"model expects {self.static_len} static features, batch has {st.static.shape[1]}")

    # ------------------------------------------------------------ state

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {k: p.data.copy() for k, p in self.params.items()}
        for i, st in enumerate(self.encoder.bn_states):
            arrays[f"cnn{i}.bn_running_mean"] = st.running_mean.copy()
            arrays[f"cnn{i}.bn_running_var"] = st.running_var.copy()
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if arrays[k].shape != p.shape:
                raise ShapeMismatchError(f"{k}: checkpoint shape {arrays[k].shape} vs model {p.shape}")
            p.data = arrays[k].copy()
        for i, st in enumerate(self.encoder.bn_states):
            st.running_mean = arrays[f"cnn{i}.bn_running_mean"].copy()
            st.running_var = arrays[f"cnn{i}.bn_running_var"].copy()

    def header(self) -> dict:
        return {
            "architecture": self.kind,
            "encoder": self.encoder_spec.to_dict(),
            "head": self.head_spec.to_dict(),
            "variant": self.variant,
            "seed": self.seed,
            "T": self.T,
            "static_len": self.static_len,
            "train_means": list(self.train_means) if self.train_means else None,
            "scaler": self.scaler.to_dict() if self.scaler else None,
            "hyper": self.hyper,
        }

    def save(self, path, extra: dict | None = None) -> None:
        header = self.header()
        if extra:
            header.update(extra)
        dc.save_arrays(path, header, self.state_arrays())

    @classmethod
    def load(cls, path) -> "WsModel":
        header, arrays = dc.load_arrays(path)
        spec = encoder_spec_from_dict(header["encoder"])
        model = cls(
            encoder=header["architecture"],
            channels=spec.input_channels,
            static_len=header["static_len"],
            T=header["T"],
            variant=header["variant"],
            seed=header["seed"],
        )
        model.load_state_arrays(arrays)
        model.train_means = tuple(header["train_means"]) if header["train_means"] else None
        model.scaler = Scaler.from_dict(header["scaler"]) if header["scaler"] else None
        model.hyper = header.get("hyper", {})
        model.checkpoint_header = header
        return model

    def clone(self) -> "WsModel":
        return copy.deepcopy(self)


# ---------------------------------------------------------------- stacking


@dataclass
class Stacked:
    """Several parent-year units flattened into one child axis."""

    seasonal: np.ndarray  # (N, T, C)
    static: np.ndarray  # (N, S)
    trend: np.ndarray | None  # (N, 5), parent trend repeated per child
    land: np.ndarray  # (N,)
    membership: np.ndarray  # (P, N) 0/1
    label_yield: np.ndarray  # (P,)
    label_area: np.ndarray  # (P,)


def stack(batches: Sequence[SupervisionBatch], with_trend: bool = True) -> Stacked:
    sizes = [b.n_children for b in batches]
    n = sum(sizes)
    membership = np.zeros((len(batches), n))
    start = 0
    for p, k in enumerate(sizes):
        membership[p, start : start + k] = 1.0
        start += k
    trend = None
    if with_trend:
        if any(b.trend is None for b in batches):
            raise ShapeMismatchError("trend variant needs trend features in every batch")
        trend = np.concatenate([np.repeat(b.trend[None, :], b.n_children, axis=0) for b in batches])
    return Stacked(
        seasonal=np.concatenate([b.seasonal for b in batches]),
        static=np.concatenate([b.static for b in batches]),
        trend=trend,
        land=np.concatenate([b.land_area for b in batches]),
        membership=membership,
        label_yield=np.array([b.label_yield for b in batches]),
        label_area=np.array([b.label_area for b in batches]),
    )


# ---------------------------------------------------------------- aggregation and loss


def aggregate(child: ChildPrediction) -> tuple[float, float, np.ndarray]:
    """Area-weighted parent yield, total parent area and the child weights."""
    area = np.asarray(child.area_hat, dtype=float)
    if area.size == 0:
        raise DegenerateWeightsError("no child predictions to aggregate")
    total = area.sum()
    if not total >= 1e-12 or (area <= 0).any():
        raise DegenerateWeightsError(f"child areas must be positive (sum {total})")
    w = area / total
    return float(w @ np.asarray(child.yield_hat, dtype=float)), float(total), w


def aggregate_tensors(yield_hat: dc.Tensor, area_hat: dc.Tensor, membership: np.ndarray):
    """Differentiable segment version of :func:`aggregate` over stacked units."""
    M = dc.Tensor(membership)
    n = area_hat.shape[0]
    area_col = dc.reshape(area_hat, (n, 1))
    parent_area = dc.matmul(M, area_col)
    if (parent_area.data < 1e-12).any():
        raise DegenerateWeightsError("parent area below 1e-12")
    weighted = dc.matmul(M, dc.reshape(dc.mul(area_hat, yield_hat), (n, 1)))
    parent_yield = dc.div(weighted, parent_area)
    P = membership.shape[0]
    return dc.reshape(parent_yield, (P,)), dc.reshape(parent_area, (P,))


def combined_loss(parent_yield, parent_area, label_yield, label_area, train_means) -> dc.Tensor:
    """``MSE(yield)/mean_yield + MSE(area)/mean_area`` over the units given."""
    ybar, abar = train_means
    if not (ybar > 0 and abar > 0):
        raise NonPositiveMeanError(f"training label means must be positive, got {train_means}")
    ly = dc.mse(parent_yield, dc.Tensor(np.asarray(label_yield, dtype=float).reshape(np.shape(parent_yield.data))))
    la = dc.mse(parent_area, dc.Tensor(np.asarray(label_area, dtype=float).reshape(np.shape(parent_area.data))))
    return dc.add(dc.div(ly, ybar), dc.div(la, abar))


def train_means(batches: Sequence[SupervisionBatch]) -> tuple[float, float]:
    return (
        float(np.mean([b.label_yield for b in batches])),
        float(np.mean([b.label_area for b in batches])),
    )


def _softplus_inv(y: float) -> float:
    return y + math.log(-math.expm1(-y))


def calibrate_output_bias(model: WsModel, batches: Sequence[SupervisionBatch]) -> None:
    """Start the head at the training mean yield and mean crop fraction."""
    ybar = float(np.mean([b.label_yield for b in batches]))
    fbar = float(np.sum([b.label_area for b in batches]) / np.sum([b.land_area.sum() for b in batches]))
    fbar = min(max(fbar, 1e-3), 1 - 1e-3)
    b = model.head["head.bias"].data.copy()
    b[0] = _softplus_inv(max(ybar, 1e-3))
    b[1] = math.log(fbar / (1 - fbar))
    model.head["head.bias"].data = b


# ---------------------------------------------------------------- training


class EarlyStopping:
    """Stop once the monitored loss has risen ``patience`` epochs in a row."""

    def __init__(self, patience: int = 2):
        self.patience = patience
        self.history: list[float] = []
        self.rises = 0
        self.best_epoch = 0
        self.best_loss = math.inf
        self.best_state = None

    def update(self, loss: float, state_fn: Callable[[], object]) -> bool:
        if self.history and loss > self.history[-1]:
            self.rises += 1
        else:
            self.rises = 0
        self.history.append(loss)
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = len(self.history)
            self.best_state = state_fn()
        return self.rises >= self.patience


@dataclass
class TrainResult:
    log: list[tuple[int, float, float]] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    best_val_loss: float = math.inf


def evaluate_loss(model: WsModel, batches: Sequence[SupervisionBatch], means) -> float:
    st = stack(batches, model.uses_trend)
    _, _, _, py, pa = model.forward_units(st, train=False)
    return combined_loss(py, pa, st.label_yield, st.label_area, means).item()


def _run_epoch(model, batches, config: TrainConfig, rng, optimizer: dc.AdamState, means) -> float:
    order = rng.permutation(len(batches))
    losses = []
    params = model.params
    for start in range(0, len(order), config.units_per_step):
        units = [batches[i] for i in order[start : start + config.units_per_step]]
        st = stack(units, model.uses_trend)
        with dc.Tape() as tape:
            _, _, _, py, pa = model.forward_units(st, train=True, rng=rng)
            loss = combined_loss(py, pa, st.label_yield, st.label_area, means)
        grads = tape.backward(loss, params)
        dc.adam_step(params, grads, optimizer, config.lr, config.l2_lambda)
        losses.append(loss.item())
    return float(np.mean(losses))


def train(
    model: WsModel,
    batches_train: Sequence[SupervisionBatch],
    batches_val: Sequence[SupervisionBatch] | None,
    config: TrainConfig,
    validation_fn: Callable[[WsModel, int], float] | None = None,
) -> TrainResult:
    """Train with early stopping on the validation combined loss.

    Without validation data (``batches_val`` None and no ``validation_fn``)
    the model simply runs ``config.max_epochs`` epochs. Otherwise the
    parameters of the best validation epoch are restored at the end.
    ``validation_fn(model, epoch)`` overrides the validation loss.
    """
    if not batches_train:
        raise EmptyBatchListError("no training batches")
    monitored = validation_fn is not None or batches_val is not None
    if batches_val is not None and len(batches_val) == 0:
        raise EmptyBatchListError("no validation batches")
    means = train_means(batches_train)
    if model.train_means is None:
        model.train_means = means
        calibrate_output_bias(model, batches_train)
    rng = np.random.default_rng(config.seed)
    opt = dc.AdamState()
    stopper = EarlyStopping(config.patience)
    result = TrainResult()

    val0 = evaluate_loss(model, batches_val, means) if batches_val else math.nan
    result.log.append((0, evaluate_loss(model, batches_train, means), val0))
    for epoch in range(1, config.max_epochs + 1):
        try:
            tr_loss = _run_epoch(model, batches_train, config, rng, opt, means)
        except NumericalError as exc:
            raise NumericalError(f"training diverged in epoch {epoch}: {exc}") from None
        result.stopped_epoch = epoch
        if not monitored:
            result.log.append((epoch, tr_loss, math.nan))
            continue
        if validation_fn is not None:
            val = float(validation_fn(model, epoch))
        else:
            val = evaluate_loss(model, batches_val, means)
        result.log.append((epoch, tr_loss, val))
        if stopper.update(val, model.state_arrays):
            break
    if monitored:
        model.load_state_arrays(stopper.best_state)
        result.best_epoch = stopper.best_epoch
        result.best_val_loss = stopper.best_loss
    else:
        result.best_epoch = result.stopped_epoch
    model.hyper.update({"lr": config.lr, "l2_lambda": config.l2_lambda, "epochs": result.best_epoch})
    return result


# ---------------------------------------------------------------- prediction


def parent_predictions(model: WsModel, batches: Sequence[SupervisionBatch]) -> tuple[np.ndarray, np.ndarray]:
    st = stack(batches, model.uses_trend)
    _, _, _, py, pa = model.forward_units(st, train=False)
    return py.data.copy(), pa.data.copy()


def forecast(model: WsModel, batches: Sequence[SupervisionBatch], name: str | None = None) -> list[ForecastRecord]:
    """Child records for every batch followed by its aggregated parent record."""
    name = name or f"ws_{model.kind}"
    out = []
    for b in batches:
        pred = model.predict_children(b)
        py, pa, _ = aggregate(pred)
        for k, cid in enumerate(b.child_ids):
            out.append(ForecastRecord(name, model.variant, "NUTS3", cid, b.year,
                                      float(pred.yield_hat[k]), float(pred.fraction_hat[k]), float(pred.area_hat[k])))
        out.append(ForecastRecord(name, model.variant, "NUTS2", b.parent_id, b.year,
                                  py, pa / float(b.land_area.sum()), pa))
    return out


# ---------------------------------------------------------------- tuning


@dataclass
class TuneResult:
    best: tuple[float, float]
    table: list[dict]
    best_epochs: list[int]


def _nrmse(pred: np.ndarray, rep: np.ndarray) -> float:
    return float(100.0 * np.sqrt(np.mean((pred - rep) ** 2)) / np.mean(rep))


def tune(
    make_model: Callable[[], WsModel],
    folds: Sequence[tuple[Sequence[SupervisionBatch], Sequence[SupervisionBatch]]],
    grid: Sequence[tuple[float, float]] | None = None,
    base_config: TrainConfig | None = None,
    workers: int = 1,
) -> TuneResult:
    """Grid search over (lr, l2_lambda) by mean parent-level validation NRMSE.

    Ties go to the smaller learning rate, then the larger penalty.
    """
    if grid is None:
        grid = [(lr, lam) for lr in DEFAULT_LR_GRID for lam in DEFAULT_L2_GRID]
    grid = list(grid)
    if not grid:
        raise EmptyGridError("empty hyperparameter grid")
    base = base_config or TrainConfig()
    jobs = [(g, k) for g in grid for k in range(len(folds))]

    payloads = []
    for (lr, lam), k in jobs:
        cfg = TrainConfig(**{**asdict(base), "lr": lr, "l2_lambda": lam})
        payloads.append((make_model, folds[k][0], folds[k][1], cfg))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_fit_fold, payloads))
    else:
        results = [_fit_fold(p) for p in payloads]

    table = []
    by_point = {}
    for (point, k), (score, ep) in zip(jobs, results):
        by_point.setdefault(point, []).append((score, ep))
    for lr, lam in grid:
        scores = by_point[(lr, lam)]
        row = {"lr": lr, "l2_lambda": lam}
        for k, (s, ep) in enumerate(scores, start=1):
            row[f"fold{k}"] = s
            row[f"epochs{k}"] = ep
        row["mean_nrmse"] = float(np.mean([s for s, _ in scores]))
        table.append(row)
    best_row = min(table, key=lambda r: (r["mean_nrmse"], r["lr"], -r["l2_lambda"]))
    return TuneResult(
        best=(best_row["lr"], best_row["l2_lambda"]),
        table=table,
        best_epochs=[best_row[f"epochs{k}"] for k in range(1, len(folds) + 1)],
    )


def _fit_fold(payload) -> tuple[float, int]:
    make_model, tr, va, cfg = payload
    model = make_model()
    res = train(model, tr, va, cfg)
    py, _ = parent_predictions(model, va)
    return _nrmse(py, np.array([b.label_yield for b in va])), res.best_epoch
