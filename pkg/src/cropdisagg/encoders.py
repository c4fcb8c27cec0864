"""Sequence encoders (LSTM, 1-D CNN) and the two-output head.

Both encoders take a batch of seasonal series shaped (N, T, C) and return an
(N, F) feature matrix. The head concatenates encoder features with static
and trend features and maps them to a yield (softplus link, t/ha) and a
crop-area fraction (sigmoid link).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import ShapeMismatchError

N_TREND = 5


@dataclass(frozen=True)
class ConvLayer:
    c_in: int
    c_out: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1


def _paper_cnn_layers(c_in: int = 11) -> tuple[ConvLayer, ...]:
    return (
        ConvLayer(c_in, 16, 3, 1, 1),
        ConvLayer(16, 32, 3, 2, 1),
        ConvLayer(32, 8, 3, 2, 1),
    )


@dataclass(frozen=True)
class CnnEncoderSpec:
    layers: tuple[ConvLayer, ...] = field(default_factory=_paper_cnn_layers)
    dropout: float = 0.1
    kind: str = "cnn"

    @property
    def input_channels(self) -> int:
        return self.layers[0].c_in

    def out_length(self, T: int) -> int:
        for layer in self.layers:
            T = dc.conv1d_length(T, layer.kernel, layer.stride, layer.padding)
        return T

    def out_features(self, T: int) -> int:
        return self.layers[-1].c_out * self.out_length(T)

    def to_dict(self) -> dict:
        return {
            "kind": "cnn",
            "dropout": self.dropout,
            "layers": [[l.c_in, l.c_out, l.kernel, l.stride, l.padding] for l in self.layers],
        }


@dataclass(frozen=True)
class LstmEncoderSpec:
    input_size: int = 11
    hidden: int = 64
    kind: str = "lstm"

    @property
    def input_channels(self) -> int:
        return self.input_size

    def out_features(self, T: int) -> int:
        return self.hidden

    def to_dict(self) -> dict:
        return {"kind": "lstm", "input_size": self.input_size, "hidden": self.hidden}


@dataclass(frozen=True)
class HeadSpec:
    in_features: int = 100
    out_features: int = 2

    def to_dict(self) -> dict:
        return {"in_features": self.in_features, "out_features": self.out_features}


def make_encoder_spec(kind: str, channels: int = 11):
    if kind == "lstm":
        return LstmEncoderSpec(input_size=channels)
    if kind == "cnn":
        return CnnEncoderSpec(layers=_paper_cnn_layers(channels))
    raise ValueError(f"unknown encoder kind {kind!r} (expected 'lstm' or 'cnn')")


def encoder_spec_from_dict(d: dict):
    if d["kind"] == "lstm":
        return LstmEncoderSpec(input_size=d["input_size"], hidden=d["hidden"])
    return CnnEncoderSpec(layers=tuple(ConvLayer(*l) for l in d["layers"]), dropout=d["dropout"])


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(spec, seed: int) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    Batch-norm scales start at 1 and shifts at 0.
    """
    rng = np.random.default_rng(seed)
    if isinstance(spec, LstmEncoderSpec):
        H, C = spec.hidden, spec.input_size
        return {
            "lstm.w_ih": _uniform(rng, H, (C, 4 * H)),
            "lstm.w_hh": _uniform(rng, H, (H, 4 * H)),
            "lstm.bias": _uniform(rng, H, (4 * H,)),
        }
    if isinstance(spec, CnnEncoderSpec):
        out = {}
        for i, l in enumerate(spec.layers):
            fan_in = l.c_in * l.kernel
            out[f"cnn{i}.weight"] = _uniform(rng, fan_in, (l.c_out, l.c_in, l.kernel))
            out[f"cnn{i}.bias"] = _uniform(rng, fan_in, (l.c_out,))
            out[f"cnn{i}.bn_gamma"] = np.ones(l.c_out)
            out[f"cnn{i}.bn_beta"] = np.zeros(l.c_out)
        return out
    if isinstance(spec, HeadSpec):
        return {
            "head.weight": _uniform(rng, spec.in_features, (spec.in_features, spec.out_features)),
            "head.bias": _uniform(rng, spec.in_features, (spec.out_features,)),
        }
    raise TypeError(f"no initialiser for {type(spec).__name__}")


def _check_input(series: dc.Tensor, channels: int) -> None:
    if series.data.ndim != 3 or series.shape[2] != channels:
        raise ShapeMismatchError(f"expected (N, T, {channels}) series, got {series.shape}")


def lstm_encode(params: dict[str, dc.Tensor], series: dc.Tensor, spec: LstmEncoderSpec) -> dc.Tensor:
    """Single-layer LSTM over (N, T, C); returns the final hidden state (N, H).

    Gate layout in the stacked weights is (input, forget, output, candidate).
    """
    series = dc.as_tensor(series)
    _check_input(series, spec.input_size)
    N, T, C = series.shape
    H = spec.hidden
    h = dc.Tensor(np.zeros((N, H)))
    c = dc.Tensor(np.zeros((N, H)))
    for t in range(T):
        # slicing per step keeps the scatter in take's backward small
        x_t = dc.take(series, (slice(None), t))
        z = dc.add(dc.matmul(x_t, params["lstm.w_ih"]), params["lstm.bias"])
        z = dc.add(z, dc.matmul(h, params["lstm.w_hh"]))
        gates = dc.sigmoid(dc.take(z, (slice(None), slice(0, 3 * H))))
        cand = dc.tanh(dc.take(z, (slice(None), slice(3 * H, 4 * H))))
        i_g = dc.take(gates, (slice(None), slice(0, H)))
        f_g = dc.take(gates, (slice(None), slice(H, 2 * H)))
        o_g = dc.take(gates, (slice(None), slice(2 * H, 3 * H)))
        c = dc.add(dc.mul(f_g, c), dc.mul(i_g, cand))
        h = dc.mul(o_g, dc.tanh(c))
    return h


def cnn_encode(
    params: dict[str, dc.Tensor],
    series: dc.Tensor,
    spec: CnnEncoderSpec,
    bn_states: list[dc.BatchNormState],
    train: bool,
    rng: np.random.Generator | None = None,
    update_stats: bool = True,
) -> dc.Tensor:
    """Conv -> batch norm -> ReLU -> dropout per layer, then channel-major flatten."""
    series = dc.as_tensor(series)
    _check_input(series, spec.input_channels)
    x = dc.transpose(series, (0, 2, 1))
    for i, layer in enumerate(spec.layers):
        x = dc.conv1d(x, params[f"cnn{i}.weight"], params[f"cnn{i}.bias"], layer.stride, layer.padding)
        x = dc.batchnorm1d(
            x, params[f"cnn{i}.bn_gamma"], params[f"cnn{i}.bn_beta"], bn_states[i], train, update_stats
        )
        x = dc.relu(x)
        x = dc.dropout(x, spec.dropout, train, rng)
    N = x.shape[0]
    return dc.reshape(x, (N, -1))


def head_forward(params: dict[str, dc.Tensor], encoder_features, static, trend=None):
    """Return ``(yield_hat, fraction_hat)``, each of shape (N,)."""
    parts = [dc.as_tensor(encoder_features), dc.as_tensor(static)]
    if trend is not None:
        parts.append(dc.as_tensor(trend))
    x = dc.concat(parts, axis=1)
    w = params["head.weight"]
    if x.shape[1] != w.shape[0]:
        raise ShapeMismatchError(f"head expects {w.shape[0]} input features, got {x.shape[1]}")
    raw = dc.add(dc.matmul(x, w), params["head.bias"])
    yield_hat = dc.softplus(dc.take(raw, (slice(None), 0)))
    fraction_hat = dc.sigmoid(dc.take(raw, (slice(None), 1)))
    return yield_hat, fraction_hat


class Encoder:
    """Bundles an encoder spec with its parameters and batch-norm state."""

    def __init__(self, spec, params: dict[str, np.ndarray]):
        self.spec = spec
        self.params = {k: dc.Parameter(v.copy(), name=k) for k, v in params.items()}
        self.bn_states = (
            [dc.BatchNormState.fresh(l.c_out) for l in spec.layers]
            if isinstance(spec, CnnEncoderSpec)
            else []
        )

    def __call__(self, series, train: bool = False, rng=None, update_stats: bool = True) -> dc.Tensor:
        if isinstance(self.spec, LstmEncoderSpec):
            return lstm_encode(self.params, series, self.spec)
        return cnn_encode(self.params, series, self.spec, self.bn_states, train, rng, update_stats)


def encode(spec, params: dict[str, np.ndarray], series: np.ndarray) -> np.ndarray:
    """Eval-mode encoding of a single (T, C) series or a (N, T, C) batch."""
    arr = np.asarray(series, dtype=np.float64)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    enc = Encoder(spec, params)
    out = enc(dc.Tensor(arr), train=False).data
    return out[0] if single else out
