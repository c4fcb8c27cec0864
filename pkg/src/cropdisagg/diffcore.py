"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded in
execution order together with a closure mapping the output cotangent to the
input cotangents. ``Tape.backward`` walks that record once, in reverse.

>>> w = Parameter(np.array([3.0]))
>>> with Tape() as tape:
...     out = mul(w, w)
>>> tape.backward(out, {"w": w})["w"]
array([6.])
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import NotScalarError, NumericalError, SchemaMismatchError, ShapeMismatchError

CHECKPOINT_FORMAT = "cropdisagg-checkpoint"
CHECKPOINT_VERSION = 1

_TAPES: list["Tape"] = []


class Tensor:
    """A float64 array plus the bookkeeping needed to sit on a tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)

    def __getitem__(self, key):
        return take(self, key)


class Parameter(Tensor):
    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], tuple]


class Tape:
    """Records differentiable operations for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        self.nodes.append(_Node(out, inputs, vjp))

    def backward(
        self, output: Tensor, params: Mapping[str, Tensor] | None = None
    ) -> dict[str, np.ndarray]:
        """Gradient of a one-element ``output`` with respect to ``params``.

        Parameters that do not influence ``output`` receive exact zeros.
        Gradients are also stored on each parameter's ``grad`` slot.
        """
        if output.size != 1:
            raise NotScalarError(f"backward needs a 1-element output, got shape {output.shape}")
        cot: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for node in reversed(self.nodes):
            g = cot.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in cot:
                    cot[key] = cot[key] + gi
                else:
                    cot[key] = gi
        grads = {}
        for name, p in (params or {}).items():
            g = cot.get(id(p))
            g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
            p.grad = g
            grads[name] = g
        return grads


def backward(tape: Tape, output: Tensor, params: Mapping[str, Tensor] | None = None):
    return tape.backward(output, params)


# ---------------------------------------------------------------- helpers


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite value produced by {op}")
    return arr


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    out = Tensor(_finite(data, op))
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatchError(f"{op}: {a.shape} vs {b.shape}") from exc


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data  # non-finite results are reported by _emit
    return _emit(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data**2, (a,), lambda g: (2.0 * a.data * g,), "square")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)  # keeps full relative precision in both tails


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _emit(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _emit(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    return _emit(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


# ---------------------------------------------------------------- linear algebra / shape


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: {a.shape} @ {b.shape}")
    return _emit(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatchError(f"concat: {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def take(a, key) -> Tensor:
    """Basic (non-fancy) indexing; gradient scatters back into zeros."""
    a = as_tensor(a)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] += g
        return (full,)

    return _emit(a.data[key], (a,), vjp, "take")


slice_ = take


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatchError(f"reshape: {a.shape} -> {shape}") from exc
    return _emit(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(np.sum(a.data, axis=axis), (a,), vjp, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _emit(np.mean(a.data, axis=axis), (a,), vjp, "mean")


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mse: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    return _emit(
        np.array(np.mean(diff * diff)),
        (a, b),
        lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n),
        "mse",
    )


# ---------------------------------------------------------------- layers


def conv1d_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def conv1d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over ``x`` of shape (N, C_in, L).

    ``weight`` is (C_out, C_in, k); output is (N, C_out, L_out).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 3 or weight.data.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatchError(f"conv1d: input {x.shape}, weight {weight.shape}")
    k = weight.shape[2]
    l_out = conv1d_length(x.shape[2], k, stride, padding)
    if l_out < 1:
        raise ShapeMismatchError(f"conv1d: input length {x.shape[2]} too short for kernel {k}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    idx = stride * np.arange(l_out)[:, None] + np.arange(k)[None, :]
    cols = xp[:, :, idx]  # (N, C_in, L_out, k)
    out = np.einsum("nclk,ock->nol", cols, weight.data, optimize=True)
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None]
        inputs = inputs + (bias,)

    def vjp(g):
        gw = np.einsum("nol,nclk->ock", g, cols, optimize=True)
        gcols = np.einsum("nol,ock->nclk", g, weight.data, optimize=True)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, idx[:, j]] += gcols[:, :, :, j]
        gx = gxp[:, :, padding : padding + x.shape[2]]
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 2))
        return gx, gw

    return _emit(out, inputs, vjp, "conv1d")


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels))


def batchnorm1d(x, gamma, beta, state: BatchNormState, train: bool, update_stats: bool = True) -> Tensor:
    """Batch normalisation over (N, C) or (N, C, L) inputs.

    In training mode the batch statistics are used and, unless
    ``update_stats`` is False, folded into the running estimates with the
    state's momentum (unbiased variance, as most frameworks do). Eval mode
    uses the running estimates only.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim not in (2, 3) or x.shape[1] != gamma.shape[0]:
        raise ShapeMismatchError(f"batchnorm1d: input {x.shape}, gamma {gamma.shape}")
    axes = (0,) if x.data.ndim == 2 else (0, 2)
    bshape = (1, -1) if x.data.ndim == 2 else (1, -1, 1)
    g_ = gamma.data.reshape(bshape)
    if train:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.data.size // x.shape[1]
        if update_stats:
            unbiased = var * m / max(m - 1, 1)
            state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mu
            state.running_var = (1 - state.momentum) * state.running_var + state.momentum * unbiased
    else:
        mu, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = g_ * xhat + beta.data.reshape(bshape)

    def vjp(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        if train:
            gm = g.mean(axis=axes, keepdims=True)
            gxm = (g * xhat).mean(axis=axes, keepdims=True)
            gx = g_ * inv.reshape(bshape) * (g - gm - xhat * gxm)
        else:
            gx = g * g_ * inv.reshape(bshape)
        return gx, gg, gb

    return _emit(out, (x, gamma, beta), vjp, "batchnorm1d")


def dropout(x, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    x = as_tensor(x)
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _emit(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------- verification


def grad_check(
    function: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    epsilon: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Worst relative disagreement between tape and central-difference gradients.

    ``function`` must rebuild its graph from ``params`` on every call and be
    deterministic. With ``max_coords`` set, that many coordinates per
    parameter are sampled (seeded) instead of checking all of them.
    """
    with Tape() as tape:
        out = function()
    grads = tape.backward(out, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        g_ad = grads[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = function().item()
            flat[i] = orig - epsilon
            f_minus = function().item()
            flat[i] = orig
            g_fd = (f_plus - f_minus) / (2.0 * epsilon)
            err = abs(g_ad[i] - g_fd) / max(1e-8, abs(g_ad[i]) + abs(g_fd))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- optimisation


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    l2_lambda: float = 0.0,
) -> tuple[Mapping[str, Tensor], AdamState]:
    """One Adam update; the L2 term ``l2_lambda * w`` joins the gradient first."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatchError(f"adam_step: grad {g.shape} vs param {p.shape} for {name}")
        g = g + l2_lambda * p.data
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / (1 - b1**state.t)
        vhat = v / (1 - b2**state.t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state


sgd_adam_step = adam_step


# ---------------------------------------------------------------- checkpoints


def save_arrays(path, header: dict, arrays: Mapping[str, np.ndarray]) -> None:
    """Write named arrays as versioned JSON.

    Layout: ``{"format", "version", "header", "arrays": {name: {"shape", "data"}}}``
    with ``data`` flattened row-major. Floats are written with ``repr``
    precision so a load reproduces every bit.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "header": header,
        "arrays": {
            name: {"shape": list(np.shape(a)), "data": np.asarray(a, dtype=np.float64).reshape(-1).tolist()}
            for name, a in sorted(arrays.items())
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise SchemaMismatchError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise SchemaMismatchError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    arrays = {
        name: np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
        for name, spec in doc["arrays"].items()
    }
    return doc["header"], arrays
