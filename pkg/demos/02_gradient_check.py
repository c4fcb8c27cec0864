"""Checking the tape gradients against central differences.

Every parameter of the encoder, the head, the aggregation and the combined
loss is differentiated by the numpy tape in ``cropdisagg.diffcore``. Here
the tape gradient of the full weakly supervised loss is compared with
``(L(θ+ε) - L(θ-ε)) / 2ε`` for each coordinate.

Central differences lose precision when the loss is large relative to its
gradient. The parent labels below therefore sit within 2% of the model's
own outputs, which keeps the difference quotient well above float64 noise.

Run: ``python demos/02_gradient_check.py``  (about a minute)
"""

import time

import numpy as np

from cropdisagg import diffcore as dc
from cropdisagg import weaksup as ws
from cropdisagg.dataio import SupervisionBatch


def toy_batches(n_parents=2, n_children=3, T=8, C=11, S=6, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for p in range(n_parents):
        land = rng.uniform(0.5, 2.0, size=n_children)
        out.append(SupervisionBatch(
            parent_id=f"P{p}", year=2010, child_ids=[f"P{p}C{k}" for k in range(n_children)],
            seasonal=rng.normal(size=(n_children, T, C)), static=rng.normal(size=(n_children, S)),
            land_area=land, trend=rng.normal(size=5), trend_raw=rng.uniform(3, 8, size=5),
            label_yield=float(rng.uniform(3, 8)), label_area=float(0.3 * land.sum()), country="AA",
        ))
    return out


def loss_and_params(kind, variant, T):
    batches = toy_batches(T=T)
    model = ws.WsModel(kind, channels=11, static_len=6, T=T, variant=variant, seed=0)
    st = ws.stack(batches, model.uses_trend)
    means = ws.train_means(batches)
    ws.calibrate_output_bias(model, batches)
    if kind == "cnn":  # one train-mode pass so batch-norm statistics are not trivial
        model.forward_units(st, train=True, rng=np.random.default_rng(0))
    _, _, _, py, pa = model.forward_units(st, train=False)
    jitter = np.random.default_rng(1).normal(size=(2, len(batches)))
    st.label_yield = py.data.reshape(-1) * (1 + 0.02 * jitter[0])
    st.label_area = pa.data.reshape(-1) * (1 + 0.02 * jitter[1])

    def loss():
        _, _, _, py, pa = model.forward_units(st, train=False)
        return ws.combined_loss(py, pa, st.label_yield, st.label_area, means)

    return loss, model.params


# The LSTM is smooth, so a larger step trims roundoff. ReLU kinks in the CNN
# call for a smaller one. LSTM coordinates are sampled to keep this quick.
for kind, T, eps, sample in (("cnn", 8, 1e-5, None), ("lstm", 6, 1e-4, 1000)):
    for variant in ("trend", "no_trend"):
        loss, params = loss_and_params(kind, variant, T)
        n = sum(p.data.size for p in params.values())
        t0 = time.perf_counter()
        worst = dc.grad_check(loss, params, epsilon=eps, max_coords=sample)
        checked = n if sample is None else min(n, sample)
        print(f"{kind:4s} {variant:8s} {checked:5d}/{n} coords  eps={eps:g}  "
              f"worst rel err {worst:.2e}  ({time.perf_counter() - t0:.1f} s)")
