"""Shared fixtures: tiny on-disk datasets, toy supervision batches, small worlds."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest

from cropdisagg.dataio import SupervisionBatch
from cropdisagg.synth import SynthConfig, generate_world


def write_data_dir(
    root: Path,
    parents: dict[str, list[str]] | None = None,
    years=(2000, 2001),
    T: int = 4,
    C: int = 2,
    seed: int = 0,
    skip_series: set[tuple[str, int]] = frozenset(),
    skip_labels: set[tuple[str, int]] = frozenset(),
    short_series: set[tuple[str, int]] = frozenset(),
    land: float = 1000.0,
) -> Path:
    """Write a complete, schema-conforming data directory."""
    parents = parents or {"P1": ["P1C1", "P1C2"]}
    rng = np.random.default_rng(seed)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)

    def writer(name, header):
        fh = open(root / name, "w", newline="", encoding="utf-8")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        return fh, w

    fh, w = writer("regions.csv", ["id", "level", "parent_id", "country", "zone", "land_area_ha"])
    with fh:
        for p, kids in parents.items():
            w.writerow([p, "NUTS2", "", "AA", "Z1", land * len(kids)])
        for p, kids in parents.items():
            for k in kids:
                w.writerow([k, "NUTS3", p, "AA", "Z1" if k.endswith("1") else "Z2", land])

    fh, w = writer("seasonal.csv", ["region_id", "year", "t", "channel", "value"])
    with fh:
        for kids in parents.values():
            for k in kids:
                for y in years:
                    if (k, y) in skip_series:
                        continue
                    steps = T - 1 if (k, y) in short_series else T
                    for t in range(steps):
                        for c in range(C):
                            w.writerow([k, y, t, f"ch{c}", repr(float(rng.normal()))])

    fh, w = writer("static.csv", ["region_id", "feature", "value"])
    with fh:
        for kids in parents.values():
            for k in kids:
                for f in ("sm_whc", "elev_mean"):
                    w.writerow([k, f, repr(float(rng.uniform(1, 5)))])

    fh, w = writer("labels_nuts2.csv", ["parent_id", "year", "yield_t_ha", "crop_area_ha"])
    with fh:
        for p, kids in parents.items():
            for y in years:
                if (p, y) not in skip_labels:
                    w.writerow([p, y, repr(float(rng.uniform(3, 8))), repr(float(0.3 * land * len(kids)))])
    return root


def make_toy_batches(
    n_parents: int = 2,
    n_children: int = 3,
    T: int = 8,
    C: int = 11,
    S: int = 6,
    seed: int = 0,
    land_scale: float = 1.0,
    year: int = 2010,
) -> list[SupervisionBatch]:
    """Random parent-year batches with land areas of order ``land_scale``."""
    rng = np.random.default_rng(seed)
    out = []
    for p in range(n_parents):
        land = land_scale * rng.uniform(0.5, 2.0, size=n_children)
        out.append(SupervisionBatch(
            parent_id=f"P{p}",
            year=year,
            child_ids=[f"P{p}C{k}" for k in range(n_children)],
            seasonal=rng.normal(size=(n_children, T, C)),
            static=rng.normal(size=(n_children, S)),
            land_area=land,
            trend=rng.normal(size=5),
            trend_raw=rng.uniform(3, 8, size=5),
            label_yield=float(rng.uniform(3, 8)),
            label_area=float(0.3 * land.sum()),
            country="AA",
        ))
    return out


@pytest.fixture
def data_dir(tmp_path):
    return write_data_dir(tmp_path / "data")


@pytest.fixture(scope="session")
def small_world():
    """A reduced world: 2 countries x 2 parents x 3 children, 12 years, T=12."""
    cfg = SynthConfig(parents_per_country=2, children_per_parent=3, n_years=12, T=12, S=9, seed=3)
    return generate_world(cfg)


def full_model_loss(
    kind: str, variant: str = "trend", T: int | None = None, seed: int = 0, label_noise: float = 0.02
):
    """Encoder + head + aggregation + combined loss on a 2-parent x 3-child toy batch.

    Returns ``(loss_fn, params)``; ``loss_fn`` is deterministic (dropout off,
    batch-norm statistics frozen after one warm-up pass). Parent labels are
    placed within ``label_noise`` (relative) of the model's own predictions.
    Finite-difference roundoff scales with the loss while the gradients scale
    with its square root, so a small residual keeps the check well above the
    float64 noise floor. Any parameter point is a valid place to check.
    """
    from cropdisagg import weaksup as ws

    T = T or (8 if kind == "cnn" else 6)
    batches = make_toy_batches(n_parents=2, n_children=3, T=T, C=11, S=6, seed=seed)
    model = ws.WsModel(kind, channels=11, static_len=6, T=T, variant=variant, seed=seed)
    st = ws.stack(batches, model.uses_trend)
    means = ws.train_means(batches)
    ws.calibrate_output_bias(model, batches)  # start near the labels, as training does
    if kind == "cnn":  # give the running statistics non-trivial values
        model.forward_units(st, train=True, rng=np.random.default_rng(seed))
    _, _, _, py, pa = model.forward_units(st, train=False)
    jitter = np.random.default_rng(seed + 1).normal(size=(2, len(batches)))
    st.label_yield = py.data.reshape(-1) * (1 + label_noise * jitter[0])
    st.label_area = pa.data.reshape(-1) * (1 + label_noise * jitter[1])

    def loss_fn():
        _, _, _, py, pa = model.forward_units(st, train=False)
        return ws.combined_loss(py, pa, st.label_yield, st.label_area, means)

    return loss_fn, model.params


TINY_RUN = {
    "lr_grid": [0.003],
    "l2_grid": [0.0],
    "max_epochs": 3,
    "gbdt_grid": [[10, 2, 0.1]],
    "gbdt_min_samples_leaf": 2,
}


@pytest.fixture(scope="session")
def tiny_world():
    """Smallest world on which all five tuning folds have data: 16 years, 4 parents x 3 children."""
    cfg = SynthConfig(parents_per_country=2, children_per_parent=3, n_years=16, T=12, S=9, seed=1)
    return generate_world(cfg)


@pytest.fixture(scope="session")
def tiny_data(tiny_world, tmp_path_factory):
    from cropdisagg.synth import export_world

    out = tmp_path_factory.mktemp("tiny") / "data"
    export_world(tiny_world, out)
    return out


@pytest.fixture(scope="session")
def tiny_config(tmp_path_factory):
    from cropdisagg.config import write_flat_config

    path = tmp_path_factory.mktemp("cfg") / "run.toml"
    write_flat_config(path, TINY_RUN)
    return path


# ---------------------------------------------------------------- acceptance reporting

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records and prints one PASS/FAIL line."""

    def record(n: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[n] = (bool(ok), detail)
        print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
