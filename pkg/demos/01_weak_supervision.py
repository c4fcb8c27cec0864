"""Learning child yields from parent totals.

A parent region reports one yield and one crop area per year. Its children
report nothing. The model predicts a yield and a crop fraction for every
child, turns the fraction into an area with the child's land area, and
aggregates the children back to the parent with area weights. Only that
aggregate is compared with the label.

Run: ``python demos/01_weak_supervision.py``
"""

import numpy as np

from cropdisagg import weaksup as ws
from cropdisagg.synth import SynthConfig, generate_world
from cropdisagg.dataio import assemble_batches, standardize

# --- 1. aggregation by hand -------------------------------------------------
# Two children: 50 ha at 4 t/ha and 75 ha at 6 t/ha.
child = ws.ChildPrediction(
    yield_hat=np.array([4.0, 6.0]),
    fraction_hat=np.array([0.5, 0.75]),
    area_hat=np.array([50.0, 75.0]),
)
y, a, w = ws.aggregate(child)
print(f"parent yield {y:.2f} t/ha, parent area {a:.0f} ha, weights {w}")
# parent yield 5.20 t/ha, parent area 125 ha, weights [0.4 0.6]

# --- 2. a small synthetic world ---------------------------------------------
world = generate_world(SynthConfig(parents_per_country=2, children_per_parent=4, n_years=14, T=12, seed=3))
ds, h = world.dataset, world.hierarchy
train_years, val_years = ds.years[:-3], ds.years[-3:]
scaled_ds, _ = standardize(ds, train_years)
train_b = assemble_batches(scaled_ds, h, train_years)
val_b = assemble_batches(scaled_ds, h, val_years)
print(f"{len(train_b)} training parent-years, {len(val_b)} validation parent-years "
      f"({len(train_b.skipped)} skipped for missing trend history)")

model = ws.WsModel("lstm", channels=ds.C, static_len=ds.S, T=ds.T, variant="trend", seed=0)
result = ws.train(model, train_b, val_b, ws.TrainConfig(lr=3e-3, l2_lambda=0.0, max_epochs=25, seed=0))
for epoch, tr, va in result.log:
    print(f"  epoch {epoch:2d}  train {tr:10.3f}  validation {va:10.3f}")
print(f"stopped after epoch {result.stopped_epoch}, kept epoch {result.best_epoch} "
      f"(validation loss {result.best_val_loss:.4f})")

# --- 3. what the children look like ------------------------------------------
batch = val_b[0]
pred = model.predict_children(batch)
truth = ds.truth[[ds.child_ids.index(c) for c in batch.child_ids], ds.year_index(batch.year), 0]
py, pa, _ = ws.aggregate(pred)
print(f"\n{batch.parent_id} {batch.year}: label {batch.label_yield:.2f} t/ha, aggregate {py:.2f} t/ha")
print("child      truth   predicted")
for cid, t, p in zip(batch.child_ids, truth, pred.yield_hat):
    print(f"{cid:<10} {t:6.2f}  {p:8.2f}")
# No child label was ever seen, yet the children differ: the spread comes
# from their own weather series and static features. A world this small
# gives the encoder little to learn from, and validation stops early; the
# full protocol on the default world is in 03_full_experiment.py.
