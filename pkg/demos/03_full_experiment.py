"""One complete experiment on the default synthetic world.

The world has 2 countries, 10 parent regions, 60 children and 20 years.
The last 6 years are held out. Two LSTM models are trained on parent
labels only, one with the parent's five-year yield trend as input and one
without. They are then scored against the hidden child truth next to two
reference forecasts:

* ``naive_trend`` fits a line to the parent's last five yields and gives
  every child that value;
* ``trend_l2`` is the same line scored at the parent level.

A reduced learning-rate grid keeps the run to a few minutes on one core.
Set ``DISAGG_THREADS`` to tune with several processes.

Run: ``python demos/03_full_experiment.py [seed]``
"""

import sys
import time

import numpy as np

from cropdisagg import pipeline as pl
from cropdisagg.synth import SynthConfig, generate_world

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
world = generate_world(SynthConfig(seed=seed))
cfg = pl.RunConfig(seed=seed, lr_grid=(1e-3, 3e-3), l2_grid=(0.0, 1e-4), workers=pl.workers_from_env())

t0 = time.perf_counter()
result = pl.run_experiment(world.dataset, world.hierarchy, cfg, baselines=("naive_trend", "trend_l2"))
print(f"finished in {time.perf_counter() - t0:.0f} s\n")

for level in ("NUTS3", "NUTS2"):
    rep = result.reports[level]
    print(f"{level}: NRMSE (%) over {rep['n']} region-years, reference {rep['reference']}")
    for name, m in sorted(rep["models"].items(), key=lambda kv: kv[1]["nrmse"]):
        p = "" if m["p_value"] is None else f"   Wilcoxon p vs reference {m['p_value']:.2g}"
        print(f"  {name:<18} {m['nrmse']:6.2f}{p}")
    print()

# Within each parent-year, how well do the children's predicted yields
# track the true spread between them? The naive forecast has no spread.
summ = result.spatial_summary
print("within-parent spread (mean over parent-years)")
print(f"  sd truth        {np.mean([s['sd_truth'] for s in summ]):.3f} t/ha")
for name in ("with_trend", "no_trend", "naive_trend"):
    sd = np.mean([s[f"sd_{name}"] for s in summ])
    rc = np.mean([s[f"rank_corr_{name}"] for s in summ])
    print(f"  sd {name:<12} {sd:.3f} t/ha   rank correlation with truth {rc:+.2f}")

for tag, run in result.ws_runs.items():
    h = run.model.hyper
    print(f"\n{tag}: lr {h['lr']:g}, l2 {h['l2_lambda']:g}, {h['epochs']} epochs")
