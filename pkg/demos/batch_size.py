"""Bias and coverage of the regression coefficients as the SVI batch shrinks.

    python demos/batch_size.py [replicates]

Every batch fraction sees the same cohorts and seeds, so differences between
rows are paired. Ten replicates take about five minutes.
"""
import sys

import numpy as np

from bprvi.model import ModelConfig
from bprvi.simulation import SimulationSpec, batch_size_sweep
from bprvi.svi import SviConfig

m = int(sys.argv[1]) if len(sys.argv) > 1 else 10
spec = SimulationSpec(n=2000, m=m, k_true=3, seed=5)
results = batch_size_sweep(spec, [0.01, 0.1, 1.0], ModelConfig(k_max=3), SviConfig(max_steps=5000),
                           progress=lambda r: print(".", end="", flush=True))
print()
b = results[0].select("beta")
names = [n for n, keep in zip(results[0].names, b) if keep]
print(f"{'fraction':>8} {'mean coverage':>14}  bias per coefficient ({', '.join(names)})")
for r in results:
    print(f"{r.batch_fraction:8.2f} {r.coverage[b].mean():14.3f}  {np.round(r.bias[b], 3)}")
