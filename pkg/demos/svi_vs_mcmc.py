"""Full-rank SVI against the random-walk Metropolis oracle on a small cohort.

    python demos/svi_vs_mcmc.py

The sampler is the reference: it is exact in the limit but far slower per
effective draw. Both runs together take about a minute.
"""
import numpy as np

from bprvi.mcmc import McmcConfig, rhat, rwm_sample_target
from bprvi.model import ModelConfig
from bprvi.posterior import draw_posterior, relabel, samples_from_raw
from bprvi.simulation import SimulationSpec, generate_cohort, match_clusters
from bprvi.svi import SviConfig, fit_target
from bprvi.transforms import BPRTarget

data, truth = generate_cohort(SimulationSpec(n=500, k_true=2, d_m=3, d_r=1, seed=11))
cfg = ModelConfig(k_max=2)
target = BPRTarget(data, cfg)

state, trace = fit_target(target, SviConfig(max_steps=10_000, seed=1))
q = relabel(draw_posterior(state, target.layout, cfg, 20_000, np.random.default_rng(2)))
print(f"SVI {trace.wall_time:.1f} s, {trace.terminated_reason}")

draws = rwm_sample_target(target, McmcConfig(n_chains=4, n_warmup=10_000, n_samples=40_000, seed=3))
m = relabel(samples_from_raw(draws.flat, target.layout, cfg, "mcmc", draws.chain_index))
print("RWM acceptance per chain", np.round(draws.acceptance_rate, 3))
C, S = draws.draws.shape[:2]
print("max split R-hat", rhat(m.phi.reshape(C, S, -1)).max().round(4))

match = match_clusters(q.phi.mean(axis=0), m.phi.mean(axis=0))
print(f"\n{'':>12} {'SVI':>8} {'RWM':>8} {'RWM sd':>8} {'z':>6}")
rows = [("beta[age]", q.beta[:, 0], m.beta[:, 0])]
for k in range(2):
    for j in range(3):
        rows.append((f"phi[{k + 1},{j + 1}]", q.phi[:, match[k], j], m.phi[:, k, j]))
for name, a, b in rows:
    z = (a.mean() - b.mean()) / b.std()
    print(f"{name:>12} {a.mean():8.3f} {b.mean():8.3f} {b.std():8.3f} {z:6.2f}")
print("\nSVI sd / RWM sd:", np.round(q.phi[:, match].reshape(len(q.phi), -1).std(0) / m.phi.reshape(C * S, -1).std(0), 2))
