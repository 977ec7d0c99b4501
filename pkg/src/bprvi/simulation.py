"""Synthetic cohorts and the replicate bias / coverage study."""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit, logit

from .errors import DomainError
from .model import CohortData, ModelConfig

logger = logging.getLogger(__name__)

DEFAULT_WEIGHTS = (0.833, 0.166, 0.25, 0.2083, 0.2916)
DEPRIVATION_NAMES = ("dep1", "dep2", "dep4", "dep5")


def ring_profiles(k_true: int, d_m: int, high: float = 0.8, low: float = 0.02) -> np.ndarray:
    """Each cluster is high on two variables, each shared with one neighbour.

    Clusters sit on a ring over the first ``k_true`` variables; with two
    clusters the ring would make them identical, so a chain over three
    variables is used instead.
    """
    span = k_true if k_true >= 3 else k_true + 1
    if span > d_m:
        raise DomainError(f"profile layout needs d_m >= {span}")
    phi = np.full((k_true, d_m), low)
    for k in range(k_true):
        phi[k, k] = high
        if k_true > 1:
            phi[k, (k + 1) % span] = high
    return phi


def default_beta(d_r: int) -> np.ndarray:
    """Age slope 0.1, male 0.5, deprivation dummies (+0.4, +0.2, -0.2, -0.4)."""
    base = [0.1, 0.5, 0.4, 0.2, -0.2, -0.4]
    if d_r <= len(base):
        return np.array(base[:d_r])
    return np.array(base + [0.0] * (d_r - len(base)))


@dataclass
class SimulationSpec:
    n: int = 8000
    m: int = 800
    d_m: int = 12
    d_r: int = 6
    k_true: int = 5
    cluster_weights: Optional[list] = None
    phi_true: Optional[list] = None
    beta_true: Optional[list] = None
    intercepts_true: Optional[list] = None
    age_mean: float = 45.0
    age_var: float = 100.0
    phi_high: float = 0.8
    phi_low: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.k_true < 1:
            raise DomainError("k_true must be >= 1")
        if self.n < 1 or self.m < 1:
            raise DomainError("n and m must be >= 1")
        if self.d_m < 1 or self.d_r < 0:
            raise DomainError("d_m must be >= 1 and d_r >= 0")
        if self.age_var <= 0:
            raise DomainError("age_var must be positive")
        if self.cluster_weights is None:
            if self.k_true <= len(DEFAULT_WEIGHTS):
                self.cluster_weights = list(DEFAULT_WEIGHTS[: self.k_true])
            else:
                self.cluster_weights = [1.0] * self.k_true
        w = np.asarray(self.cluster_weights, dtype=float)
        if w.shape != (self.k_true,) or np.any(w <= 0):
            raise DomainError("cluster_weights must be k_true positive values")
        if self.phi_true is None:
            self.phi_true = ring_profiles(self.k_true, self.d_m, self.phi_high, self.phi_low).tolist()
        phi = np.asarray(self.phi_true, dtype=float)
        if phi.shape != (self.k_true, self.d_m):
            raise DomainError(f"phi_true must be {self.k_true}x{self.d_m}")
        if np.any(phi <= 0.01) or np.any(phi >= 1):
            raise DomainError("phi_true entries must lie in (0.01, 1)")
        if self.beta_true is None:
            self.beta_true = default_beta(self.d_r).tolist()
        if len(self.beta_true) != self.d_r:
            raise DomainError("beta_true must have d_r entries")
        if self.intercepts_true is None:
            self.intercepts_true = np.linspace(-1.0, -5.0, self.k_true).tolist() if self.k_true > 1 else [-2.0]
        if len(self.intercepts_true) != self.k_true:
            raise DomainError("intercepts_true must have k_true entries")

    @property
    def weights(self) -> np.ndarray:
        w = np.asarray(self.cluster_weights, dtype=float)
        return w / w.sum()

    @property
    def x_names(self) -> list:
        return [f"x{j + 1}" for j in range(self.d_m)]

    @property
    def w_names(self) -> list:
        names = ["age", "male", *DEPRIVATION_NAMES]
        if self.d_r <= len(names):
            return names[: self.d_r]
        return names + [f"w{j + 1}" for j in range(len(names), self.d_r)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationSpec":
        from .config import strict_kwargs

        return cls(**strict_kwargs(cls, d, "simulation spec"))


@dataclass
class GroundTruth:
    weights: np.ndarray
    phi: np.ndarray
    beta0: np.ndarray
    beta: np.ndarray
    z: np.ndarray
    age_center: float

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "phi": self.phi.tolist(),
            "beta0": self.beta0.tolist(),
            "beta": self.beta.tolist(),
            "z": (self.z + 1).tolist(),
            "age_center": self.age_center,
        }


def replicate_rng(seed: int, replicate_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(replicate_index)]))


def generate_cohort(spec: SimulationSpec, replicate_index: int = 0):
    """Draw one cohort. Returns ``(CohortData, GroundTruth)``.

    Response covariates: centred age (normal with ``age_var`` variance), a male
    indicator, then deprivation-quintile dummies against the middle quintile.
    """
    rng = replicate_rng(spec.seed, replicate_index)
    n, k = spec.n, spec.k_true
    phi = np.asarray(spec.phi_true, dtype=float)
    beta = np.asarray(spec.beta_true, dtype=float)
    beta0 = np.asarray(spec.intercepts_true, dtype=float)
    z = rng.choice(k, size=n, p=spec.weights)
    x = (rng.random((n, spec.d_m)) < phi[z]).astype(float)

    cols = []
    age_center = 0.0
    if spec.d_r >= 1:
        age = rng.normal(spec.age_mean, math.sqrt(spec.age_var), size=n)
        age_center = float(age.mean())
        cols.append(age - age_center)
    if spec.d_r >= 2:
        cols.append((rng.random(n) < 0.5).astype(float))
    if spec.d_r >= 3:
        quint = rng.integers(1, 6, size=n)
        for q in (1, 2, 4, 5)[: spec.d_r - 2]:
            cols.append((quint == q).astype(float))
    for _ in range(max(0, spec.d_r - 6)):
        cols.append((rng.random(n) < 0.5).astype(float))
    w = np.column_stack(cols) if cols else np.zeros((n, 0))
    y = (rng.random(n) < expit(beta0[z] + w @ beta)).astype(float)

    perm = rng.permutation(n)
    data = CohortData(x[perm], w[perm], y[perm], tuple(spec.x_names), tuple(spec.w_names))
    truth = GroundTruth(spec.weights, phi, beta0, beta, z[perm], age_center)
    return data, truth


def bias(estimates, truth: float) -> float:
    """Mean of ``estimate - truth`` over replicates."""
    est = np.asarray(estimates, dtype=float)
    if est.size < 1:
        raise DomainError("bias needs at least one estimate")
    return float(np.mean(est - truth))


def logodds_bias(estimates, truth: float) -> float:
    """Bias of probability estimates measured on the log-odds scale."""
    est = np.asarray(estimates, dtype=float)
    if np.any((est <= 0) | (est >= 1)) or not 0 < truth < 1:
        raise DomainError("log-odds bias needs probabilities strictly inside (0, 1)")
    return bias(logit(est), float(logit(truth)))


def coverage(intervals, truth: float) -> float:
    """Fraction of closed intervals ``[lo, hi]`` containing ``truth``."""
    iv = np.asarray(intervals, dtype=float).reshape(-1, 2)
    if np.any(iv[:, 0] > iv[:, 1]):
        raise DomainError("interval with lo > hi")
    if iv.shape[0] == 0:
        return float("nan")
    return float(np.mean((iv[:, 0] <= truth) & (truth <= iv[:, 1])))


def match_clusters(phi_fit, phi_true, exhaustive_limit: int = 8) -> np.ndarray:
    """Assign each true cluster to a distinct fitted cluster.

    Minimises the summed absolute log-odds distance between matched profiles.
    Exhaustive over injective assignments when ``k_fit <= exhaustive_limit``,
    otherwise the Hungarian solution (also exact). Returns, for each true
    cluster, the index of its fitted cluster.
    """
    lf = logit(np.asarray(phi_fit, dtype=float))
    lt = logit(np.asarray(phi_true, dtype=float))
    k_fit, k_true = lf.shape[0], lt.shape[0]
    if k_fit < k_true:
        raise DomainError(f"cannot match {k_true} true clusters to {k_fit} fitted clusters")
    cost = np.abs(lt[:, None, :] - lf[None, :, :]).sum(-1)
    if k_fit <= exhaustive_limit:
        perms = np.array(list(itertools.permutations(range(k_fit), k_true)))
        totals = cost[np.arange(k_true), perms].sum(axis=1)
        return perms[int(np.argmin(totals))]
    rows, cols = linear_sum_assignment(cost)
    out = np.empty(k_true, dtype=int)
    out[rows] = cols
    return out


@dataclass
class StudyResult:
    """Per-parameter bias and coverage over the successful replicates.

    Bias is ``estimate - truth``; ``logodds_bias`` is filled for the profile
    probabilities only.
    """

    names: list
    kind: list
    truth: np.ndarray
    bias: np.ndarray
    logodds_bias: np.ndarray
    coverage: np.ndarray
    mean_width: np.ndarray
    n_replicates: int
    n_failed: int
    records: list = field(default_factory=list)
    batch_fraction: Optional[float] = None
    fitter: str = "svi"
    nonempty: list = field(default_factory=list)

    def rows(self) -> list:
        return [
            {
                "parameter": name,
                "kind": kind,
                "truth": float(t),
                "bias": float(b),
                "logodds_bias": None if not np.isfinite(lb) else float(lb),
                "coverage": float(c),
                "mean_interval_width": float(wd),
            }
            for name, kind, t, b, lb, c, wd in zip(
                self.names, self.kind, self.truth, self.bias, self.logodds_bias,
                self.coverage, self.mean_width,
            )
        ]

    def select(self, kind: str) -> np.ndarray:
        return np.array([k == kind for k in self.kind])

    def to_dict(self) -> dict:
        return {
            "fitter": self.fitter,
            "batch_fraction": self.batch_fraction,
            "n_replicates": self.n_replicates,
            "n_failed": self.n_failed,
            "parameters": self.rows(),
            "nonempty_clusters": self.nonempty,
            "records": self.records,
        }


def _tracked(spec: SimulationSpec):
    names, kind, truth = [], [], []
    for j, w in enumerate(spec.w_names):
        names.append(f"beta[{w}]")
        kind.append("beta")
        truth.append(spec.beta_true[j])
    for k in range(spec.k_true):
        for j, x in enumerate(spec.x_names):
            names.append(f"phi[{k + 1},{x}]")
            kind.append("phi")
            truth.append(spec.phi_true[k][j])
    return names, kind, np.array(truth, dtype=float)


def truth_samples(truth: GroundTruth, model_cfg: ModelConfig, n_draws: int = 100):
    """Point-mass sample set at the true parameters (harness self-test)."""
    from .posterior import samples_from_raw
    from .transforms import ParamLayout

    k_true, p = truth.phi.shape
    k = model_cfg.k_max
    if k < k_true:
        raise DomainError("k_max smaller than the true cluster count")
    eps = model_cfg.epsilon
    lay = ParamLayout(k, p, truth.beta.shape[0])
    pi = np.zeros(k)
    pi[:k_true] = truth.weights
    rest = 1.0 - np.concatenate([[0.0], np.cumsum(pi)[:-1]])
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(rest[:-1] > 0, pi[:-1] / rest[:-1], 0.5)
    v = np.clip(v, 1e-12, 1 - 1e-12)
    phi = np.full((k, p), 0.5)
    phi[:k_true] = truth.phi
    beta0 = np.zeros(k)
    beta0[:k_true] = truth.beta0
    raw = np.empty(lay.dim)
    raw[lay.v] = logit(v)
    raw[lay.alpha] = 0.0
    raw[lay.phi] = logit((phi.ravel() - eps) / (1 - 2 * eps))
    raw[lay.beta0] = beta0
    raw[lay.beta] = truth.beta
    s = samples_from_raw(np.tile(raw, (n_draws, 1)), lay, model_cfg, "oracle")
    # exact truth rather than a logit round trip
    s.phi[:, :k_true] = truth.phi
    s.beta[:] = truth.beta
    s.pi[:] = pi
    return s


def _replicate_seed(seed: int, replicate_index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(replicate_index), 1]).generate_state(1)[0])


def fit_replicate(spec: SimulationSpec, replicate_index: int, model_cfg: ModelConfig, svi_cfg=None,
                  fitter: str = "svi", mcmc_cfg=None, n_draws: int = 1000, mass: float = 0.95) -> dict:
    """Generate, fit, relabel and match one replicate. Returns a record dict."""
    from dataclasses import replace

    from .mcmc import McmcConfig, rwm_sample_target
    from .posterior import draw_posterior, relabel, samples_from_raw
    from .svi import SviConfig, fit_target
    from .transforms import BPRTarget

    data, truth = generate_cohort(spec, replicate_index)
    target = BPRTarget(data, model_cfg)
    rseed = _replicate_seed(spec.seed, replicate_index)
    rec = {"replicate": replicate_index, "ok": True}
    if fitter == "svi":
        cfg = replace(svi_cfg or SviConfig(), seed=_replicate_seed((svi_cfg or SviConfig()).seed, replicate_index))
        state, trace = fit_target(target, cfg)
        rec["terminated"] = trace.terminated_reason
        rec["steps"] = len(trace.elbo_history)
        rec["wall_time"] = trace.wall_time
        if trace.terminated_reason == "failed":
            return {**rec, "ok": False, "error": trace.error}
        samples = draw_posterior(state, target.layout, model_cfg, n_draws, np.random.default_rng(rseed))
    elif fitter == "mcmc":
        cfg = replace(mcmc_cfg or McmcConfig(), seed=rseed)
        draws = rwm_sample_target(target, cfg)
        rec["acceptance_rate"] = draws.acceptance_rate.tolist()
        samples = samples_from_raw(draws.flat, target.layout, model_cfg, "mcmc", draws.chain_index)
    elif fitter == "oracle":
        samples = truth_samples(truth, model_cfg, max(n_draws, 100))
    else:
        raise DomainError(f"unknown fitter {fitter!r}")

    s = relabel(samples)
    phi_mean = s.phi.mean(axis=0)
    match = match_clusters(phi_mean, truth.phi)
    est, lo, hi = [], [], []
    from .posterior import hdi

    for j in range(truth.beta.shape[0]):
        d = s.beta[:, j]
        est.append(d.mean())
        iv = hdi(d, mass)
        lo.append(iv[0])
        hi.append(iv[1])
    for k in range(truth.phi.shape[0]):
        for j in range(truth.phi.shape[1]):
            d = s.phi[:, match[k], j]
            est.append(d.mean())
            iv = hdi(d, mass)
            lo.append(iv[0])
            hi.append(iv[1])
    pibar = s.pi.mean(axis=0)
    rec.update(
        estimate=[float(e) for e in est],
        lower=[float(e) for e in lo],
        upper=[float(e) for e in hi],
        match=[int(m) + 1 for m in match],
        cluster_prob=pibar.tolist(),
        nonempty=int(np.sum(pibar >= 1.0 / data.n)),
    )
    return rec


def _aggregate(spec, records, fitter, fraction=None) -> StudyResult:
    names, kind, truth = _tracked(spec)
    ok = [r for r in records if r.get("ok")]
    P = len(names)
    if ok:
        est = np.array([r["estimate"] for r in ok])
        iv = np.stack([np.array([r["lower"] for r in ok]), np.array([r["upper"] for r in ok])], axis=-1)
        b = np.array([bias(est[:, i], truth[i]) for i in range(P)])
        lb = np.array([
            logodds_bias(est[:, i], truth[i]) if kind[i] == "phi" else np.nan for i in range(P)
        ])
        cov = np.array([coverage(iv[:, i], truth[i]) for i in range(P)])
        width = (iv[..., 1] - iv[..., 0]).mean(axis=0)
    else:
        b = lb = cov = width = np.full(P, np.nan)
    return StudyResult(
        names=names,
        kind=kind,
        truth=truth,
        bias=b,
        logodds_bias=lb,
        coverage=cov,
        mean_width=width,
        n_replicates=len(ok),
        n_failed=len(records) - len(ok),
        records=records,
        batch_fraction=fraction,
        fitter=fitter,
        nonempty=[r["nonempty"] for r in ok],
    )


def _run_one(args):
    spec, i, model_cfg, svi_cfg, fitter, mcmc_cfg, n_draws, mass = args
    try:
        return fit_replicate(spec, i, model_cfg, svi_cfg, fitter, mcmc_cfg, n_draws, mass)
    except Exception as exc:  # replicate failures are recorded, not fatal
        logger.warning("replicate %d failed: %s", i, exc)
        return {"replicate": i, "ok": False, "error": f"{type(exc).__name__}: {exc}"}


def run_study(spec: SimulationSpec, model_cfg: ModelConfig, svi_cfg=None, fitter: str = "svi",
              mcmc_cfg=None, n_draws: int = 1000, mass: float = 0.95, n_jobs: int = 1,
              progress: Optional[Callable] = None, _fraction=None) -> StudyResult:
    """Run ``spec.m`` replicates and aggregate bias / coverage.

    Replicates are independent; with ``n_jobs > 1`` they run in worker
    processes and are reduced in replicate order.
    """
    jobs = [(spec, i, model_cfg, svi_cfg, fitter, mcmc_cfg, n_draws, mass) for i in range(spec.m)]
    if n_jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            records = list(pool.map(_run_one, jobs))
    else:
        records = []
        for job in jobs:
            records.append(_run_one(job))
            if progress is not None:
                progress(records[-1])
    return _aggregate(spec, records, fitter, _fraction)


def batch_size_sweep(spec: SimulationSpec, fractions: Sequence[float], model_cfg: ModelConfig,
                     svi_cfg=None, **kwargs) -> list:
    """One SVI study per batch fraction, on identical cohorts and seeds."""
    from dataclasses import replace

    from .svi import SviConfig

    base = svi_cfg or SviConfig()
    out = []
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise DomainError(f"batch fraction must lie in (0, 1], got {f}")
        size = max(1, int(round(f * spec.n)))
        out.append(run_study(spec, model_cfg, replace(base, batch_size=size), "svi", _fraction=float(f), **kwargs))
    return out
