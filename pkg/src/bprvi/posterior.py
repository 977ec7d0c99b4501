"""Posterior summaries: HDIs, relabelling, responsibilities, reported quantities."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import expit, log_expit, logit, logsumexp

from .errors import DomainError
from .model import CohortData, ModelConfig
from .transforms import ParamLayout

__all__ = [
    "PosteriorSamples",
    "Responsibilities",
    "ClusterSummary",
    "draw_posterior",
    "samples_from_raw",
    "hdi",
    "relabel",
    "responsibilities",
    "cluster_outcome_probability",
    "odds_ratios",
    "summarize",
    "heatmap_matrix",
    "nonempty_clusters",
]


@dataclass
class PosteriorSamples:
    """Draws in raw space plus their constrained images.

    ``pi`` is carried explicitly because relabelling permutes the mixture
    weights directly rather than the stick fractions.
    """

    raw: np.ndarray
    layout: ParamLayout
    cfg: ModelConfig
    v: np.ndarray
    alpha: np.ndarray
    phi: np.ndarray
    beta0: np.ndarray
    beta: np.ndarray
    pi: np.ndarray
    provenance: str = "svi"
    chain: Optional[np.ndarray] = None

    @property
    def n_draws(self) -> int:
        return self.raw.shape[0]

    @property
    def k(self) -> int:
        return self.layout.k_max

    def permuted(self, perms: np.ndarray) -> "PosteriorSamples":
        """Apply a per-draw cluster permutation (``perms[s]`` maps new -> old)."""
        perms = np.asarray(perms)
        ar = np.arange(self.n_draws)[:, None]
        pi = self.pi[ar, perms]
        phi = self.phi[ar, perms]
        beta0 = self.beta0[ar, perms]
        v = _sticks_from_weights(pi)
        raw = self.raw.copy()
        lay = self.layout
        lo, hi = self.cfg.alpha_bounds
        eps = self.cfg.epsilon
        raw[:, lay.v] = np.clip(logit(v), -700, 700)
        raw[:, lay.phi] = logit((phi.reshape(self.n_draws, -1) - eps) / (1.0 - 2.0 * eps))
        raw[:, lay.beta0] = beta0
        return replace(self, raw=raw, v=v, pi=pi, phi=phi, beta0=beta0)


def _sticks_from_weights(pi):
    """Invert the stick-breaking map row-wise."""
    k = pi.shape[1]
    if k == 1:
        return np.zeros((pi.shape[0], 0))
    rest = 1.0 - np.concatenate([np.zeros((pi.shape[0], 1)), np.cumsum(pi, axis=1)[:, :-1]], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = pi[:, :-1] / rest[:, :-1]
    tiny = np.finfo(float).tiny
    return np.clip(np.nan_to_num(v, nan=0.5), tiny, 1.0 - np.finfo(float).eps)


def samples_from_raw(raw, layout: ParamLayout, cfg: ModelConfig, provenance="svi", chain=None) -> PosteriorSamples:
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    S = raw.shape[0]
    lo, hi = cfg.alpha_bounds
    eps = cfg.epsilon
    rv = raw[:, layout.v]
    log_pi = np.concatenate([log_expit(rv), np.zeros((S, 1))], 1) + np.concatenate(
        [np.zeros((S, 1)), np.cumsum(log_expit(-rv), 1)], 1
    )
    return PosteriorSamples(
        raw=raw,
        layout=layout,
        cfg=cfg,
        v=expit(rv),
        alpha=lo + (hi - lo) * expit(raw[:, layout.alpha]),
        phi=(eps + (1.0 - 2.0 * eps) * expit(raw[:, layout.phi])).reshape(S, layout.k_max, layout.p),
        beta0=raw[:, layout.beta0].copy(),
        beta=raw[:, layout.beta].copy(),
        pi=np.exp(log_pi),
        provenance=provenance,
        chain=None if chain is None else np.asarray(chain),
    )


def draw_posterior(state, layout: ParamLayout, cfg: ModelConfig, n_draws: int, rng) -> PosteriorSamples:
    """Sample the fitted Gaussian and map the draws to constrained space."""
    if n_draws < 1:
        raise DomainError("n_draws must be >= 1")
    eps = rng.standard_normal((n_draws, state.dim))
    return samples_from_raw(state.mu + eps @ state.chol.T, layout, cfg, "svi")


def hdi(samples, mass: float = 0.95):
    """Shortest interval covering ``ceil(mass * n)`` of the sorted samples.

    Assumes a unimodal distribution. Ties go to the lowest lower bound.
    """
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if not 0.0 < mass < 1.0:
        raise DomainError("mass must lie in (0, 1)")
    if n < 100:
        raise DomainError(f"hdi needs at least 100 samples, got {n}")
    m = math.ceil(mass * n)
    widths = x[m - 1:] - x[: n - m + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + m - 1])


def _hdi_rows(draws, mass):
    """HDI along axis 0 for every trailing coordinate."""
    flat = np.sort(draws.reshape(draws.shape[0], -1), axis=0)
    n = flat.shape[0]
    if not 0.0 < mass < 1.0:
        raise DomainError("mass must lie in (0, 1)")
    if n < 100:
        raise DomainError(f"hdi needs at least 100 samples, got {n}")
    m = math.ceil(mass * n)
    i = np.argmin(flat[m - 1:] - flat[: n - m + 1], axis=0)
    cols = np.arange(flat.shape[1])
    out = np.stack([flat[i, cols], flat[i + m - 1, cols]], axis=-1)
    return out.reshape(draws.shape[1:] + (2,))


def _order(pi_draws):
    return np.argsort(-pi_draws.mean(axis=0), kind="stable")


def relabel(samples: PosteriorSamples) -> PosteriorSamples:
    """Order clusters by descending posterior-mean weight.

    One permutation for the whole set, or one per chain for MCMC draws.
    """
    perms = np.empty((samples.n_draws, samples.k), dtype=int)
    if samples.provenance == "mcmc" and samples.chain is not None:
        for c in np.unique(samples.chain):
            sel = samples.chain == c
            perms[sel] = _order(samples.pi[sel])
    else:
        perms[:] = _order(samples.pi)
    return samples.permuted(perms)


@dataclass
class Responsibilities:
    r: np.ndarray

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float)

    @property
    def labels(self) -> np.ndarray:
        """Hard assignments, 1-based."""
        return np.argmax(self.r, axis=1) + 1


def responsibilities(samples: PosteriorSamples, data: CohortData, chunk: int = 200_000) -> Responsibilities:
    """Per-row cluster membership averaged over the posterior draws."""
    S, K = samples.n_draws, samples.k
    out = np.empty((data.n, K))
    log_pi = np.log(np.maximum(samples.pi, np.finfo(float).tiny))
    lodds = np.log(samples.phi) - np.log1p(-samples.phi)
    base = np.log1p(-samples.phi).sum(-1) + log_pi
    for start in range(0, data.n, chunk):
        sl = slice(start, start + chunk)
        X = data.x[sl]
        acc = np.full((X.shape[0], K), -np.inf)
        for s in range(S):
            t = X @ lodds[s].T + base[s]
            if data.has_response:
                eta = samples.beta0[s][None, :] + (data.w[sl] @ samples.beta[s])[:, None]
                t += data.y[sl, None] * eta - np.logaddexp(0.0, eta)
            np.logaddexp(acc, t, out=acc)
        out[sl] = np.exp(acc - logsumexp(acc, axis=1, keepdims=True))
    return Responsibilities(out)


def cluster_outcome_probability(samples: PosteriorSamples, w_ref, mass: float = 0.95):
    """Per-cluster outcome probability at a reference covariate profile.

    Returns ``(point, intervals)`` with shapes ``(K,)`` and ``(K, 2)``.
    """
    w_ref = np.asarray(w_ref, dtype=float).ravel()
    if w_ref.shape[0] != samples.beta.shape[1]:
        raise DomainError(f"reference profile has {w_ref.shape[0]} entries, model has {samples.beta.shape[1]}")
    prob = expit(samples.beta0 + (samples.beta @ w_ref)[:, None])
    return prob.mean(axis=0), _hdi_rows(prob, mass)


def odds_ratios(samples: PosteriorSamples, mass: float = 0.95):
    """exp(beta) summarised per coefficient: ``(point, intervals)``."""
    ors = np.exp(samples.beta)
    if ors.shape[1] == 0:
        return np.zeros(0), np.zeros((0, 2))
    return ors.mean(axis=0), _hdi_rows(ors, mass)


@dataclass
class ClusterSummary:
    n_obs: int
    x_names: list
    w_names: list
    cluster_prob: np.ndarray
    cluster_prob_hdi: np.ndarray
    phi: np.ndarray
    phi_hdi: np.ndarray
    beta0: np.ndarray
    beta0_hdi: np.ndarray
    beta: np.ndarray
    beta_hdi: np.ndarray
    odds_ratio: np.ndarray
    odds_ratio_hdi: np.ndarray
    outcome_prob: dict = field(default_factory=dict)
    outcome_prob_hdi: dict = field(default_factory=dict)
    mass: float = 0.95

    @property
    def k(self) -> int:
        return self.cluster_prob.shape[0]

    def to_dict(self) -> dict:
        def arr(a):
            return np.asarray(a).tolist()

        clusters = []
        for k in range(self.k):
            clusters.append({
                "cluster": k + 1,
                "probability": float(self.cluster_prob[k]),
                "probability_hdi": arr(self.cluster_prob_hdi[k]),
                "expected_count": float(self.cluster_prob[k] * self.n_obs),
                "intercept": float(self.beta0[k]),
                "intercept_hdi": arr(self.beta0_hdi[k]),
                "phi": dict(zip(self.x_names, arr(self.phi[k]))),
                "phi_hdi": dict(zip(self.x_names, arr(self.phi_hdi[k]))),
                "outcome_probability": {name: float(p[k]) for name, p in self.outcome_prob.items()},
                "outcome_probability_hdi": {name: arr(h[k]) for name, h in self.outcome_prob_hdi.items()},
            })
        coefficients = [
            {
                "name": name,
                "estimate": float(self.beta[j]),
                "hdi": arr(self.beta_hdi[j]),
                "odds_ratio": float(self.odds_ratio[j]),
                "odds_ratio_hdi": arr(self.odds_ratio_hdi[j]),
            }
            for j, name in enumerate(self.w_names)
        ]
        return {
            "n_obs": self.n_obs,
            "mass": self.mass,
            "nonempty_clusters": nonempty_clusters(self),
            "clusters": clusters,
            "coefficients": coefficients,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterSummary":
        cl = d["clusters"]
        co = d["coefficients"]
        x_names = list(cl[0]["phi"]) if cl else []
        profiles = list(cl[0]["outcome_probability"]) if cl else []
        return cls(
            n_obs=d["n_obs"],
            x_names=x_names,
            w_names=[c["name"] for c in co],
            cluster_prob=np.array([c["probability"] for c in cl]),
            cluster_prob_hdi=np.array([c["probability_hdi"] for c in cl]),
            phi=np.array([[c["phi"][x] for x in x_names] for c in cl]),
            phi_hdi=np.array([[c["phi_hdi"][x] for x in x_names] for c in cl]),
            beta0=np.array([c["intercept"] for c in cl]),
            beta0_hdi=np.array([c["intercept_hdi"] for c in cl]),
            beta=np.array([c["estimate"] for c in co]),
            beta_hdi=np.array([c["hdi"] for c in co]).reshape(-1, 2),
            odds_ratio=np.array([c["odds_ratio"] for c in co]),
            odds_ratio_hdi=np.array([c["odds_ratio_hdi"] for c in co]).reshape(-1, 2),
            outcome_prob={p: np.array([c["outcome_probability"][p] for c in cl]) for p in profiles},
            outcome_prob_hdi={p: np.array([c["outcome_probability_hdi"][p] for c in cl]) for p in profiles},
            mass=d.get("mass", 0.95),
        )


def summarize(samples: PosteriorSamples, n_obs: int, reference_profiles: Optional[dict] = None,
              x_names=None, w_names=None, mass: float = 0.95) -> ClusterSummary:
    """Relabel and summarise a sample set.

    ``reference_profiles`` maps a profile name to a response-covariate vector;
    by default a single all-zero profile named ``"reference"`` is used.
    """
    s = relabel(samples)
    a = s.beta.shape[1]
    if reference_profiles is None:
        reference_profiles = {"reference": np.zeros(a)}
    x_names = list(x_names) if x_names is not None else [f"x{j + 1}" for j in range(s.layout.p)]
    w_names = list(w_names) if w_names is not None else [f"w{j + 1}" for j in range(a)]
    outcome, outcome_hdi = {}, {}
    for name, w_ref in reference_profiles.items():
        outcome[name], outcome_hdi[name] = cluster_outcome_probability(s, w_ref, mass)
    or_point, or_hdi = odds_ratios(s, mass)
    return ClusterSummary(
        n_obs=int(n_obs),
        x_names=x_names,
        w_names=w_names,
        cluster_prob=s.pi.mean(axis=0),
        cluster_prob_hdi=_hdi_rows(s.pi, mass),
        phi=s.phi.mean(axis=0),
        phi_hdi=_hdi_rows(s.phi, mass),
        beta0=s.beta0.mean(axis=0),
        beta0_hdi=_hdi_rows(s.beta0, mass),
        beta=s.beta.mean(axis=0),
        beta_hdi=_hdi_rows(s.beta, mass) if a else np.zeros((0, 2)),
        odds_ratio=or_point,
        odds_ratio_hdi=or_hdi,
        outcome_prob=outcome,
        outcome_prob_hdi=outcome_hdi,
        mass=mass,
    )


def nonempty_clusters(summary: ClusterSummary, threshold: float = 1.0) -> int:
    """Clusters whose expected membership count reaches ``threshold``."""
    return int(np.sum(summary.cluster_prob >= threshold / summary.n_obs))


def heatmap_matrix(summary: ClusterSummary, scale: str = "logodds", threshold: float = 1.0):
    """Plot-ready matrix of non-empty clusters x (diseases + outcome profiles).

    Returns ``(matrix, row_labels, column_labels)``. ``scale`` is ``"logodds"``
    or ``"probability"``.
    """
    if scale not in ("logodds", "probability"):
        raise DomainError(f"unknown heatmap scale {scale!r}")
    keep = np.flatnonzero(summary.cluster_prob >= threshold / summary.n_obs)
    cols = [summary.phi[keep]]
    names = list(summary.x_names)
    for prof, p in summary.outcome_prob.items():
        cols.append(p[keep][:, None])
        names.append(f"outcome[{prof}]")
    mat = np.hstack(cols) if cols else np.zeros((keep.size, 0))
    if scale == "logodds":
        mat = logit(mat)
    rows = [f"cluster {k + 1}" for k in keep]
    return mat, rows, names
