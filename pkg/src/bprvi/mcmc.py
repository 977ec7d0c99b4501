"""Adaptive random-walk Metropolis reference sampler for small instances.

All chains advance in lockstep so the target is evaluated once per step for
the whole stack, but each chain draws from its own random stream seeded by
``(seed, chain_index)``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import DomainError, NumericalError
from .model import CohortData, ModelConfig
from .transforms import BPRTarget

logger = logging.getLogger(__name__)

TARGET_ACCEPT = 0.234


@dataclass
class McmcConfig:
    n_chains: int = 4
    n_warmup: int = 5000
    n_samples: int = 10000
    proposal_scale: Union[float, list] = 0.1
    seed: int = 0
    thin: int = 1
    init_jitter: float = 0.5

    def __post_init__(self):
        if self.n_chains < 1 or self.n_warmup < 0 or self.n_samples < 1 or self.thin < 1:
            raise DomainError("invalid MCMC sizes")
        if np.any(np.asarray(self.proposal_scale, dtype=float) <= 0):
            raise DomainError("proposal_scale must be positive")


@dataclass
class PosteriorDraws:
    draws: np.ndarray  # chains x samples x d
    acceptance_rate: np.ndarray

    @property
    def flat(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[-1])

    @property
    def chain_index(self) -> np.ndarray:
        c, s, _ = self.draws.shape
        return np.repeat(np.arange(c), s)


def rwm_sample_target(target, cfg: McmcConfig, init: Optional[np.ndarray] = None) -> PosteriorDraws:
    """Sample ``target`` (full data, scale 1) with adaptive random-walk Metropolis.

    During warmup the proposal covariance tracks the running covariance of
    the chain history and a global scale is tuned by Robbins-Monro toward an
    acceptance rate of 0.234. Both are frozen afterwards.
    """
    d = target.dim
    if d > 100:
        warnings.warn(f"random-walk Metropolis on d={d} will mix slowly", RuntimeWarning, stacklevel=2)
    C = cfg.n_chains
    rngs = [np.random.default_rng(np.random.SeedSequence([int(cfg.seed), c])) for c in range(C)]
    if init is None:
        init = target.initial_mean() if hasattr(target, "initial_mean") else np.zeros(d)
    base = np.broadcast_to(np.asarray(init, dtype=float), (d,))
    x = np.stack([base + cfg.init_jitter * r.standard_normal(d) for r in rngs])
    lp = target.value_and_grad(x, grad=False)

    scale0 = np.broadcast_to(np.asarray(cfg.proposal_scale, dtype=float), (d,))
    chol = np.stack([np.diag(scale0) for _ in range(C)])
    log_s = np.zeros(C)
    # running moments of the warmup history, per chain
    mean = x.copy()
    m2 = np.zeros((C, d, d))
    count = 1

    n_keep = cfg.n_samples
    out = np.empty((C, n_keep, d))
    accepted = np.zeros(C)
    total = cfg.n_warmup + n_keep * cfg.thin
    adapt_start = min(500, cfg.n_warmup // 4)
    for it in range(total):
        z = np.stack([r.standard_normal(d) for r in rngs])
        step = np.einsum("cij,cj->ci", chol, z) * np.exp(log_s)[:, None]
        prop = x + step
        lp_prop = target.value_and_grad(prop, grad=False)
        u = np.array([r.random() for r in rngs])
        with np.errstate(invalid="ignore"):
            acc = np.log(u) < (lp_prop - lp)
        acc &= np.isfinite(lp_prop)
        x[acc] = prop[acc]
        lp[acc] = lp_prop[acc]

        if it < cfg.n_warmup:
            count += 1
            delta = x - mean
            mean += delta / count
            m2 += np.einsum("ci,cj->cij", delta, x - mean)
            rate = acc.astype(float)
            log_s += (rate - TARGET_ACCEPT) / np.sqrt(it + 1.0) ** 0.6
            if it >= adapt_start and (it + 1) % 100 == 0:
                cov = m2 / (count - 1)
                for c in range(C):
                    sc = (2.38 ** 2 / d) * cov[c] + 1e-10 * np.eye(d)
                    try:
                        chol[c] = np.linalg.cholesky(sc)
                    except np.linalg.LinAlgError:
                        pass
        else:
            j = it - cfg.n_warmup
            accepted += acc
            if j % cfg.thin == 0:
                out[:, j // cfg.thin] = x
    rate = accepted / (n_keep * cfg.thin)
    if np.any(rate < 0.01):
        raise NumericalError(f"acceptance rate after warmup too low: {np.round(rate, 4).tolist()}")
    return PosteriorDraws(out, rate)


def rwm_sample(data: CohortData, model_cfg: ModelConfig, cfg: McmcConfig) -> PosteriorDraws:
    return rwm_sample_target(BPRTarget(data, model_cfg), cfg)


def rhat(draws) -> np.ndarray:
    """Split-R-hat per coordinate for a chains x samples x d array."""
    arr = draws.draws if isinstance(draws, PosteriorDraws) else np.asarray(draws, dtype=float)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[0] < 2:
        raise DomainError("split R-hat needs at least two chains")
    n = arr.shape[1] // 2
    if n < 2:
        raise DomainError("chains too short for split R-hat")
    halves = np.concatenate([arr[:, :n], arr[:, n:2 * n]], axis=0)
    chain_means = halves.mean(axis=1)
    chain_vars = halves.var(axis=1, ddof=1)
    W = chain_vars.mean(axis=0)
    B = n * chain_means.var(axis=0, ddof=1)
    var_hat = (n - 1) / n * W + B / n
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_hat / W)
    return np.where(W > 0, r, 1.0)
