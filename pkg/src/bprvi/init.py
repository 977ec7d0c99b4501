"""Data-driven starting point for the variational mean.

A finite Bernoulli mixture is fitted to the profile covariates by EM for
each candidate number of clusters and the best one by BIC seeds the
variational mean: occupied clusters fill the first sticks in decreasing
size, the remainder start with negligible weight at the tail of the stick.
"""
from __future__ import annotations

import logging

import numpy as np
from scipy.special import logit, logsumexp

logger = logging.getLogger(__name__)

# profile probabilities are kept away from 0/1 so the raw start stays moderate
PHI_CLIP = 0.02


def _loglik_matrix(x, weights, phi):
    lp = np.log(phi)
    l1p = np.log1p(-phi)
    return x @ (lp - l1p).T + l1p.sum(1) + np.log(weights)


def _seed_centres(x, k, rng):
    # k-means++ over Hamming distance
    n = x.shape[0]
    centres = [x[rng.integers(n)]]
    dist = np.abs(x - centres[0]).sum(1)
    for _ in range(1, k):
        total = dist.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=dist / total)
        centres.append(x[idx])
        dist = np.minimum(dist, np.abs(x - x[idx]).sum(1))
    return np.array(centres)


def bernoulli_mixture_em(x, k, rng, n_iter=300, tol=1e-7, smoothing=0.5):
    """One EM run; returns ``(loglik, weights, phi, resp)``.

    The M-step adds ``smoothing`` pseudo-counts to each Bernoulli cell.
    """
    x = np.asarray(x, dtype=float)
    n, p = x.shape
    centres = _seed_centres(x, k, rng)
    # nearest-centre hard assignment, then alternate
    d = x @ (1 - centres).T + (1 - x) @ centres.T
    resp = np.zeros((n, k))
    resp[np.arange(n), d.argmin(1)] = 1.0
    prev = -np.inf
    for _ in range(n_iter):
        nk = resp.sum(0)
        weights = (nk + 1e-3) / (n + 1e-3 * k)
        phi = (resp.T @ x + smoothing) / (nk[:, None] + 2 * smoothing)
        L = _loglik_matrix(x, weights, phi)
        norm = logsumexp(L, axis=1, keepdims=True)
        resp = np.exp(L - norm)
        ll = float(norm.sum())
        if ll - prev < tol * abs(ll):
            break
        prev = ll
    return ll, weights, phi, resp


def select_mixture(x, k_max, rng, n_restarts=10, max_rows=5000):
    """Fit k = 1..k_max on (a subsample of) ``x`` and keep the best by BIC."""
    x = np.asarray(x, dtype=float)
    n, p = x.shape
    if n > max_rows:
        x = x[rng.choice(n, size=max_rows, replace=False)]
        n = max_rows
    best = None
    for k in range(1, k_max + 1):
        fits = [bernoulli_mixture_em(x, k, rng) for _ in range(n_restarts if k > 1 else 1)]
        ll, w, phi, _ = max(fits, key=lambda f: f[0])
        bic = -2 * ll + (k - 1 + k * p) * np.log(n)
        if best is None or bic < best[0]:
            best = (bic, k, w, phi)
    _, k, w, phi = best
    logger.debug("profile init selected %d clusters", k)
    return w, phi


def profile_initial_mean(target, seed=0) -> np.ndarray:
    """Variational mean seeded from a BIC-selected Bernoulli mixture."""
    data, lay, cfg = target.data, target.layout, target.cfg
    mu = target.initial_mean()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1D17]))
    w, phi = select_mixture(data.x, lay.k_max, rng)
    order = np.argsort(-w, kind="stable")
    w, phi = w[order], phi[order]
    k = w.size
    K = lay.k_max

    # weights for occupied clusters, a small geometric tail for the rest
    tail = 1.0 / (data.n + 1.0)
    pi = np.empty(K)
    pi[:k] = w * (1.0 - tail) if k < K else w
    if k < K:
        pi[k:] = tail * 0.5 ** np.arange(1, K - k + 1)
        pi[-1] += tail - pi[k:].sum()
    pi /= pi.sum()
    rest = 1.0 - np.concatenate([[0.0], np.cumsum(pi)[:-1]])
    v = np.clip(pi[:-1] / rest[:-1], 1e-6, 1 - 1e-6)
    mu[lay.v] = logit(v)

    eps = cfg.epsilon
    full_phi = np.full((K, lay.p), 0.5)
    full_phi[:k] = np.clip(phi, PHI_CLIP, 1 - PHI_CLIP)
    mu[lay.phi] = logit((full_phi.ravel() - eps) / (1.0 - 2.0 * eps))

    if data.has_response and k > 0:
        L = _loglik_matrix(np.asarray(data.x, float), np.maximum(w, 1e-12), np.clip(phi, 1e-6, 1 - 1e-6))
        resp = np.exp(L - logsumexp(L, axis=1, keepdims=True))
        nk = resp.sum(0)
        rate = (resp.T @ data.y + 0.5) / (nk + 1.0)
        b0 = mu[lay.beta0].copy()
        b0[:k] = logit(np.clip(rate, 1e-3, 1 - 1e-3))
        mu[lay.beta0] = b0
    return mu
