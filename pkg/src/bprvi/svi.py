"""Full-rank Gaussian stochastic variational inference.

q(theta) = N(mu, L L^T) over the raw parameter vector. The ELBO is
estimated with reparameterised draws ``theta = mu + L eps`` on a random
minibatch, and maximised with Adam. By default Adam moves
``(mu, log s, strict-lower U)`` with ``L = diag(s) U`` and ``U`` unit lower
triangular; ``chol_param="direct"`` moves ``(mu, log diag L, strict-lower L)``
instead, which leaves a noise floor on the off-diagonal of ``L`` and
inflates the marginal variances.

Any object exposing ``dim``, ``n`` and
``value_and_grad(theta, rows=None, scale=1.0, grad=True)`` can be fitted;
:class:`bprvi.transforms.BPRTarget` is the model target.
"""
from __future__ import annotations

import functools
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DomainError, NumericalError
from .model import CohortData, ModelConfig
from .init import profile_initial_mean
from .transforms import BPRTarget

logger = logging.getLogger(__name__)

__all__ = [
    "VariationalState",
    "SviConfig",
    "FitTrace",
    "init_state",
    "gaussian_entropy",
    "elbo_estimate",
    "elbo_gradient",
    "elbo_and_gradient",
    "adam_step",
    "fit",
    "fit_target",
    "default_batch_size",
]

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8
INIT_METHODS = ("zero", "profile")
CHOL_PARAMS = ("scaled", "direct")


@dataclass
class VariationalState:
    mu: np.ndarray
    chol: np.ndarray
    step: int = 0
    # Adam first/second moments over the packed (mu, log-diag, lower) vector
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.chol = np.tril(np.asarray(self.chol, dtype=float))
        d = self.mu.shape[0]
        if self.chol.shape != (d, d):
            raise DomainError(f"chol must be {d}x{d}")
        if np.any(np.diag(self.chol) <= 0):
            raise DomainError("chol diagonal must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def cov(self) -> np.ndarray:
        return self.chol @ self.chol.T

    def copy(self) -> "VariationalState":
        return VariationalState(
            self.mu.copy(),
            self.chol.copy(),
            self.step,
            None if self.m is None else self.m.copy(),
            None if self.v is None else self.v.copy(),
        )


def default_batch_size(n: int) -> int:
    return min(n, max(math.ceil(0.1 * n), 256))


@dataclass
class SviConfig:
    learning_rate: float = 0.01
    elbo_samples: int = 30
    batch_size: Optional[int] = None
    max_steps: int = 30_000
    seed: int = 0
    window: int = 500
    rel_tol: float = 1e-4
    init_scale: float = 0.1
    init: str = "profile"
    chol_param: str = "scaled"

    def __post_init__(self):
        if self.chol_param not in CHOL_PARAMS:
            raise DomainError(f"chol_param must be one of {CHOL_PARAMS}")
        if self.init not in INIT_METHODS:
            raise DomainError(f"init must be one of {INIT_METHODS}")
        if self.learning_rate <= 0:
            raise DomainError("learning_rate must be positive")
        if self.elbo_samples < 1:
            raise DomainError("elbo_samples must be >= 1")
        if self.max_steps < 1:
            raise DomainError("max_steps must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if self.window < 1:
            raise DomainError("window must be >= 1")

    def resolve_batch_size(self, n: int) -> int:
        if self.batch_size is None:
            return default_batch_size(n)
        if self.batch_size > n:
            raise DomainError(f"batch_size {self.batch_size} exceeds n={n}")
        return self.batch_size


@dataclass
class FitTrace:
    elbo_history: list = field(default_factory=list)
    wall_time: float = 0.0
    terminated_reason: str = "max_steps"
    error: Optional[str] = None

    @property
    def converged(self) -> bool:
        return self.terminated_reason == "converged"


def init_state(target, scale: float = 0.1, method: str = "zero", seed: int = 0) -> VariationalState:
    """Isotropic Gaussian start.

    ``method="zero"`` centres it at ``target.initial_mean()``; ``"profile"``
    uses the mixture-seeded mean of :func:`bprvi.init.profile_initial_mean`.
    """
    if method == "profile" and hasattr(target, "layout"):
        mu = profile_initial_mean(target, seed)
    elif hasattr(target, "initial_mean"):
        mu = target.initial_mean()
    else:
        mu = np.zeros(target.dim)
    return VariationalState(mu, scale * np.eye(target.dim))


def gaussian_entropy(chol) -> float:
    d = chol.shape[0]
    return 0.5 * d * math.log(2 * math.pi * math.e) + float(np.sum(np.log(np.diag(chol))))


def _draws(state, eps):
    return state.mu + eps @ state.chol.T


def elbo_and_gradient(state: VariationalState, target, rows=None, scale: float = 1.0,
                      n_samples: int = 30, rng=None, eps=None, grad: bool = True):
    """ELBO estimate and its reparameterisation gradient from common draws.

    Returns ``(elbo, grad_mu, grad_chol, eps)``; pass ``eps`` to reuse a
    fixed noise set (common random numbers).
    """
    d = state.dim
    if eps is None:
        eps = rng.standard_normal((n_samples, d))
    else:
        eps = np.array(eps, dtype=float, copy=True)
    out = target.value_and_grad(_draws(state, eps), rows, scale, grad=grad)
    vals, g = out if grad else (out, None)
    bad = ~np.isfinite(vals)
    if grad:
        bad |= ~np.all(np.isfinite(g), axis=1)
    if np.any(bad):
        if rng is None:
            raise NumericalError(f"non-finite log target at {int(bad.sum())} fixed draws")
        idx = np.flatnonzero(bad)
        eps[idx] = rng.standard_normal((idx.size, d))
        out = target.value_and_grad(_draws(state, eps[idx]), rows, scale, grad=grad)
        v2, g2 = out if grad else (out, None)
        vals = vals.copy()
        vals[idx] = v2
        if grad:
            g[idx] = g2
        still = ~np.isfinite(vals[idx])
        if grad:
            still |= ~np.all(np.isfinite(g2), axis=1)
        if np.any(still):
            raise NumericalError(
                f"log target non-finite after retry for {int(still.sum())} draw(s) at step {state.step}"
            )
    elbo = float(vals.mean()) + gaussian_entropy(state.chol)
    if not grad:
        return elbo, None, None, eps
    S = eps.shape[0]
    grad_mu = g.mean(axis=0)
    grad_chol = np.tril(g.T @ eps) / S
    grad_chol[np.diag_indices(d)] += 1.0 / np.diag(state.chol)
    return elbo, grad_mu, grad_chol, eps


def elbo_estimate(state, target, rows=None, scale=1.0, n_samples=30, rng=None, eps=None) -> float:
    return elbo_and_gradient(state, target, rows, scale, n_samples, rng, eps, grad=False)[0]


def elbo_gradient(state, target, rows=None, scale=1.0, n_samples=30, rng=None, eps=None):
    _, gm, gl, _ = elbo_and_gradient(state, target, rows, scale, n_samples, rng, eps)
    return gm, gl


@functools.lru_cache(maxsize=8)
def _lower_indices(d):
    return np.tril_indices(d, -1)


def _pack(state, param="scaled"):
    d = state.dim
    il = _lower_indices(d)
    diag = np.diag(state.chol)
    low = state.chol[il]
    if param == "scaled":
        low = low / diag[il[0]]
    return np.concatenate([state.mu, np.log(diag), low])


def _pack_grads(state, grad_mu, grad_chol, param="scaled"):
    d = state.dim
    il = _lower_indices(d)
    diag = np.diag(state.chol)
    if param == "direct":
        return np.concatenate([grad_mu, np.diag(grad_chol) * diag, grad_chol[il]])
    # L = diag(s) U with unit-diagonal U: each row scales with its s_i
    g_log_s = np.einsum("ij,ij->i", np.tril(grad_chol), state.chol)
    return np.concatenate([grad_mu, g_log_s, grad_chol[il] * diag[il[0]]])


def _unpack(u, d, param="scaled"):
    mu = u[:d]
    diag = np.exp(u[d:2 * d])
    il = _lower_indices(d)
    chol = np.zeros((d, d))
    low = u[2 * d:]
    chol[il] = low * diag[il[0]] if param == "scaled" else low
    chol[np.diag_indices(d)] = diag
    return mu, chol


def adam_step(state: VariationalState, grad_mu, grad_chol, learning_rate: float = 0.01,
              param: str = "scaled") -> VariationalState:
    """One Adam ascent step on the ELBO. Returns a new state.

    ``param`` picks the unconstrained coordinates of the Cholesky factor:
    ``"direct"`` moves ``(log diag L, strict-lower L)``; ``"scaled"`` writes
    ``L = diag(s) U`` with unit-diagonal ``U`` and moves ``(log s, strict-lower U)``.
    """
    if param not in CHOL_PARAMS:
        raise DomainError(f"param must be one of {CHOL_PARAMS}")
    g = _pack_grads(state, np.asarray(grad_mu), np.asarray(grad_chol), param)
    if not np.all(np.isfinite(g)):
        raise NumericalError(f"non-finite ELBO gradient at step {state.step}")
    m = np.zeros_like(g) if state.m is None else state.m
    v = np.zeros_like(g) if state.v is None else state.v
    t = state.step + 1
    m = ADAM_B1 * m + (1 - ADAM_B1) * g
    v = ADAM_B2 * v + (1 - ADAM_B2) * g * g
    mhat = m / (1 - ADAM_B1 ** t)
    vhat = v / (1 - ADAM_B2 ** t)
    u = _pack(state, param) + learning_rate * mhat / (np.sqrt(vhat) + ADAM_EPS)
    mu, chol = _unpack(u, state.dim, param)
    return VariationalState(mu, chol, t, m, v)


def fit_target(target, cfg: SviConfig, state: Optional[VariationalState] = None):
    """Run SVI on an arbitrary target. Returns ``(state, trace)``.

    On a numerical failure the last good state is returned with
    ``trace.terminated_reason == "failed"`` and the message in ``trace.error``.
    """
    rng = np.random.default_rng(cfg.seed)
    n = target.n
    batch = cfg.resolve_batch_size(n)
    full = batch >= n
    scale = 1.0 if full else n / batch
    if state is None:
        state = init_state(target, cfg.init_scale, cfg.init, cfg.seed)
    else:
        state = state.copy()
    trace = FitTrace()
    t0 = time.perf_counter()
    prev_window = None
    W = cfg.window
    for it in range(cfg.max_steps):
        rows = None if full else rng.integers(0, n, size=batch)
        try:
            elbo, gm, gl, _ = elbo_and_gradient(state, target, rows, scale, cfg.elbo_samples, rng)
            state = adam_step(state, gm, gl, cfg.learning_rate, cfg.chol_param)
        except NumericalError as exc:
            trace.terminated_reason = "failed"
            trace.error = str(exc)
            logger.warning("SVI aborted: %s", exc)
            break
        trace.elbo_history.append(elbo)
        if (it + 1) % W == 0:
            cur = float(np.mean(trace.elbo_history[-W:]))
            if prev_window is not None and abs(cur - prev_window) < cfg.rel_tol * abs(prev_window):
                trace.terminated_reason = "converged"
                break
            prev_window = cur
    trace.wall_time = time.perf_counter() - t0
    return state, trace


def fit(data: CohortData, model_cfg: ModelConfig, svi_cfg: SviConfig, state=None):
    """Fit the profile regression model to ``data``."""
    return fit_target(BPRTarget(data, model_cfg), svi_cfg, state)
