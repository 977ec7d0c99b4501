"""Joint log-density of the profile regression model.

The cluster labels are summed out, so everything here is a function of the
continuous parameters only. Functions in this module work on
constrained-space values; the unconstrained (raw) fast path used by the
optimiser lives in :mod:`bprvi.transforms`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import DomainError

__all__ = [
    "CohortData",
    "ModelConfig",
    "ConstrainedParams",
    "stick_break",
    "log_stick_break",
    "log_mixture_lik_row",
    "log_response_lik_row",
    "log_joint_marginalized",
    "log_prior",
    "student_t_logpdf",
]


def _is_binary(a: np.ndarray) -> bool:
    return bool(np.all((a == 0) | (a == 1)))


@dataclass(frozen=True)
class CohortData:
    """Binary mixture covariates ``x``, response covariates ``w``, outcome ``y``.

    ``y`` may be ``None`` for a mixture-only model (no response component).
    Arrays are stored read-only; batches are addressed by row index arrays.
    """

    x: np.ndarray
    w: np.ndarray
    y: Optional[np.ndarray]
    x_names: tuple = ()
    w_names: tuple = ()
    y_name: str = "y"

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=float)
        if x.ndim != 2:
            raise DomainError("x must be a 2-d array")
        n = x.shape[0]
        if n < 1:
            raise DomainError("cohort must have at least one row")
        w = np.asarray(self.w, dtype=float)
        if w.size == 0:
            w = np.zeros((n, 0))
        w = np.ascontiguousarray(w.reshape(n, -1) if w.ndim == 1 else w)
        if w.shape[0] != n:
            raise DomainError(f"w has {w.shape[0]} rows, x has {n}")
        if not _is_binary(x):
            raise DomainError("x entries must be exactly 0 or 1")
        if not np.all(np.isfinite(w)):
            raise DomainError("w contains non-finite values")
        y = self.y
        if y is not None:
            y = np.ascontiguousarray(y, dtype=float).ravel()
            if y.shape[0] != n:
                raise DomainError(f"y has {y.shape[0]} rows, x has {n}")
            if not _is_binary(y):
                raise DomainError("y entries must be exactly 0 or 1")
            y.setflags(write=False)
        x.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "y", y)
        xn = tuple(self.x_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        wn = tuple(self.w_names) or tuple(f"w{j + 1}" for j in range(w.shape[1]))
        if len(xn) != x.shape[1] or len(wn) != w.shape[1]:
            raise DomainError("column name count does not match data")
        object.__setattr__(self, "x_names", xn)
        object.__setattr__(self, "w_names", wn)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def a(self) -> int:
        return self.w.shape[1]

    @property
    def has_response(self) -> bool:
        return self.y is not None

    def subset(self, rows) -> "CohortData":
        """Materialised copy of selected rows (for stratified fits)."""
        rows = np.asarray(rows)
        return CohortData(
            self.x[rows],
            self.w[rows],
            None if self.y is None else self.y[rows],
            self.x_names,
            self.w_names,
            self.y_name,
        )


@dataclass(frozen=True)
class ModelConfig:
    k_max: int = 10
    epsilon: float = 1e-4
    alpha_bounds: tuple = (0.3, 10.0)
    beta_prior: tuple = (7.0, 0.0, 2.5)

    def __post_init__(self):
        if int(self.k_max) != self.k_max or self.k_max < 1:
            raise DomainError(f"k_max must be a positive integer, got {self.k_max!r}")
        if not 0.0 < self.epsilon < 0.5:
            raise DomainError(f"epsilon must lie in (0, 0.5), got {self.epsilon!r}")
        lo, hi = self.alpha_bounds
        if not 0.0 < lo < hi:
            raise DomainError(f"alpha_bounds must satisfy 0 < lo < hi, got {self.alpha_bounds!r}")
        df, _, scale = self.beta_prior
        if df <= 0 or scale <= 0:
            raise DomainError("beta_prior df and scale must be positive")
        object.__setattr__(self, "k_max", int(self.k_max))
        object.__setattr__(self, "alpha_bounds", (float(lo), float(hi)))
        object.__setattr__(self, "beta_prior", tuple(float(b) for b in self.beta_prior))


@dataclass
class ConstrainedParams:
    v: np.ndarray
    alpha: float
    phi: np.ndarray
    beta0: np.ndarray
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float).ravel()
        self.phi = np.atleast_2d(np.asarray(self.phi, dtype=float))
        self.beta0 = np.asarray(self.beta0, dtype=float).ravel()
        self.beta = np.asarray(self.beta, dtype=float).ravel()
        self.alpha = float(self.alpha)
        k = self.phi.shape[0]
        if self.v.shape[0] != k - 1 or self.beta0.shape[0] != k:
            raise DomainError(
                f"inconsistent cluster count: v={self.v.shape[0]}, "
                f"phi rows={k}, beta0={self.beta0.shape[0]}"
            )

    @property
    def k(self) -> int:
        return self.phi.shape[0]

    @property
    def pi(self) -> np.ndarray:
        return stick_break(self.v)


def log_stick_break(v) -> np.ndarray:
    """Log mixture weights from stick fractions, via cumulative log(1 - v)."""
    v = np.asarray(v, dtype=float)
    if np.any(~((v > 0) & (v < 1))):
        raise DomainError("stick fractions must lie strictly inside (0, 1)")
    log_v = np.log(v)
    log_rest = np.cumsum(np.log1p(-v), axis=-1)
    pad = np.zeros(v.shape[:-1] + (1,))
    return np.concatenate([log_v, pad], axis=-1) + np.concatenate([pad, log_rest], axis=-1)


def stick_break(v) -> np.ndarray:
    """Map K-1 stick fractions onto a K-simplex.

    >>> stick_break([0.5, 0.5])
    array([0.5 , 0.25, 0.25])
    """
    return np.exp(log_stick_break(v))


def log_mixture_lik_row(x_row, phi_k) -> float:
    x_row = np.asarray(x_row, dtype=float)
    phi_k = np.asarray(phi_k, dtype=float)
    return float(np.sum(x_row * np.log(phi_k) + (1.0 - x_row) * np.log1p(-phi_k)))


def _log_bernoulli_logit(y, eta):
    # log p(y | logit eta), stable for large |eta|
    return y * eta - np.logaddexp(0.0, eta)


def log_response_lik_row(y, w_row, beta0_k, beta) -> float:
    eta = float(beta0_k) + float(np.dot(np.asarray(w_row, dtype=float), np.asarray(beta, dtype=float)))
    return float(_log_bernoulli_logit(float(y), eta))


def _component_terms(data: CohortData, params: ConstrainedParams, rows=None) -> np.ndarray:
    """n x K matrix of log pi_k + log p(x_i | k) + log p(y_i | k)."""
    x = data.x if rows is None else data.x[rows]
    w = data.w if rows is None else data.w[rows]
    if x.shape[0] == 0:
        raise DomainError("empty batch")
    if params.k == 1:
        log_pi = np.zeros(1)
    else:
        log_pi = log_stick_break(params.v)
    lo = np.log(params.phi) - np.log1p(-params.phi)
    terms = x @ lo.T + np.log1p(-params.phi).sum(axis=1) + log_pi
    if data.has_response:
        y = data.y if rows is None else data.y[rows]
        eta = params.beta0[None, :] + (w @ params.beta)[:, None]
        terms = terms + _log_bernoulli_logit(y[:, None], eta)
    return terms


def log_joint_marginalized(data: CohortData, params: ConstrainedParams, scale: float = 1.0, rows=None) -> float:
    """Scaled log-likelihood with cluster labels summed out.

    ``rows`` selects a batch by index; ``scale`` should then be n / len(rows).
    """
    if scale <= 0:
        raise DomainError("scale must be positive")
    terms = _component_terms(data, params, rows)
    return float(scale * np.sum(logsumexp(terms, axis=1)))


def student_t_logpdf(x, df: float, loc: float, scale: float):
    z = (np.asarray(x, dtype=float) - loc) / scale
    const = gammaln((df + 1) / 2) - gammaln(df / 2) - 0.5 * np.log(df * np.pi) - np.log(scale)
    return const - 0.5 * (df + 1) * np.log1p(z * z / df)


def log_prior(params: ConstrainedParams, cfg: ModelConfig) -> float:
    """Log prior density; returns -inf outside the support instead of raising."""
    lo, hi = cfg.alpha_bounds
    eps = cfg.epsilon
    alpha = params.alpha
    if not lo < alpha < hi:
        return -np.inf
    v = params.v
    if np.any(~((v > 0) & (v < 1))):
        return -np.inf
    phi = params.phi
    if np.any((phi < eps) | (phi > 1 - eps)):
        return -np.inf
    lp = -np.log(hi - lo)
    lp += v.size * np.log(alpha) + (alpha - 1.0) * np.sum(np.log1p(-v))
    lp -= phi.size * np.log(1.0 - 2.0 * eps)
    df, loc, scale = cfg.beta_prior
    lp += np.sum(student_t_logpdf(params.beta0, df, loc, scale))
    lp += np.sum(student_t_logpdf(params.beta, df, loc, scale))
    return float(lp)
