"""Small targets with known posteriors, for checking the fitters.

Each exposes the same ``value_and_grad(theta, rows, scale, grad)`` / ``n`` /
``dim`` surface as :class:`bprvi.transforms.BPRTarget`.
"""
from __future__ import annotations

import numpy as np

from .errors import DomainError


class GaussianTarget:
    """Normalised ``N(mean of centres, precision^-1)`` split into ``n`` row terms.

    Row ``i`` contributes ``-(theta - c_i)' P (theta - c_i) / (2n)`` plus a
    share of the normaliser, so a scaled minibatch sum is unbiased for the
    full log density and the full sum integrates to one.
    """

    def __init__(self, centres, precision=None):
        c = np.atleast_2d(np.asarray(centres, dtype=float))
        self.centres = c
        d = c.shape[1]
        P = np.eye(d) if precision is None else np.asarray(precision, dtype=float)
        if P.shape != (d, d):
            raise DomainError("precision must be d x d")
        np.linalg.cholesky(P)
        self.precision = P
        self.mean = c.mean(axis=0)
        quad = np.einsum("ni,ij,nj->n", c, P, c)
        _, logdet = np.linalg.slogdet(P / (2 * np.pi))
        self._const = 0.5 * logdet + 0.5 * (quad.mean() - self.mean @ P @ self.mean)

    @classmethod
    def standard(cls, d: int = 1, loc=0.0) -> "GaussianTarget":
        return cls(np.broadcast_to(np.asarray(loc, dtype=float), (1, d)))

    @property
    def n(self) -> int:
        return self.centres.shape[0]

    @property
    def dim(self) -> int:
        return self.centres.shape[1]

    def value_and_grad(self, theta, rows=None, scale: float = 1.0, grad: bool = True, logspace: bool = False):
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        c = self.centres if rows is None else self.centres[np.asarray(rows)]
        if c.shape[0] == 0:
            raise DomainError("empty batch")
        n = self.n
        m = c.shape[0]
        cbar = c.mean(axis=0)
        # sum_i (t - c_i)' P (t - c_i) = m (t - cbar)' P (t - cbar) + sum_i (c_i - cbar)' P (c_i - cbar)
        dev = theta - cbar
        spread = np.einsum("ni,ij,nj->", c - cbar, self.precision, c - cbar)
        q = m * np.einsum("si,ij,sj->s", dev, self.precision, dev) + spread
        val = scale * (-0.5 * q / n + m * self._const / n)
        if not grad:
            return val
        return val, -scale * (m / n) * dev @ self.precision


class BetaBernoulliTarget:
    """Bernoulli likelihood with a ``Beta(a, b)`` prior on the logit scale.

    ``theta = logit(phi)``; the log-Jacobian ``log phi + log(1 - phi)`` is
    included so the target is the density of ``theta``.
    """

    def __init__(self, x, a: float = 1.0, b: float = 1.0):
        x = np.asarray(x, dtype=float).ravel()
        if np.any((x != 0) & (x != 1)):
            raise DomainError("observations must be 0/1")
        self.x = x
        self.a, self.b = float(a), float(b)

    @property
    def n(self) -> int:
        return self.x.size

    @property
    def dim(self) -> int:
        return 1

    def posterior(self):
        s = self.x.sum()
        return self.a + s, self.b + self.n - s

    def value_and_grad(self, theta, rows=None, scale: float = 1.0, grad: bool = True, logspace: bool = False):
        theta = np.atleast_2d(np.asarray(theta, dtype=float))[:, 0]
        x = self.x if rows is None else self.x[np.asarray(rows)]
        if x.size == 0:
            raise DomainError("empty batch")
        s, m = x.sum(), x.size
        lp = -np.logaddexp(0.0, -theta)
        l1p = -np.logaddexp(0.0, theta)
        val = scale * (s * lp + (m - s) * l1p) + self.a * lp + self.b * l1p
        if not grad:
            return val
        phi = 1.0 / (1.0 + np.exp(-theta))
        g = scale * (s - m * phi) + self.a - (self.a + self.b) * phi
        return val, g[:, None]
