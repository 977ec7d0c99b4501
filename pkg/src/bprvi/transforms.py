"""Unconstrained parameterisation of the model and the log target density.

The flat raw vector is laid out as ``[v | alpha | phi (row-major) | beta0 | beta]``.
Bounded quantities go through scaled sigmoids; the regression coefficients
are identity-mapped.

:class:`BPRTarget` evaluates the log target and its gradient for a stack of
raw vectors at once. It is the path the optimiser and sampler use; the
scalar functions ``to_constrained`` / ``log_target`` are the reference
composition it is tested against.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln, log_expit, logit

from .errors import DomainError
from .model import CohortData, ConstrainedParams, ModelConfig, log_joint_marginalized, log_prior

__all__ = [
    "ParamLayout",
    "ParamVector",
    "to_constrained",
    "from_constrained",
    "log_abs_det_jacobian",
    "log_target",
    "BPRTarget",
]


@dataclass(frozen=True)
class ParamLayout:
    k_max: int
    p: int
    a: int

    @property
    def n_v(self) -> int:
        return self.k_max - 1

    @property
    def dim(self) -> int:
        return self.n_v + 1 + self.k_max * self.p + self.k_max + self.a

    @property
    def v(self) -> slice:
        return slice(0, self.n_v)

    @property
    def alpha(self) -> int:
        return self.n_v

    @property
    def phi(self) -> slice:
        start = self.n_v + 1
        return slice(start, start + self.k_max * self.p)

    @property
    def beta0(self) -> slice:
        start = self.phi.stop
        return slice(start, start + self.k_max)

    @property
    def beta(self) -> slice:
        start = self.beta0.stop
        return slice(start, start + self.a)

    def segments(self) -> dict:
        return {
            "v": self.v,
            "alpha": slice(self.alpha, self.alpha + 1),
            "phi": self.phi,
            "beta0": self.beta0,
            "beta": self.beta,
        }

    def names(self, x_names=None, w_names=None) -> list:
        """Human-readable coordinate labels, 1-based cluster indices."""
        x_names = x_names or [f"x{j + 1}" for j in range(self.p)]
        w_names = w_names or [f"w{j + 1}" for j in range(self.a)]
        out = [f"v[{k + 1}]" for k in range(self.n_v)] + ["alpha"]
        out += [f"phi[{k + 1},{x_names[j]}]" for k in range(self.k_max) for j in range(self.p)]
        out += [f"beta0[{k + 1}]" for k in range(self.k_max)]
        out += [f"beta[{w_names[j]}]" for j in range(self.a)]
        return out

    @classmethod
    def for_data(cls, data: CohortData, cfg: ModelConfig) -> "ParamLayout":
        return cls(cfg.k_max, data.p, data.a)


@dataclass
class ParamVector:
    raw: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=float)
        if self.raw.shape != (self.layout.dim,):
            raise DomainError(f"raw vector has shape {self.raw.shape}, layout needs ({self.layout.dim},)")
        if not np.all(np.isfinite(self.raw)):
            raise DomainError("raw parameter vector must be finite")


def _scaled_sigmoid(r, lo, width):
    return lo + width * expit(r)


def to_constrained(raw: ParamVector, cfg: ModelConfig) -> ConstrainedParams:
    lay, r = raw.layout, raw.raw
    lo, hi = cfg.alpha_bounds
    eps = cfg.epsilon
    return ConstrainedParams(
        v=expit(r[lay.v]),
        alpha=_scaled_sigmoid(r[lay.alpha], lo, hi - lo),
        phi=_scaled_sigmoid(r[lay.phi], eps, 1.0 - 2.0 * eps).reshape(lay.k_max, lay.p),
        beta0=r[lay.beta0].copy(),
        beta=r[lay.beta].copy(),
    )


def from_constrained(params: ConstrainedParams, cfg: ModelConfig) -> ParamVector:
    """Inverse of :func:`to_constrained`."""
    lo, hi = cfg.alpha_bounds
    eps = cfg.epsilon
    lay = ParamLayout(params.k, params.phi.shape[1], params.beta.shape[0])
    raw = np.empty(lay.dim)
    raw[lay.v] = logit(params.v)
    raw[lay.alpha] = logit((params.alpha - lo) / (hi - lo))
    raw[lay.phi] = logit((params.phi.ravel() - eps) / (1.0 - 2.0 * eps))
    raw[lay.beta0] = params.beta0
    raw[lay.beta] = params.beta
    return ParamVector(raw, lay)


def _log_dsigmoid(r, width):
    return np.log(width) + log_expit(r) + log_expit(-r)


def log_abs_det_jacobian(raw: ParamVector, cfg: ModelConfig) -> float:
    lay, r = raw.layout, raw.raw
    lo, hi = cfg.alpha_bounds
    out = np.sum(_log_dsigmoid(r[lay.v], 1.0))
    out += _log_dsigmoid(r[lay.alpha], hi - lo)
    out += np.sum(_log_dsigmoid(r[lay.phi], 1.0 - 2.0 * cfg.epsilon))
    return float(out)


def log_target(raw: ParamVector, data: CohortData, cfg: ModelConfig, scale: float = 1.0, rows=None) -> float:
    """Log unnormalised posterior in raw coordinates (reference composition)."""
    params = to_constrained(raw, cfg)
    return (
        log_joint_marginalized(data, params, scale, rows)
        + log_prior(params, cfg)
        + log_abs_det_jacobian(raw, cfg)
    )


# centred log terms below this contribute < 1e-130 relative to the largest
_EXP_FLOOR = -300.0


def _log_bernoulli_logit(y, eta):
    # y * eta - softplus(eta), avoiding the slow logaddexp ufunc
    out = np.abs(eta)
    np.negative(out, out=out)
    np.exp(out, out=out)
    np.log1p(out, out=out)
    out += np.maximum(eta, 0.0)
    np.subtract(y * eta, out, out=out)
    return out


def _sigmoid(x):
    out = np.multiply(x, 0.5)
    np.tanh(out, out=out)
    out += 1.0
    out *= 0.5
    return out


class BPRTarget:
    """Vectorised log target and gradient over a stack of raw vectors.

    Everything is computed from the raw coordinates through ``log_expit`` so
    saturated sigmoids never produce ``log(0)``.
    """

    def __init__(self, data: CohortData, cfg: ModelConfig):
        self.data = data
        self.cfg = cfg
        self.layout = ParamLayout.for_data(data, cfg)
        df, loc, scale = cfg.beta_prior
        self._t_const = gammaln((df + 1) / 2) - gammaln(df / 2) - 0.5 * np.log(df * np.pi) - np.log(scale)
        # uniform-prior normalisers cancel against the sigmoid widths in the Jacobian
        self._const = (cfg.k_max + data.a) * self._t_const
        self._full = None
        self._buffers = {}

    @property
    def dim(self) -> int:
        return self.layout.dim

    @property
    def n(self) -> int:
        return self.data.n

    def _t_prior(self, x):
        df, loc, scale = self.cfg.beta_prior
        z = x - loc
        val = -0.5 * (df + 1) * np.log1p(z * z / (df * scale * scale))
        grad = -(df + 1) * z / (df * scale * scale + z * z)
        return val, grad

    def _batch(self, rows):
        """Rows of the batch reordered with ``y == 1`` first, x augmented by a ones column."""
        data = self.data
        if rows is None:
            if self._full is None:
                self._full = self._gather(np.arange(data.n))
            return self._full
        rows = np.asarray(rows)
        if rows.size == 0:
            raise DomainError("empty batch")
        return self._gather(rows)

    def _work(self, name, shape):
        # large per-call temporaries are reused: fresh allocations of this
        # size go through mmap and pay for page faults on every call
        buf = self._buffers.get(name)
        if buf is None or buf.shape != shape:
            buf = self._buffers[name] = np.empty(shape)
        return buf

    def _gather(self, rows):
        data = self.data
        if data.y is not None:
            rows = rows[np.argsort(-data.y[rows], kind="stable")]
            y = data.y[rows]
            n1 = int(y.sum())
        else:
            y, n1 = None, 0
        xa = np.ones((rows.size, data.p + 1))
        xa[:, :-1] = data.x[rows]
        return xa, data.w[rows], y, n1

    def _common(self, theta):
        """Stick, profile and prior terms that do not touch the data."""
        lay, cfg = self.layout, self.cfg
        S = theta.shape[0]
        K, p = lay.k_max, lay.p
        eps = cfg.epsilon
        c = 1.0 - 2.0 * eps
        lo, hi = cfg.alpha_bounds
        rv = theta[:, lay.v]
        ra = theta[:, lay.alpha]
        rphi = theta[:, lay.phi].reshape(S, K, p)
        b0 = theta[:, lay.beta0]
        b = theta[:, lay.beta]

        log_v = log_expit(rv)
        log_1mv = log_expit(-rv)
        pad = np.zeros((S, 1))
        log_pi = np.concatenate([log_v, pad], 1) + np.concatenate([pad, np.cumsum(log_1mv, 1)], 1)

        log_s = log_expit(rphi)
        log_1ms = log_expit(-rphi)
        log_phi = np.log(eps + c * np.exp(log_s))
        log_1mphi = np.log(eps + c * np.exp(log_1ms))
        # per-cluster linear predictor coefficients: log-odds, then the constant
        coef = np.empty((S, K, p + 1))
        coef[:, :, :p] = log_phi - log_1mphi
        coef[:, :, p] = log_pi + log_1mphi.sum(-1)

        sa = expit(ra)
        alpha = lo + (hi - lo) * sa
        sum_log_1mv = log_1mv.sum(1)
        tv0, tg0 = self._t_prior(b0)
        tv, tg = self._t_prior(b)
        prior = (
            (K - 1) * np.log(alpha)
            + (alpha - 1.0) * sum_log_1mv
            + tv0.sum(1)
            + tv.sum(1)
            + (log_v + log_1mv).sum(1)
            + log_expit(ra) + log_expit(-ra)
            + (log_s + log_1ms).reshape(S, -1).sum(1)
            + self._const
        )
        return dict(coef=coef, b0=b0, b=b, log_v=log_v, log_s=log_s, log_1ms=log_1ms,
                    log_phi=log_phi, log_1mphi=log_1mphi, sa=sa, alpha=alpha,
                    sum_log_1mv=sum_log_1mv, tg0=tg0, tg=tg, prior=prior)

    def _lik_fast(self, cm, batch, scale, grad):
        # response term in probability space: sigma(+-eta) factorises over cluster and row
        xa, W, Y, n1 = batch
        S, K, _ = cm["coef"].shape
        B = xa.shape[0]
        A = self._work("A", (S, K, B))
        np.matmul(cm["coef"].reshape(S * K, -1), xa.T, out=A.reshape(S * K, B))
        m = A.max(axis=1, keepdims=True)
        A -= m
        # subnormal results make exp two orders of magnitude slower
        np.maximum(A, _EXP_FLOOR, out=A)
        np.exp(A, out=A)
        U = None
        if Y is not None:
            lin = cm["b"] @ W.T
            b0 = cm["b0"]
            with np.errstate(over="ignore", invalid="ignore"):
                U = self._work("U", (S, K, B))
                np.multiply(np.exp(-b0)[:, :, None], np.exp(-lin[:, None, :n1]), out=U[:, :, :n1])
                np.multiply(np.exp(b0)[:, :, None], np.exp(lin[:, None, n1:]), out=U[:, :, n1:])
                U += 1.0
                np.reciprocal(U, out=U)
                A *= U
        Z = A.sum(axis=1)
        if not np.all(Z > 0) or not np.all(np.isfinite(Z)):
            return None
        lik = scale * (m[:, 0, :].sum(axis=1) + np.log(Z).sum(axis=1))
        if not grad:
            return lik, None
        A /= Z[:, None, :]
        rho = A
        RXa = (rho.reshape(S * K, B) @ xa).reshape(S, K, -1)
        out = {"RX": RXa[:, :, :-1], "Nk": RXa[:, :, -1]}
        if U is not None:
            # rho * (1 - sigma(y' eta)); the sign y' is applied per block below
            U *= rho
            np.subtract(rho, U, out=U)
            out["g_b0"] = U[:, :, :n1].sum(axis=2) - U[:, :, n1:].sum(axis=2)
            D = U.sum(axis=1)
            D[:, n1:] *= -1.0
            out["g_b"] = D @ W
        return lik, out

    def _lik_logspace(self, cm, batch, scale, grad):
        xa, W, Y, n1 = batch
        S, K, _ = cm["coef"].shape
        B = xa.shape[0]
        T = (cm["coef"].reshape(S * K, -1) @ xa.T).reshape(S, K, B)
        if Y is not None:
            eta = (cm["b"] @ W.T)[:, None, :] + cm["b0"][:, :, None]
            T += _log_bernoulli_logit(Y, eta)
        m = T.max(axis=1, keepdims=True)
        T -= m
        np.maximum(T, _EXP_FLOOR, out=T)
        e = np.exp(T, out=T)
        Z = e.sum(axis=1)
        lik = scale * (m[:, 0, :].sum(axis=1) + np.log(Z).sum(axis=1))
        if not grad:
            return lik, None
        e /= Z[:, None, :]
        rho = e
        RXa = (rho.reshape(S * K, B) @ xa).reshape(S, K, -1)
        out = {"RX": RXa[:, :, :-1], "Nk": RXa[:, :, -1]}
        if Y is not None:
            q = _sigmoid(eta)
            np.subtract(Y, q, out=q)
            q *= rho
            out["g_b0"] = q.sum(axis=2)
            out["g_b"] = q.sum(axis=1) @ W
        return lik, out

    def value_and_grad(self, theta, rows=None, scale: float = 1.0, grad: bool = True, logspace: bool = False):
        """Log target and gradient for each row of ``theta`` (shape S x d).

        The default path works in probability space and falls back to the
        log-space path when anything underflows; ``logspace=True`` forces it.
        """
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        lay, cfg = self.layout, self.cfg
        S = theta.shape[0]
        K = lay.k_max
        c = 1.0 - 2.0 * cfg.epsilon
        lo, hi = cfg.alpha_bounds
        batch = self._batch(rows)
        cm = self._common(theta)
        res = None if logspace else self._lik_fast(cm, batch, scale, grad)
        if res is None:
            res = self._lik_logspace(cm, batch, scale, grad)
        lik, parts = res
        val = lik + cm["prior"]
        if not grad:
            return val

        g = np.empty_like(theta)
        Nk, RX = parts["Nk"], parts["RX"]
        alpha, sa = cm["alpha"], cm["sa"]
        v = np.exp(cm["log_v"])
        gpi = scale * Nk
        tail = np.cumsum(gpi[:, ::-1], axis=1)[:, ::-1]
        g_v = gpi[:, :-1] * (1.0 - v) - v * tail[:, 1:]
        g_v += -(alpha - 1.0)[:, None] * v + (1.0 - 2.0 * v)
        g[:, lay.v] = g_v

        g_alpha = (K - 1) / alpha + cm["sum_log_1mv"]
        g[:, lay.alpha] = g_alpha * (hi - lo) * sa * (1.0 - sa) + (1.0 - 2.0 * sa)

        s = np.exp(cm["log_s"])
        ds = c * np.exp(cm["log_s"] + cm["log_1ms"])
        g_phi = scale * (RX * ds / np.exp(cm["log_phi"]) - (Nk[:, :, None] - RX) * ds / np.exp(cm["log_1mphi"]))
        g_phi += 1.0 - 2.0 * s
        g[:, lay.phi] = g_phi.reshape(S, -1)

        if "g_b0" in parts:
            g[:, lay.beta0] = scale * parts["g_b0"] + cm["tg0"]
            g[:, lay.beta] = scale * parts["g_b"] + cm["tg"]
        else:
            g[:, lay.beta0] = cm["tg0"]
            g[:, lay.beta] = cm["tg"]
        return val, g

    def initial_mean(self) -> np.ndarray:
        """Zero vector with intercepts at the logit of the outcome base rate."""
        mu = np.zeros(self.dim)
        if self.data.has_response:
            rate = np.clip(self.data.y.mean(), 1.0 / (2 * self.n), 1.0 - 1.0 / (2 * self.n))
            mu[self.layout.beta0] = logit(rate)
        return mu
