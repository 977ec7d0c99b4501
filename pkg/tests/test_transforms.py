import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate
from scipy.special import expit

from bprvi.errors import DomainError
from bprvi.model import ConstrainedParams, ModelConfig, log_joint_marginalized, log_prior
from bprvi.transforms import (
    BPRTarget,
    ParamLayout,
    ParamVector,
    from_constrained,
    log_abs_det_jacobian,
    log_target,
    to_constrained,
)

from conftest import random_cohort

CFG = ModelConfig(k_max=4)
LAYOUT = ParamLayout(4, 3, 2)


def _flat_constrained(c: ConstrainedParams):
    return np.concatenate([c.v, [c.alpha], c.phi.ravel(), c.beta0, c.beta])


def test_layout_segments_tile_the_vector():
    lay = ParamLayout(5, 4, 3)
    assert lay.dim == 4 + 1 + 20 + 5 + 3
    idx = np.zeros(lay.dim, dtype=int)
    for seg in lay.segments().values():
        idx[seg] += 1
    assert np.all(idx == 1)


def test_layout_names():
    names = ParamLayout(2, 2, 1).names(["a", "b"], ["age"])
    assert len(names) == ParamLayout(2, 2, 1).dim
    assert names[1] == "alpha" and names[-1] == "beta[age]"


def test_alpha_jacobian_at_zero_exact():
    # log(9.7/4) at raw 0; often quoted rounded as 0.8866
    raw = np.zeros(LAYOUT.dim)
    r = ParamVector(raw, LAYOUT)
    lo, hi = CFG.alpha_bounds
    a_term = math.log(hi - lo) + 2 * math.log(0.5)
    assert a_term == pytest.approx(0.885831524389446, abs=1e-13)
    v_term = LAYOUT.n_v * 2 * math.log(0.5)
    phi_term = 12 * (math.log(1 - 2 * CFG.epsilon) + 2 * math.log(0.5))
    assert log_abs_det_jacobian(r, CFG) == pytest.approx(a_term + v_term + phi_term, abs=1e-12)


# beyond |r| ~ 10 the sigmoid is too close to 1 to invert to 1e-10
@given(st.lists(st.floats(-10, 10), min_size=LAYOUT.dim, max_size=LAYOUT.dim))
def test_round_trip_raw(raw):
    raw = np.array(raw)
    back = from_constrained(to_constrained(ParamVector(raw, LAYOUT), CFG), CFG).raw
    np.testing.assert_allclose(back, raw, atol=1e-10)


@given(st.integers(0, 2**31 - 1))
def test_round_trip_constrained(seed):
    rng = np.random.default_rng(seed)
    c = ConstrainedParams(
        v=rng.uniform(0.01, 0.99, 3),
        alpha=rng.uniform(0.31, 9.99),
        phi=rng.uniform(0.01, 0.99, (4, 3)),
        beta0=rng.normal(0, 3, 4),
        beta=rng.normal(0, 3, 2),
    )
    back = to_constrained(from_constrained(c, CFG), CFG)
    np.testing.assert_allclose(_flat_constrained(back), _flat_constrained(c), atol=1e-10)


def test_round_trip_raw_moderate_tolerance_exact():
    rng = np.random.default_rng(3)
    for _ in range(200):
        raw = rng.normal(0, 3, LAYOUT.dim)
        back = from_constrained(to_constrained(ParamVector(raw, LAYOUT), CFG), CFG).raw
        np.testing.assert_allclose(back, raw, atol=1e-10)


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(20):
        raw = rng.normal(0, 2, LAYOUT.dim)
        J = np.empty((LAYOUT.dim, LAYOUT.dim))
        for j in range(LAYOUT.dim):
            e = np.zeros(LAYOUT.dim)
            e[j] = h
            up = _flat_constrained(to_constrained(ParamVector(raw + e, LAYOUT), CFG))
            dn = _flat_constrained(to_constrained(ParamVector(raw - e, LAYOUT), CFG))
            J[:, j] = (up - dn) / (2 * h)
        _, logdet = np.linalg.slogdet(J)
        assert log_abs_det_jacobian(ParamVector(raw, LAYOUT), CFG) == pytest.approx(logdet, abs=1e-6)


def test_change_of_variables_one_dimensional_slice():
    """Integrating the raw-space density of one phi over the real line equals
    integrating the constrained-space density over (eps, 1 - eps)."""
    data = random_cohort(8, 3, 2, seed=1)
    cfg = ModelConfig(k_max=2)
    lay = ParamLayout.for_data(data, cfg)
    base = np.random.default_rng(2).normal(0, 0.5, lay.dim)
    j = lay.phi.start + 1
    base_c = to_constrained(ParamVector(base, lay), cfg)
    ref = log_target(ParamVector(base, lay), data, cfg)

    def raw_density(r):
        x = base.copy()
        x[j] = r
        return math.exp(log_target(ParamVector(x, lay), data, cfg) - ref)

    def constrained_density(phi):
        ph = base_c.phi.copy()
        ph.flat[1] = phi
        c = ConstrainedParams(base_c.v, base_c.alpha, ph, base_c.beta0, base_c.beta)
        # the other coordinates keep their Jacobian factors
        rest = log_abs_det_jacobian(ParamVector(base, lay), cfg) - math.log(1 - 2 * cfg.epsilon) \
            - math.log(expit(base[j])) - math.log(expit(-base[j]))
        return math.exp(log_joint_marginalized(data, c) + log_prior(c, cfg) + rest - ref)

    a = integrate.quad(raw_density, -40, 40, epsabs=0, epsrel=1e-10, limit=200)[0]
    b = integrate.quad(constrained_density, cfg.epsilon, 1 - cfg.epsilon, epsabs=0, epsrel=1e-10, limit=200)[0]
    assert a == pytest.approx(b, rel=1e-7)


def test_param_vector_validates():
    with pytest.raises(DomainError):
        ParamVector(np.zeros(3), LAYOUT)
    bad = np.zeros(LAYOUT.dim)
    bad[0] = np.nan
    with pytest.raises(DomainError):
        ParamVector(bad, LAYOUT)


# ------------------------------------------------------------ BPRTarget

@pytest.mark.parametrize("response", [True, False])
def test_target_matches_reference_composition(response):
    data = random_cohort(60, 4, 2, seed=5, response=response)
    cfg = ModelConfig(k_max=3)
    tgt = BPRTarget(data, cfg)
    rng = np.random.default_rng(1)
    theta = rng.normal(0, 1.5, (6, tgt.dim))
    rows = rng.integers(0, data.n, 20)
    for scale, r in ((1.0, None), (3.0, rows)):
        vals = tgt.value_and_grad(theta, r, scale, grad=False)
        ref = [log_target(ParamVector(t, tgt.layout), data, cfg, scale, r) for t in theta]
        np.testing.assert_allclose(vals, ref, rtol=1e-11, atol=1e-9)


def test_target_gradient_matches_finite_differences():
    data = random_cohort(50, 3, 2, seed=6)
    tgt = BPRTarget(data, ModelConfig(k_max=3))
    theta = np.random.default_rng(4).normal(0, 1, tgt.dim)
    _, g = tgt.value_and_grad(theta[None])
    h = 1e-6
    fd = np.empty(tgt.dim)
    for j in range(tgt.dim):
        e = np.zeros(tgt.dim)
        e[j] = h
        fd[j] = (tgt.value_and_grad((theta + e)[None], grad=False)[0]
                 - tgt.value_and_grad((theta - e)[None], grad=False)[0]) / (2 * h)
    np.testing.assert_allclose(g[0], fd, rtol=1e-5, atol=1e-5)


def test_fast_and_logspace_paths_agree():
    data = random_cohort(80, 4, 2, seed=7)
    tgt = BPRTarget(data, ModelConfig(k_max=4))
    theta = np.random.default_rng(8).normal(0, 2, (5, tgt.dim))
    v1, g1 = tgt.value_and_grad(theta)
    v2, g2 = tgt.value_and_grad(theta, logspace=True)
    np.testing.assert_allclose(v1, v2, rtol=1e-12)
    np.testing.assert_allclose(g1, g2, rtol=1e-9, atol=1e-9)


def test_target_finite_at_extreme_raw_values():
    data = random_cohort(30, 3, 1, seed=9)
    tgt = BPRTarget(data, ModelConfig(k_max=3))
    theta = np.full((2, tgt.dim), 40.0)
    theta[1] *= -1
    v, g = tgt.value_and_grad(theta)
    # v rounds to exactly 1 here, so only the log-space target can evaluate it
    assert np.all(np.isfinite(v)) and np.all(np.isfinite(g))


def test_target_rejects_empty_batch():
    data = random_cohort(10, 2, 1)
    tgt = BPRTarget(data, ModelConfig(k_max=2))
    with pytest.raises(DomainError):
        tgt.value_and_grad(np.zeros((1, tgt.dim)), rows=np.array([], dtype=int))


def test_initial_mean_sets_intercepts_to_base_rate():
    data = random_cohort(200, 3, 1, seed=10)
    tgt = BPRTarget(data, ModelConfig(k_max=3))
    mu = tgt.initial_mean()
    rate = data.y.mean()
    np.testing.assert_allclose(mu[tgt.layout.beta0], math.log(rate / (1 - rate)))
    assert np.all(mu[tgt.layout.phi] == 0)
