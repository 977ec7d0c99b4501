import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import expit

from bprvi.errors import DomainError, NumericalError
from bprvi.mcmc import McmcConfig, PosteriorDraws, rhat, rwm_sample, rwm_sample_target
from bprvi.model import ModelConfig
from bprvi.toys import BetaBernoulliTarget, GaussianTarget

from conftest import random_cohort


def batch_means_se(x, n_batches=50):
    """Monte Carlo standard error of the mean of an autocorrelated series."""
    m = len(x) // n_batches
    means = np.asarray(x[: m * n_batches]).reshape(n_batches, m, *np.shape(x)[1:]).mean(axis=1)
    return means.std(axis=0, ddof=1) / math.sqrt(n_batches)


@pytest.fixture(scope="module")
def gaussian_run():
    cfg = McmcConfig(n_chains=4, n_warmup=3000, n_samples=25_000, seed=1)
    return rwm_sample_target(GaussianTarget.standard(2), cfg)


def test_standard_gaussian_moments(gaussian_run):
    flat = gaussian_run.flat
    assert flat.shape == (100_000, 2)
    se = np.max([batch_means_se(c) for c in gaussian_run.draws], axis=0) / 2
    assert np.all(np.abs(flat.mean(axis=0)) < 3 * se)
    np.testing.assert_allclose(np.cov(flat.T), np.eye(2), atol=0.1)


def test_acceptance_rate_near_target(gaussian_run):
    assert np.all((gaussian_run.acceptance_rate > 0.15) & (gaussian_run.acceptance_rate < 0.45))


def test_well_mixed_rhat(gaussian_run):
    assert np.all(rhat(gaussian_run) < 1.01)


def test_beta_bernoulli_posterior_moments():
    x = (np.random.default_rng(0).random(1000) < 0.3).astype(float)
    tgt = BetaBernoulliTarget(x)
    draws = rwm_sample_target(tgt, McmcConfig(n_chains=4, n_warmup=2000, n_samples=25_000, seed=3))
    phi = expit(draws.flat[:, 0])
    a, b = tgt.posterior()
    post = stats.beta(a, b)
    assert phi.mean() == pytest.approx(post.mean(), rel=0.02)
    assert phi.var() == pytest.approx(post.var(), rel=0.02)


def test_stationary_histogram_matches_target():
    # a skewed 1-d density: Beta(3, 12) pushed to the logit scale
    tgt = BetaBernoulliTarget(np.zeros(0), 3.0, 12.0)
    tgt.x = np.array([0.0])[:0]
    draws = rwm_sample_target(_Prior(tgt), McmcConfig(n_chains=4, n_warmup=2000, n_samples=250_000, seed=4))
    th = draws.flat[:, 0]
    edges = np.linspace(-6, 1.5, 61)
    cdf = stats.beta(3, 12).cdf(expit(edges))
    p = np.diff(cdf)
    p = np.append(p, 1 - p.sum())
    counts, _ = np.histogram(th, edges)
    q = np.append(counts, th.size - counts.sum()) / th.size
    assert 0.5 * np.abs(p - q).sum() < 0.02


class _Prior:
    """Beta prior only: the toy with no observations (``rows`` are ignored)."""

    def __init__(self, tgt):
        self.tgt = tgt

    dim = 1
    n = 1

    def value_and_grad(self, theta, rows=None, scale=1.0, grad=True):
        theta = np.atleast_2d(theta)[:, 0]
        lp = -np.logaddexp(0.0, -theta)
        l1p = -np.logaddexp(0.0, theta)
        return self.tgt.a * lp + self.tgt.b * l1p


def test_same_seed_identical_draws_and_chains_differ():
    cfg = McmcConfig(n_chains=2, n_warmup=200, n_samples=300, seed=5)
    tgt = GaussianTarget.standard(3)
    a, b = rwm_sample_target(tgt, cfg), rwm_sample_target(tgt, cfg)
    np.testing.assert_array_equal(a.draws, b.draws)
    assert not np.array_equal(a.draws[0], a.draws[1])


def test_model_target_entry_point():
    data = random_cohort(60, 2, 1, seed=3)
    d = rwm_sample(data, ModelConfig(k_max=2), McmcConfig(n_chains=2, n_warmup=300, n_samples=500))
    assert isinstance(d, PosteriorDraws)
    assert d.draws.shape == (2, 500, 1 + 1 + 4 + 2 + 1)
    assert np.all(np.isfinite(d.draws)) and np.all((d.acceptance_rate > 0) & (d.acceptance_rate < 1))
    assert d.chain_index.tolist() == [0] * 500 + [1] * 500


def test_low_acceptance_aborts():
    cfg = McmcConfig(n_chains=2, n_warmup=0, n_samples=500, proposal_scale=1e4)
    with pytest.raises(NumericalError, match="acceptance"):
        rwm_sample_target(GaussianTarget.standard(1), cfg)


def test_high_dimension_warns():
    cfg = McmcConfig(n_chains=1, n_warmup=0, n_samples=2, proposal_scale=0.01)
    with pytest.warns(RuntimeWarning):
        rwm_sample_target(GaussianTarget.standard(101), cfg)


def test_config_validation():
    with pytest.raises(DomainError):
        McmcConfig(n_samples=0)
    with pytest.raises(DomainError):
        McmcConfig(proposal_scale=[0.1, -1.0])


# ------------------------------------------------------------------ R-hat

def test_rhat_duplicated_chains_near_one():
    x = np.random.default_rng(0).standard_normal(20_000)
    assert rhat(np.stack([x, x]))[0] <= 1.001


def test_rhat_detects_separated_chains():
    rng = np.random.default_rng(1)
    arr = np.stack([rng.normal(0, 1, 2000), rng.normal(10, 1, 2000)])
    assert rhat(arr)[0] > 1.1


def test_rhat_matches_hand_computation():
    rng = np.random.default_rng(2)
    arr = rng.normal(size=(3, 40, 2)) + np.array([0.0, 0.3, -0.2])[:, None, None]
    halves = np.concatenate([arr[:, :20], arr[:, 20:]], axis=0)
    n = 20
    W = halves.var(axis=1, ddof=1).mean(axis=0)
    B = n * halves.mean(axis=1).var(axis=0, ddof=1)
    expected = np.sqrt(((n - 1) / n * W + B / n) / W)
    np.testing.assert_allclose(rhat(arr), expected, rtol=1e-12)


def test_rhat_needs_two_chains():
    with pytest.raises(DomainError):
        rhat(np.zeros((1, 100, 2)))
