"""
Test the sampling module
"""

from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from convnorm.sampling import (
    BUILTIN_SPECS,
    Density,
    SamplerSpec,
    estimator_report,
    importance_mean,
    importance_weights,
    mc_mean,
    shifted_normal_weight,
    true_mean,
)
from convnorm.tensor import make_rng


def test_mc_mean_standard_normal():
    spec = SamplerSpec(Density.normal(), Density.normal(), n=100_000, seed=1)
    assert abs(mc_mean(spec)) < 0.02


def test_mc_mean_exponential():
    spec = SamplerSpec(Density.exponential(1), Density.exponential(1), n=100_000, seed=1)
    assert mc_mean(spec) == pytest.approx(1, abs=0.02)


def test_mc_mean_single_sample():
    spec = SamplerSpec(Density.normal(), Density.normal(), n=1, seed=5)
    assert mc_mean(spec) == Density.normal().sample(1, make_rng(5))[0]


@pytest.mark.parametrize("target", [Density.normal(2, 3), Density.mixture(0.3, -1, 1, 2, 0.5)])
def test_identical_proposal_reproduces_mc(target):
    spec = SamplerSpec(target, target, n=1000, seed=7)
    x = target.sample(spec.n, make_rng(spec.seed))
    np.testing.assert_array_equal(importance_weights(spec, x), 1)
    assert importance_mean(spec) == mc_mean(spec)


def test_shifted_normal_weight_is_density_ratio():
    x = np.linspace(-3, 5, 17)
    for theta in (0.5, 1, 2):
        np.testing.assert_allclose(
            shifted_normal_weight(x, theta),
            stats.norm.pdf(x) / stats.norm.pdf(x, loc=theta),
            rtol=1e-10,
        )


def test_shifted_normal_proposal_is_unbiased():
    spec = SamplerSpec(Density.normal(), Density.normal(1, 1), n=10_000, seed=0)
    x = spec.proposal.sample(spec.n, make_rng(spec.seed))
    w = importance_weights(spec, x)
    np.testing.assert_allclose(w, shifted_normal_weight(x, 1), rtol=1e-10)

    se = np.std(x * w, ddof=1) / np.sqrt(spec.n)
    assert abs(importance_mean(spec)) < 3 * se


def test_gaussian_tail_variance_reduction():
    spec = BUILTIN_SPECS["gaussian-tail"]
    assert spec.n == 10_000
    df = estimator_report(spec, 100).set_index("method")
    # Exact per-sample variances are 5.67e-4 (plain) and 8.21e-8 (importance), a factor of
    # about 6.9e3. A plain estimate sees ~0.3 tail samples on average, so the empirical
    # factor over 100 replicates scatters widely around that; 10 is the floor.
    assert df.variance["mc"] / df.variance["importance"] > 10


def test_identical_proposal_variances_agree():
    target = Density.normal(1, 2)
    df = estimator_report(SamplerSpec(target, target, n=500), 100).set_index("method")
    assert 0.5 <= df.variance["mc"] / df.variance["importance"] <= 2


@pytest.mark.parametrize("name", list(BUILTIN_SPECS))
def test_importance_estimator_unbiased(name):
    spec = replace(BUILTIN_SPECS[name], n=2000)
    df = estimator_report(spec, 100).set_index("method")
    se = np.sqrt(df.variance["importance"] / 100)
    assert abs(df["mean"]["importance"] - true_mean(spec)) < 4 * se


def test_true_mean():
    assert true_mean(BUILTIN_SPECS["normal-shift"]) == pytest.approx(0, abs=1e-10)
    assert true_mean(BUILTIN_SPECS["exponential"]) == pytest.approx(1)
    assert true_mean(BUILTIN_SPECS["mixture"]) == pytest.approx(0.5)
    # E[x 1(x > 4)] = pdf(4) for the standard normal
    assert true_mean(BUILTIN_SPECS["gaussian-tail"]) == pytest.approx(stats.norm.pdf(4), rel=1e-6)


def test_estimator_report():
    spec = replace(BUILTIN_SPECS["normal-shift"], n=100, seed=3)
    df = estimator_report(spec, 1)
    assert list(df.columns) == ["method", "mean", "variance", "n", "seed"]
    assert df.method.tolist() == ["mc", "importance"]
    assert df.n.tolist() == [100, 100]
    assert df.seed.tolist() == [3, 3]
    assert df.variance.tolist() == [0, 0]
    assert df["mean"].iloc[0] == mc_mean(spec)

    assert len(estimator_report(spec, 5)) == 2
    with pytest.raises(ValueError):
        estimator_report(spec, 0)


def test_density_mean_and_sample():
    d = Density.mixture(0.25, -4, 1, 4, 1)
    assert d.mean() == 2
    x = d.sample(50_000, make_rng(0))
    assert np.mean(x < 0) == pytest.approx(0.25, abs=0.01)
    assert str(d) == "mixture(weight=0.25, loc1=-4, scale1=1, loc2=4, scale2=1)"


@pytest.mark.parametrize(
    "kind, params",
    [
        ("uniform", (0, 1)),
        ("normal", (0,)),
        ("normal", (0, 0)),
        ("exponential", (-1,)),
        ("mixture", (1.5, 0, 1, 0, 1)),
    ],
)
def test_density_invalid(kind, params):
    with pytest.raises(ValueError):
        Density(kind, params)


def test_spec_requires_covering_proposal():
    with pytest.raises(ValueError, match="support"):
        SamplerSpec(Density.normal(), Density.exponential())
    with pytest.raises(ValueError):
        SamplerSpec(Density.normal(), Density.normal(), n=0)


def test_zero_proposal_density_rejected():
    spec = SamplerSpec(Density.exponential(), Density.exponential())
    with pytest.raises(ValueError, match="is 0 at sample 1"):
        importance_weights(spec, np.array([1.0, -1.0]))
