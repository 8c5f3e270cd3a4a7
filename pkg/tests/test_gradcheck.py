"""
Test the gradcheck module
"""

import numpy as np
import pytest

from convnorm import tensor as T
from convnorm.gradcheck import CASES, TOLERANCE, GradCheckResult, check_case, run_gradcheck


@pytest.mark.parametrize("name", list(CASES))
@pytest.mark.parametrize("seed", range(10))
def test_case_passes(name, seed):
    res = check_case(name, seed)
    assert res.passed, f"{name} seed {seed}: rel error {res.error:.3e}"


def test_cases_cover_every_normalization():
    names = " ".join(CASES).lower()
    for part in ("batch norm", "dwck", "learned", "conv2d", "depthwise", "softmax"):
        assert part in names


@pytest.mark.parametrize(
    "name",
    [
        "batch norm (beta)",
        "DWCK norm (stage weights)",
        "DWCK norm, weighted variance (stage weights)",
        "learned-statistics norm (mean net, first stage)",
        "learned-statistics norm (std net, first stage)",
        "learned-statistics norm (std net, last stage)",
    ],
)
def test_parameter_cases_present(name):
    assert name in CASES


def test_learned_stats_cases_have_nonzero_gradients():
    # Fresh statistic nets have zero final stages, which zeroes the hidden-stage gradients
    for name in [n for n in CASES if n.startswith("learned")]:
        with T.precision(np.float64):
            f, x = CASES[name](T.make_rng(0))
            leaf = T.Tensor(x, requires_grad=True)
            f(leaf).backward()
            assert np.any(leaf.grad != 0), name


def test_unknown_case():
    with pytest.raises(ValueError, match="Valid options are"):
        check_case("nope", 0)


def test_result():
    assert GradCheckResult("x", 0, TOLERANCE / 2).passed
    assert not GradCheckResult("x", 0, TOLERANCE).passed


def test_run_gradcheck_order():
    results = run_gradcheck(seeds=[3])
    assert [r.name for r in results] == list(CASES)
    assert all(r.seed == 3 for r in results)
    # Cases are built from fresh seeded generators
    assert results[0] == check_case(results[0].name, 3)
