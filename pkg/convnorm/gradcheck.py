"""
Finite-difference gradient checks of the tensor ops and normalization layers
"""

from dataclasses import replace
from typing import Callable, Dict, Iterable, List, NamedTuple, Tuple

import numpy as np

from . import tensor as T
from .normalization import (
    BatchNormState,
    DWCKNormState,
    LearnedStatsState,
    StatNet,
    batch_norm_forward,
    build_stat_nets,
    dwck_norm_forward,
    learned_stats_forward,
)
from .tensor import Rng, Tensor, grad_check, make_rng, precision

TOLERANCE = 1e-4

Case = Tuple[Callable[[Tensor], Tensor], np.ndarray]


class GradCheckResult(NamedTuple):
    name: str
    seed: int
    error: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _weighted_sum(rng: Rng) -> Callable[[Tensor], Tensor]:
    """Scalar loss ``sum(w * y)`` with random `w` fixed on first use."""
    w: Dict[Tuple[int, ...], np.ndarray] = {}

    def loss(y: Tensor) -> Tensor:
        if y.shape not in w:
            w[y.shape] = rng.normal(size=y.shape)
        return (y * w[y.shape]).sum()

    return loss


def _away_from_zero(rng: Rng, shape: Tuple[int, ...], margin: float = 0.1) -> np.ndarray:
    return rng.uniform(margin, 1, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _conv2d_x(rng: Rng) -> Case:
    k = Tensor(rng.normal(size=(4, 3, 3, 3)))
    b = Tensor(rng.normal(size=4))
    loss = _weighted_sum(rng)
    return lambda x: loss(T.conv2d(x, k, b, stride=(2, 1), padding=(1, 1))), rng.normal(
        size=(2, 3, 6, 5)
    )


def _conv2d_kernel(rng: Rng) -> Case:
    x = Tensor(rng.normal(size=(2, 3, 6, 5)))
    loss = _weighted_sum(rng)
    return lambda k: loss(T.conv2d(x, k, stride=(1, 2), padding=(0, 1))), rng.normal(
        size=(2, 3, 3, 2)
    )


def _depthwise_x(rng: Rng) -> Case:
    k = Tensor(rng.uniform(0, 1, size=(3, 2, 2)))
    loss = _weighted_sum(rng)
    return lambda x: loss(T.depthwise_conv2d(x, k, stride=(2, 2))), rng.normal(size=(2, 3, 4, 4))


def _depthwise_kernel(rng: Rng) -> Case:
    x = Tensor(rng.normal(size=(2, 3, 6, 6)))
    loss = _weighted_sum(rng)
    return lambda k: loss(T.depthwise_conv2d(x, k, stride=(3, 3))), rng.normal(size=(3, 3, 3))


def _relu(rng: Rng) -> Case:
    loss = _weighted_sum(rng)
    return lambda x: loss(T.relu(x)), _away_from_zero(rng, (2, 3, 4, 4))


def _softplus(rng: Rng) -> Case:
    loss = _weighted_sum(rng)
    return lambda x: loss(T.softplus(x)), rng.normal(size=(2, 3, 4, 4))


def _elementwise(rng: Rng) -> Case:
    loss = _weighted_sum(rng)
    return (
        lambda x: loss(T.sqrt(x) * T.log(x) + T.exp(-x) / (1 + x**2) - x.mean(axis=(0, 2))),
        rng.uniform(0.5, 2, size=(2, 3, 3, 3)),
    )


def _pooling(rng: Rng) -> Case:
    loss = _weighted_sum(rng)
    return (
        lambda x: loss(T.avg_pool(x, (2, 2), (1, 1))) + loss(T.global_avg_pool(x)),
        rng.normal(size=(2, 3, 4, 5)),
    )


def _pad2d(rng: Rng) -> Case:
    loss = _weighted_sum(rng)
    return lambda x: loss(T.pad2d(x, (1, 2, 0, 1))), rng.normal(size=(1, 2, 3, 3))


def _softmax_cross_entropy(rng: Rng) -> Case:
    onehot = np.eye(10)[rng.integers(0, 10, size=4)]
    return lambda x: T.cross_entropy(T.softmax(x), onehot), rng.normal(size=(4, 10))


def _batch_norm_x(rng: Rng) -> Case:
    s = BatchNormState.create(3)
    s.gamma.data[:] = rng.uniform(0.5, 1.5, size=3)
    s.beta.data[:] = rng.normal(size=3)
    loss = _weighted_sum(rng)
    return lambda x: loss(batch_norm_forward(x, s, training=True)), rng.normal(size=(2, 3, 4, 4))


def _batch_norm_gamma(rng: Rng) -> Case:
    s = BatchNormState.create(3)
    x = Tensor(rng.normal(size=(2, 3, 4, 4)))
    loss = _weighted_sum(rng)
    return (
        lambda g: loss(batch_norm_forward(x, replace(s, gamma=g), training=True)),
        rng.uniform(0.5, 1.5, size=3),
    )


def _batch_norm_beta(rng: Rng) -> Case:
    s = BatchNormState.create(3)
    s.gamma.data[:] = rng.uniform(0.5, 1.5, size=3)
    x = Tensor(rng.normal(size=(2, 3, 4, 4)))
    loss = _weighted_sum(rng)
    return (
        lambda b: loss(batch_norm_forward(x, replace(s, beta=b), training=True)),
        rng.normal(size=3),
    )


def _dwck_x(rng: Rng) -> Case:
    # 7x7 is padded to 8x8
    s = DWCKNormState.create(2, (7, 7), rng, jitter=0.3)
    loss = _weighted_sum(rng)
    return lambda x: loss(dwck_norm_forward(x, s, training=True)), rng.normal(size=(3, 2, 7, 7))


def _dwck_weighted_var_x(rng: Rng) -> Case:
    s = DWCKNormState.create(2, (6, 6), rng, jitter=0.3, weighted_var=True)
    loss = _weighted_sum(rng)
    return lambda x: loss(dwck_norm_forward(x, s, training=True)), rng.normal(size=(3, 2, 6, 6))


def _dwck_stage_weights(weighted_var: bool) -> Callable[[Rng], Case]:
    def build(rng: Rng) -> Case:
        s = DWCKNormState.create(2, (8, 8), rng, jitter=0.3, weighted_var=weighted_var)
        x = Tensor(rng.normal(size=(3, 2, 8, 8)))
        loss = _weighted_sum(rng)

        def f(w: Tensor) -> Tensor:
            s_w = replace(s, stage_weights=[w, *s.stage_weights[1:]])
            return loss(dwck_norm_forward(x, s_w, True))

        return f, s.stage_weights[0].data.copy()

    return build


def _trained_stat_nets(layer_index: int, n_channels: int, rng: Rng) -> LearnedStatsState:
    """Statistic networks with random final stages, as after some training."""
    s = build_stat_nets(layer_index, n_channels, rng)
    for net in (s.mean_net, s.std_net):
        net.weights[-1].data[:] = rng.normal(0, 0.5, size=net.weights[-1].shape)
        net.biases[-1].data[:] += rng.normal(0, 0.1, size=net.biases[-1].shape)
    return s


def _learned_stats_x(rng: Rng) -> Case:
    s = _trained_stat_nets(2, 5, rng)
    loss = _weighted_sum(rng)
    return lambda x: loss(learned_stats_forward(x, s, training=True)), rng.normal(
        size=(2, 5, 4, 4)
    )


def _learned_stats_net(which: str, stage: int) -> Callable[[Rng], Case]:
    def build(rng: Rng) -> Case:
        s = _trained_stat_nets(1, 5, rng)
        x = Tensor(rng.uniform(0, 2, size=(2, 5, 4, 4)))
        loss = _weighted_sum(rng)
        net: StatNet = getattr(s, which)

        def f(w: Tensor) -> Tensor:
            weights = list(net.weights)
            weights[stage] = w
            s_w = replace(s, **{which: replace(net, weights=weights)})
            return loss(learned_stats_forward(x, s_w, True))

        return f, net.weights[stage].data.copy()

    return build


CASES: Dict[str, Callable[[Rng], Case]] = {
    "conv2d (input)": _conv2d_x,
    "conv2d (kernel)": _conv2d_kernel,
    "depthwise_conv2d (input)": _depthwise_x,
    "depthwise_conv2d (kernel)": _depthwise_kernel,
    "relu": _relu,
    "softplus": _softplus,
    "sqrt/log/exp/div/pow/mean": _elementwise,
    "avg_pool + global_avg_pool": _pooling,
    "pad2d": _pad2d,
    "softmax + cross_entropy": _softmax_cross_entropy,
    "batch norm (input)": _batch_norm_x,
    "batch norm (gamma)": _batch_norm_gamma,
    "batch norm (beta)": _batch_norm_beta,
    "DWCK norm (input)": _dwck_x,
    "DWCK norm, weighted variance (input)": _dwck_weighted_var_x,
    "DWCK norm (stage weights)": _dwck_stage_weights(weighted_var=False),
    "DWCK norm, weighted variance (stage weights)": _dwck_stage_weights(weighted_var=True),
    "learned-statistics norm (input)": _learned_stats_x,
    "learned-statistics norm (mean net, first stage)": _learned_stats_net("mean_net", 0),
    "learned-statistics norm (mean net, last stage)": _learned_stats_net("mean_net", -1),
    "learned-statistics norm (std net, first stage)": _learned_stats_net("std_net", 0),
    "learned-statistics norm (std net, last stage)": _learned_stats_net("std_net", -1),
}


def check_case(name: str, seed: int) -> GradCheckResult:
    """Gradient check of one case, built and run in 64-bit precision."""
    try:
        build = CASES[name]
    except KeyError:
        raise ValueError(
            f"invalid gradient check case {name!r}. Valid options are: {', '.join(CASES)}."
        ) from None
    with precision(np.float64):
        f, x = build(make_rng(seed))
        return GradCheckResult(name, seed, grad_check(f, x))


def run_gradcheck(seeds: Iterable[int] = range(10)) -> List[GradCheckResult]:
    return [check_case(name, seed) for name in CASES for seed in seeds]
