"""
Batch, weighted-mean (DWCK) and learned-statistics normalization
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ._util import get_logger as _get_logger
from .tensor import (
    Rng,
    Tensor,
    conv2d,
    default_dtype,
    depthwise_conv2d,
    global_avg_pool,
    pad2d,
    relu,
    softplus,
    sqrt,
)

logger = _get_logger(__name__)

EPS = 1e-5
"""Added to every variance (or standard deviation) before dividing."""

MOMENTUM = 0.1
"""Weight of the current batch statistic in the running (EMA) statistics."""

DEFAULT_JITTER = 0.1
"""Relative half-width of the DWCK initialization neighborhood."""

ADMISSIBLE_FACTORS = (2, 3, 4, 5)
"""Kernel (= stride) sizes a DWCK stage may use."""

STAT_NET_ARCHITECTURES = {
    "first": ((4, 4, 1), (4, 3, 3)),
    "rest": ((4, 4, 2, 1), (4, 3, 2, 3)),
}
"""(channels, kernel sizes) of the statistic networks for the first and the remaining layers."""


def _update_running(running: np.ndarray, batch_stat: np.ndarray, momentum: float) -> None:
    running *= 1 - momentum
    running += momentum * batch_stat


def _affine(y: Tensor, gamma: Optional[Tensor], beta: Optional[Tensor]) -> Tensor:
    if gamma is None or beta is None:
        return y
    c = gamma.shape[0]
    return y * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)


def _check_channels(x: Tensor, n_channels: int, what: str) -> None:
    if x.ndim != 4 or x.shape[1] != n_channels:
        raise ValueError(
            f"{what} configured for {n_channels} channels got input of shape {x.shape}"
        )


def _affine_params(n_channels: int) -> Tuple[Tensor, Tensor]:
    return (
        Tensor(np.ones(n_channels), requires_grad=True),
        Tensor(np.zeros(n_channels), requires_grad=True),
    )


def _running_stats(n_channels: int) -> Tuple[np.ndarray, np.ndarray]:
    dtype = default_dtype()
    return np.zeros(n_channels, dtype=dtype), np.ones(n_channels, dtype=dtype)


#
# Batch Normalization
#


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics of a BN layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = MOMENTUM
    eps: float = EPS

    def __post_init__(self):
        if not 0 < self.momentum < 1:
            raise ValueError(f"momentum must be in (0, 1), got {self.momentum}")
        if self.gamma.shape != self.beta.shape or self.gamma.shape != self.running_mean.shape:
            raise ValueError("gamma, beta and running statistics must have one value per channel")

    @classmethod
    def create(cls, n_channels: int) -> "BatchNormState":
        gamma, beta = _affine_params(n_channels)
        return cls(gamma, beta, *_running_stats(n_channels))

    @property
    def n_channels(self) -> int:
        return self.gamma.shape[0]

    def parameters(self) -> Dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


def batch_norm_forward(x: Tensor, s: BatchNormState, training: bool) -> Tensor:
    """``gamma * (x - mu) / sqrt(var + eps) + beta`` with per-channel batch statistics.

    In training mode the statistics are taken over batch, height and width and the running
    statistics are updated; in eval mode the running statistics are used.
    """
    _check_channels(x, s.n_channels, "batch norm")
    c = s.n_channels

    if training:
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        var = ((x - mu) ** 2).mean(axis=(0, 2, 3), keepdims=True)
        _update_running(s.running_mean, mu.data.reshape(c), s.momentum)
        _update_running(s.running_var, var.data.reshape(c), s.momentum)
    else:
        mu = Tensor(s.running_mean.reshape(1, c, 1, 1))
        var = Tensor(s.running_var.reshape(1, c, 1, 1))

    return _affine((x - mu) / sqrt(var + s.eps), s.gamma, s.beta)


#
# DWCK planning
#


@dataclass(frozen=True)
class DWCKPlan:
    """Stack of non-overlapping depthwise kernels that collapses a padded image to 1x1."""

    dims: Tuple[int, int]
    """Original (unpadded) spatial dims."""

    pad_to: Tuple[int, int]

    stages: Tuple[Tuple[int, int, int, int], ...]
    """(k_h, k_w, s_h, s_w) per stage, kernel equal to stride."""

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def n_weights(self) -> int:
        """Stage weights per channel."""
        return sum(kh * kw for kh, kw, _, _ in self.stages)

    @property
    def full_weights(self) -> int:
        """Weights per channel of a single kernel covering the padded image."""
        return self.pad_to[0] * self.pad_to[1]

    def padding(self, h: int, w: int) -> Tuple[int, int, int, int]:
        """(top, bottom, left, right) zero padding of an (h, w) image to `pad_to`.
        The odd pixel goes to the bottom/right.
        """
        hp, wp = self.pad_to
        if h > hp or w > wp:
            raise ValueError(
                f"spatial dims {(h, w)} exceed the plan's padded dims {self.pad_to}; "
                "rebuild the plan for this input"
            )
        dh, dw = hp - h, wp - w
        return dh // 2, dh - dh // 2, dw // 2, dw - dw // 2

    def __str__(self):
        lines = [f"dims {self.dims[0]}x{self.dims[1]} -> padded {self.pad_to[0]}x{self.pad_to[1]}"]
        for i, (kh, kw, sh, sw) in enumerate(self.stages, start=1):
            lines.append(f"  stage {i}: DWCK kernel ({kh},{kw}) stride ({sh},{sw})")
        lines.append(
            f"weights per channel: {self.n_weights} "
            f"(single {self.pad_to[0]}x{self.pad_to[1]} kernel: {self.full_weights}, "
            f"reduction x{self.full_weights / self.n_weights:.2f})"
        )
        return "\n".join(lines)


def _is_admissible(n: int) -> bool:
    for p in (5, 3, 2):
        while n % p == 0:
            n //= p
    return n == 1


def _smallest_admissible(n: int) -> int:
    """Smallest integer >= n that factors into admissible kernel sizes."""
    m = n
    while not _is_admissible(m):
        m += 1
    return m


def _factor_side(n: int) -> List[int]:
    """Stage sizes for one padded side, largest first."""
    factors = []
    for p in (5, 3, 2):
        while n % p == 0:
            factors.append(p)
            n //= p
    assert n == 1

    if factors.count(2) >= 4:
        # One leading 4 (4x2x2x2 for 32, 4x2x2 for 16), but 2x2 for 4 and 2x2x2 for 8
        factors.remove(2)
        factors.remove(2)
        factors.append(4)

    return sorted(factors, reverse=True)


def plan_dwck(h: int, w: int) -> DWCKPlan:
    """Plan the DWCK stack for an (h, w) feature map."""
    if h < 1 or w < 1:
        raise ValueError(f"spatial dims must be >= 1, got {(h, w)}")

    hp, wp = _smallest_admissible(h), _smallest_admissible(w)
    if (hp, wp) != (h, w):
        logger.debug(f"padding {h}x{w} to {hp}x{wp} for the DWCK stack")

    fh, fw = _factor_side(hp), _factor_side(wp)
    n = max(len(fh), len(fw), 1)
    fh += [1] * (n - len(fh))
    fw += [1] * (n - len(fw))

    stages = tuple((a, b, a, b) for a, b in zip(fh, fw))

    return DWCKPlan(dims=(h, w), pad_to=(hp, wp), stages=stages)


def init_dwck(
    plan: DWCKPlan,
    full_dims: Tuple[int, int],
    rng: Rng,
    jitter: float = DEFAULT_JITTER,
    *,
    n_channels: int = 1,
) -> List[np.ndarray]:
    """Stage weights drawn uniformly around the n-th root of ``1/(N_h * N_w)``.

    With ``n`` stages, the product of the stage weights covering a pixel then starts out
    near ``1/(N_h * N_w)``, the arithmetic mean's weight.

    Returns
    -------
    list of arrays
        One ``(n_channels, k_h, k_w)`` array per stage.
    """
    if not 0 <= jitter < 0.5:
        raise ValueError(f"jitter must be in [0, 0.5), got {jitter}")
    nh, nw = full_dims
    nominal = (1 / (nh * nw)) ** (1 / plan.n_stages)

    return [
        rng.uniform((1 - jitter) * nominal, (1 + jitter) * nominal, size=(n_channels, kh, kw))
        for kh, kw, _, _ in plan.stages
    ]


#
# DWCK normalization
#


@dataclass
class DWCKNormState:
    """Weighted-mean normalization layer with a stacked-DWCK mean."""

    plan: DWCKPlan
    stage_weights: List[Tensor]
    gamma: Optional[Tensor]
    beta: Optional[Tensor]
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = MOMENTUM
    eps: float = EPS
    weighted_var: bool = False
    """Use the stage stack for the variance as well (off by default, unstable)."""

    def __post_init__(self):
        if len(self.stage_weights) != self.plan.n_stages:
            raise ValueError(
                f"{len(self.stage_weights)} stage weight tensors given "
                f"for a {self.plan.n_stages}-stage plan"
            )
        for w, (kh, kw, _, _) in zip(self.stage_weights, self.plan.stages):
            if w.shape[1:] != (kh, kw):
                raise ValueError(f"stage weight shape {w.shape} does not match kernel {(kh, kw)}")

    @classmethod
    def create(
        cls,
        n_channels: int,
        dims: Tuple[int, int],
        rng: Rng,
        *,
        jitter: float = DEFAULT_JITTER,
        affine: bool = True,
        weighted_var: bool = False,
    ) -> "DWCKNormState":
        plan = plan_dwck(*dims)
        weights = init_dwck(plan, dims, rng, jitter, n_channels=n_channels)
        gamma, beta = _affine_params(n_channels) if affine else (None, None)
        return cls(
            plan,
            [Tensor(w, requires_grad=True) for w in weights],
            gamma,
            beta,
            *_running_stats(n_channels),
            weighted_var=weighted_var,
        )

    @property
    def n_channels(self) -> int:
        return self.stage_weights[0].shape[0]

    def parameters(self) -> Dict[str, Tensor]:
        params = {f"stage{i}": w for i, w in enumerate(self.stage_weights)}
        if self.gamma is not None and self.beta is not None:
            params.update(gamma=self.gamma, beta=self.beta)
        return params

    def buffers(self) -> Dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


def _collapse(x: Tensor, s: DWCKNormState) -> Tensor:
    """Zero-pad to the plan and run the stage stack, giving shape (N, C, 1, 1)."""
    _check_channels(x, s.n_channels, "DWCK norm")
    h = pad2d(x, s.plan.padding(*x.shape[2:]))
    for w, (_, _, sh, sw) in zip(s.stage_weights, s.plan.stages):
        h = depthwise_conv2d(h, w, stride=(sh, sw))
    assert h.shape[2:] == (1, 1)
    return h


def dwck_mean(x: Tensor, s: DWCKNormState) -> Tensor:
    """Per-channel weighted mean, averaged over the batch. Shape (C,)."""
    return _collapse(x, s).mean(axis=0).reshape(s.n_channels)


def weighted_var(x: Tensor, s: DWCKNormState, mu: Tensor) -> Tensor:
    """Per-channel variance with the same stage-stack weights around `mu`. Shape (C,)."""
    c = s.n_channels
    d2 = (x - mu.reshape(1, c, 1, 1)) ** 2
    return _collapse(d2, s).mean(axis=0).reshape(c)


def dwck_norm_forward(x: Tensor, s: DWCKNormState, training: bool) -> Tensor:
    """Normalize with the DWCK weighted mean.

    The variance is the plain mean of squared deviations around the weighted mean
    unless `s.weighted_var` is set.
    """
    _check_channels(x, s.n_channels, "DWCK norm")
    c = s.n_channels

    if training:
        mu = dwck_mean(x, s)
        if s.weighted_var:
            var = weighted_var(x, s, mu)
        else:
            var = ((x - mu.reshape(1, c, 1, 1)) ** 2).mean(axis=(0, 2, 3))
        _update_running(s.running_mean, mu.data, s.momentum)
        _update_running(s.running_var, var.data, s.momentum)
    else:
        mu = Tensor(s.running_mean)
        var = Tensor(s.running_var)

    y = (x - mu.reshape(1, c, 1, 1)) / sqrt(var.reshape(1, c, 1, 1) + s.eps)
    return _affine(y, s.gamma, s.beta)


def project_nonneg(s: DWCKNormState) -> None:
    """Clip every stage weight at zero (in place)."""
    for w in s.stage_weights:
        np.maximum(w.data, 0, out=w.data)


def effective_kernel(s: DWCKNormState) -> np.ndarray:
    """Unroll the stage stack into one ``(C, H', W')`` kernel over the padded image.

    Each entry is the product of the stage weights covering that pixel.
    """
    c = s.n_channels
    eff = np.ones((c, 1, 1))
    # Last stage is the coarsest grid; each earlier stage refines every cell
    for w in reversed(s.stage_weights):
        a, b = eff.shape[1:]
        _, kh, kw = w.shape
        eff = np.einsum("cab,cij->caibj", eff, w.data).reshape(c, a * kh, b * kw)
    return eff


def weight_sum_drift(s: DWCKNormState) -> float:
    """Max over channels of ``|sum of effective weights on the real image - 1|``."""
    h, w = s.plan.dims
    top, _, left, _ = s.plan.padding(h, w)
    eff = effective_kernel(s)[:, top : top + h, left : left + w]
    return float(np.max(np.abs(eff.sum(axis=(1, 2)) - 1)))


#
# Learned statistics
#


@dataclass
class StatNet:
    """1-D convolution stack along the channel axis of the pooled feature vector."""

    weights: List[Tensor]
    """Per stage, shape (C_out, C_in, k)."""

    biases: List[Tensor]

    @classmethod
    def create(
        cls,
        channels: Sequence[int],
        kernel_sizes: Sequence[int],
        rng: Rng,
        *,
        output_bias: float = 0.0,
    ) -> "StatNet":
        """Glorot-uniform hidden stages. The final stage starts at zero weights and
        `output_bias`, so the net initially outputs `output_bias` for every input."""
        weights, biases = [], []
        c_in = 1
        last = len(channels) - 1
        for i, (c_out, k) in enumerate(zip(channels, kernel_sizes)):
            if i < last:
                bound = np.sqrt(6 / ((c_in + c_out) * k))
                w = rng.uniform(-bound, bound, size=(c_out, c_in, k))
                b = np.zeros(c_out)
            else:
                w = np.zeros((c_out, c_in, k))
                b = np.full(c_out, output_bias)
            weights.append(Tensor(w, requires_grad=True))
            biases.append(Tensor(b, requires_grad=True))
            c_in = c_out
        return cls(weights, biases)

    @property
    def kernel_sizes(self) -> List[int]:
        return [w.shape[2] for w in self.weights]

    @property
    def channels(self) -> List[int]:
        return [w.shape[0] for w in self.weights]

    def parameters(self) -> Dict[str, Tensor]:
        params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"w{i}"] = w
            params[f"b{i}"] = b
        return params

    def __call__(self, v: Tensor) -> Tensor:
        """Map pooled vectors (N, C) to one statistic per feature map (N, C)."""
        n, c = v.shape
        h = v.reshape(n, 1, 1, c)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            c_out, c_in, k = w.shape
            # Same padding; the extra element of an even kernel goes on the right
            h = pad2d(h, (0, 0, (k - 1) // 2, k // 2))
            h = conv2d(h, w.reshape(c_out, c_in, 1, k), b)
            if i < last:
                h = relu(h)
        # Average pool across the last stage's channels
        return h.mean(axis=1).reshape(n, c)


@dataclass
class LearnedStatsState:
    """Normalization whose mean and std come from two small networks."""

    mean_net: StatNet
    std_net: StatNet
    gamma: Optional[Tensor]
    beta: Optional[Tensor]
    n_channels: int
    eps: float = EPS

    def parameters(self) -> Dict[str, Tensor]:
        params = {f"mean.{k}": v for k, v in self.mean_net.parameters().items()}
        params.update({f"std.{k}": v for k, v in self.std_net.parameters().items()})
        if self.gamma is not None and self.beta is not None:
            params.update(gamma=self.gamma, beta=self.beta)
        return params

    def buffers(self) -> Dict[str, np.ndarray]:
        return {}


def stat_net_architecture(layer_index: int) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    """(channels, kernel sizes) of the statistic networks of a (1-based) layer."""
    if layer_index < 1:
        raise ValueError(f"layer_index must be >= 1, got {layer_index}")
    return STAT_NET_ARCHITECTURES["first" if layer_index == 1 else "rest"]


def stat_net_param_count(layer_index: int) -> int:
    """Closed-form parameter count of one statistic network."""
    channels, kernel_sizes = stat_net_architecture(layer_index)
    c_ins = (1,) + channels[:-1]
    return sum(ci * co * k + co for ci, co, k in zip(c_ins, channels, kernel_sizes))


def build_stat_nets(
    layer_index: int, n_channels: int, rng: Rng, *, affine: bool = True
) -> LearnedStatsState:
    """Independent mean and std networks for the given (1-based) layer.

    The final stages start at zero weights, with biases giving ``mu = 0`` and ``sigma = 1``,
    so a freshly built layer is the identity and the statistics are learned from there.
    """
    channels, kernel_sizes = stat_net_architecture(layer_index)
    mean_net = StatNet.create(channels, kernel_sizes, rng)
    std_net = StatNet.create(channels, kernel_sizes, rng, output_bias=_inv_softplus(1 - EPS))
    gamma, beta = _affine_params(n_channels) if affine else (None, None)
    return LearnedStatsState(mean_net, std_net, gamma, beta, n_channels)


def _inv_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


def learned_stats_forward(x: Tensor, s: LearnedStatsState, training: bool) -> Tensor:
    """Normalize each image by the statistics its pooled channel vector maps to.

    ``sigma = softplus(std_net(v)) + eps`` is strictly positive.
    The layer has no running statistics; `training` does not change the result.
    """
    _check_channels(x, s.n_channels, "learned-statistics norm")
    n, c = x.shape[:2]

    v = global_avg_pool(x).reshape(n, c)
    mu = s.mean_net(v).reshape(n, c, 1, 1)
    sigma = (softplus(s.std_net(v)) + s.eps).reshape(n, c, 1, 1)

    return _affine((x - mu) / sigma, s.gamma, s.beta)
