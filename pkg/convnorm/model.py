"""
ALL-CNN-C classifier with pluggable normalization
"""

import enum
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .normalization import (
    DEFAULT_JITTER,
    BatchNormState,
    DWCKNormState,
    LearnedStatsState,
    batch_norm_forward,
    build_stat_nets,
    dwck_norm_forward,
    learned_stats_forward,
    plan_dwck,
    stat_net_param_count,
    weight_sum_drift,
)
from .tensor import Rng, Tensor, conv2d, global_avg_pool, no_grad, relu, softmax

NormState = Union[BatchNormState, DWCKNormState, LearnedStatsState]


class NormKind(enum.Enum):
    """Normalization applied after each hidden convolution."""

    NONE = "none"
    BATCH = "batch"
    DWCK = "dwck"
    LEARNED = "learned"

    @classmethod
    def from_name(cls, name: Union[str, "NormKind"]) -> "NormKind":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise ValueError(f"invalid norm kind {name!r}. Valid options are: {valid}.") from None

    @property
    def code(self) -> int:
        """Small integer used in checkpoints."""
        return list(type(self)).index(self)

    @classmethod
    def from_code(cls, code: int) -> "NormKind":
        kinds = list(cls)
        if not 0 <= code < len(kinds):
            raise ValueError(f"invalid norm kind code {code}. Valid codes are 0--{len(kinds) - 1}.")
        return kinds[code]


HIDDEN_LAYERS: Tuple[Tuple[int, int, int, int], ...] = (
    (96, 3, 1, 1),
    (96, 3, 1, 1),
    (96, 3, 2, 1),
    (192, 3, 1, 1),
    (192, 3, 1, 1),
    (192, 3, 2, 1),
    (192, 3, 1, 1),
    (192, 1, 1, 0),
)
"""(filters at full width, kernel size, stride, padding) of the ReLU + normalization layers."""


@dataclass
class ClassifierConfig:
    norm: NormKind = NormKind.NONE
    width_scale: float = 1.0
    input_dims: Tuple[int, int, int] = (3, 32, 32)
    n_classes: int = 10
    jitter: float = DEFAULT_JITTER
    """DWCK initialization jitter."""
    affine: bool = True
    """Per-channel gamma/beta after DWCK and learned-statistics normalization."""
    weighted_var: bool = False

    def __post_init__(self):
        self.norm = NormKind.from_name(self.norm)
        self.input_dims = tuple(int(d) for d in self.input_dims)  # type: ignore[assignment]

        if not 0 < self.width_scale <= 1:
            raise ValueError(f"width_scale must be in (0, 1], got {self.width_scale}")
        if len(self.input_dims) != 3 or self.input_dims[0] < 1:
            raise ValueError(f"input_dims must be (C, H, W) with C >= 1, got {self.input_dims}")
        if min(self.input_dims[1:]) < 8:
            raise ValueError(
                f"spatial input dims {self.input_dims[1:]} too small for the two strided "
                "convolutions, need at least 8x8"
            )
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if not 0 <= self.jitter < 0.5:
            raise ValueError(f"jitter must be in [0, 0.5), got {self.jitter}")

    def channels(self, full_width: int) -> int:
        return max(1, int(np.floor(full_width * self.width_scale)))

    def layer_shapes(self) -> List[Tuple[int, int, int]]:
        """(channels, height, width) output by each hidden layer."""
        _, h, w = self.input_dims
        shapes = []
        for filters, k, s, p in HIDDEN_LAYERS:
            h = (h + 2 * p - k) // s + 1
            w = (w + 2 * p - k) // s + 1
            shapes.append((self.channels(filters), h, w))
        return shapes


@dataclass
class ConvLayer:
    weight: Tensor
    bias: Tensor
    stride: int
    padding: int
    activation: bool = True
    norm: Optional[NormState] = None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        s, p = self.stride, self.padding
        y = conv2d(x, self.weight, self.bias, stride=(s, s), padding=(p, p))
        if self.activation:
            y = relu(y)
        if self.norm is not None:
            y = normalize(y, self.norm, training)
        return y


def normalize(x: Tensor, state: NormState, training: bool) -> Tensor:
    """Dispatch to the forward function of the state's normalization kind."""
    if isinstance(state, BatchNormState):
        return batch_norm_forward(x, state, training)
    elif isinstance(state, DWCKNormState):
        return dwck_norm_forward(x, state, training)
    elif isinstance(state, LearnedStatsState):
        return learned_stats_forward(x, state, training)
    else:
        raise AssertionError("shouldn't reach here")


class Model:
    """ALL-CNN-C: eight ReLU conv layers (each followed by the normalization),
    a 1x1 class conv, global average pooling and softmax."""

    def __init__(self, cfg: ClassifierConfig, layers: List[ConvLayer]):
        self.cfg = cfg
        self.layers = layers

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return forward(self, x, training)

    def __repr__(self):
        return (
            f"{type(self).__name__}(norm={self.cfg.norm.value}, "
            f"width_scale={self.cfg.width_scale}, n_parameters={self.n_parameters})"
        )

    @property
    def norm_states(self) -> List[NormState]:
        return [layer.norm for layer in self.layers if layer.norm is not None]

    @property
    def dwck_states(self) -> List[DWCKNormState]:
        return [s for s in self.norm_states if isinstance(s, DWCKNormState)]

    def named_parameters(self) -> Dict[str, Tensor]:
        params = {}
        for i, layer in enumerate(self.layers, start=1):
            params[f"conv{i}.weight"] = layer.weight
            params[f"conv{i}.bias"] = layer.bias
            if layer.norm is not None:
                params.update({f"norm{i}.{k}": v for k, v in layer.norm.parameters().items()})
        for name, p in params.items():
            p.name = name
        return params

    def named_buffers(self) -> Dict[str, np.ndarray]:
        buffers = {}
        for i, layer in enumerate(self.layers, start=1):
            if layer.norm is not None:
                buffers.update({f"norm{i}.{k}": v for k, v in layer.norm.buffers().items()})
        return buffers

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    @property
    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def weight_sum_drift(self) -> float:
        """Largest DWCK weight-sum drift over the layers (0 without DWCK layers)."""
        return max((weight_sum_drift(s) for s in self.dwck_states), default=0.0)


RELU_GAIN = np.sqrt(2)
"""Init gain of the convolutions followed by a ReLU (keeps the activation scale with depth)."""


def _uniform_fan_in(rng: Rng, shape: Tuple[int, ...], gain: float) -> np.ndarray:
    """Uniform in ``±gain * sqrt(3 / fan_in)``, i.e. variance ``gain**2 / fan_in``."""
    _, c_in, kh, kw = shape
    bound = gain * np.sqrt(3 / (c_in * kh * kw))
    return rng.uniform(-bound, bound, size=shape)


def build_allcnn(cfg: ClassifierConfig, rng: Rng) -> Model:
    """Build the classifier.

    All convolution weights are drawn before any normalization state, so models that differ
    only in `cfg.norm` share their convolution weights for the same `rng` seed.
    """
    c_in = cfg.input_dims[0]
    convs = []
    for (filters, k, s, p), (c_out, _, _) in zip(HIDDEN_LAYERS, cfg.layer_shapes()):
        convs.append((c_in, c_out, k, s, p))
        c_in = c_out
    convs.append((c_in, cfg.n_classes, 1, 1, 0))

    layers = [
        ConvLayer(
            Tensor(
                _uniform_fan_in(rng, (co, ci, k, k), RELU_GAIN if i < len(convs) else 1.0),
                requires_grad=True,
            ),
            Tensor(np.zeros(co), requires_grad=True),
            stride=s,
            padding=p,
        )
        for i, (ci, co, k, s, p) in enumerate(convs, start=1)
    ]
    layers[-1].activation = False

    for i, (layer, (c, h, w)) in enumerate(zip(layers, cfg.layer_shapes()), start=1):
        layer.norm = _build_norm(cfg, i, c, (h, w), rng)

    return Model(cfg, layers)


def _build_norm(
    cfg: ClassifierConfig, layer_index: int, c: int, dims: Tuple[int, int], rng: Rng
) -> Optional[NormState]:
    if cfg.norm is NormKind.NONE:
        return None
    elif cfg.norm is NormKind.BATCH:
        return BatchNormState.create(c)
    elif cfg.norm is NormKind.DWCK:
        return DWCKNormState.create(
            c,
            dims,
            rng,
            jitter=cfg.jitter,
            affine=cfg.affine,
            weighted_var=cfg.weighted_var,
        )
    elif cfg.norm is NormKind.LEARNED:
        return build_stat_nets(layer_index, c, rng, affine=cfg.affine)
    else:
        raise AssertionError("shouldn't reach here")


def forward(model: Model, x: Tensor, training: bool) -> Tensor:
    """Class probabilities, shape (N, n_classes)."""
    if x.ndim != 4 or x.shape[1:] != model.cfg.input_dims:
        raise ValueError(
            f"input of shape {x.shape} does not match the model's input dims "
            f"{model.cfg.input_dims} (expected (N, C, H, W))"
        )
    h = x
    for layer in model.layers:
        h = layer(h, training)
    logits = global_avg_pool(h).reshape(x.shape[0], model.cfg.n_classes)
    return softmax(logits)


def argmax_classes(probs: Union[Tensor, np.ndarray]) -> np.ndarray:
    """Index of the largest probability per row, lowest index on ties."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return np.argmax(p, axis=-1)


def predict(model: Model, x: Tensor) -> np.ndarray:
    """Predicted class indices (eval mode)."""
    with no_grad():
        return argmax_classes(forward(model, x, training=False))


def dwck_param_count(plan) -> int:
    """Stage weights per channel of a DWCK plan."""
    return plan.n_weights


def norm_param_count(cfg: ClassifierConfig) -> int:
    """Closed-form number of normalization parameters (running statistics excluded)."""
    total = 0
    for i, (c, h, w) in enumerate(cfg.layer_shapes(), start=1):
        affine = 2 * c if cfg.affine else 0
        if cfg.norm is NormKind.NONE:
            pass
        elif cfg.norm is NormKind.BATCH:
            total += 2 * c
        elif cfg.norm is NormKind.DWCK:
            total += c * dwck_param_count(plan_dwck(h, w)) + affine
        elif cfg.norm is NormKind.LEARNED:
            total += 2 * stat_net_param_count(i) + affine
        else:
            raise AssertionError("shouldn't reach here")
    return total
