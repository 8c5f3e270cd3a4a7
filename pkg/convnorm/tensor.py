"""
Tensors with reverse-mode automatic differentiation
"""

import contextlib
from typing import Callable, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

Rng = np.random.Generator
"""Deterministic stream of random numbers, identical for identical seeds."""

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

_DEFAULT_DTYPE = np.dtype(np.float32)

LOG_FLOOR = 1e-12
"""Probabilities are clamped to at least this inside `cross_entropy`."""


def make_rng(seed: int) -> Rng:
    """Random number generator for a 64-bit seed."""
    return np.random.default_rng(seed)


def default_dtype() -> np.dtype:
    """Current floating point dtype used for new tensors."""
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype of new tensors, e.g. ``np.float64`` for gradient checks."""
    global _DEFAULT_DTYPE

    old = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


class Tensor:
    """Real array taking part in the gradient tape.

    Activations use batch-channel-height-width (NCHW) layout.
    """

    def __init__(
        self,
        data: ArrayLike,
        *,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype=None,
    ):
        """
        Parameters
        ----------
        data
            Values. Cast to the current default dtype unless `dtype` is given.
        requires_grad
            Whether backward passes should populate `grad`.
        name
            Optional label, used in error messages.
        """
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.asarray(data, dtype=_DEFAULT_DTYPE if dtype is None else dtype)

        self.requires_grad = requires_grad
        self.name = name

        self.grad: Optional[np.ndarray] = np.zeros_like(self.data) if requires_grad else None
        """Gradient of the last backward pass' loss, same shape as `data`."""

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        """Backpropagate from this scalar through the active tape."""
        get_tape().backward(self)

    def __repr__(self):
        extra = f", name={self.name!r}" if self.name is not None else ""
        return f"{type(self).__name__}(shape={self.shape}, dtype={self.dtype}{extra})"

    # Arithmetic

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


class _Node(NamedTuple):
    out: Tensor
    parents: Tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of differentiable operations.

    Operations are appended as they are executed, so the list is in topological order.
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self.enabled = True

    def __len__(self):
        return len(self.nodes)

    def record(self, out: Tensor, parents: Tuple[Tensor, ...], backward) -> None:
        self.nodes.append(_Node(out, parents, backward))

    def reset(self) -> None:
        """Forget all recorded operations."""
        self.nodes = []

    def backward(self, loss: Tensor, *, retain: bool = False) -> None:
        """Populate `grad` of every tensor that `loss` depends on and that requires it.

        Gradients are added to the existing `grad` arrays (zero them between steps).
        Unless `retain` is set, the tape is reset afterwards.
        """
        if loss.data.size != 1 or loss.ndim > 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        tensors: Dict[int, Tensor] = {id(loss): loss}

        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            _accumulate(node.out, g)
            for p, pg in zip(node.parents, node.backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                tensors[key] = p
                grads[key] = grads[key] + pg if key in grads else pg

        # Whatever remains was not produced on the tape (leaves)
        for key, g in grads.items():
            t = tensors[key]
            if t.requires_grad:
                _accumulate(t, g)

        if not retain:
            self.reset()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


_TAPE = Tape()


def get_tape() -> Tape:
    """The process-wide tape. Single-threaded by contract."""
    return _TAPE


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording, e.g. for evaluation and finite differences."""
    old = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = old


def as_tensor(x: ArrayLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _TAPE.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _TAPE.record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# Elementwise


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / b.data**2, b.shape),
        )

    return _make(a.data / b.data, (a, b), backward)


def power(a: ArrayLike, p: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * p * a.data ** (p - 1),)

    return _make(a.data**p, (a,), backward)


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)

    def backward(g):
        return (g / (2 * y),)

    return _make(y, (a,), backward)


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)

    def backward(g):
        return (g * y,)

    return _make(y, (a,), backward)


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), backward)


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), backward)


def softplus(x: ArrayLike) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    x = as_tensor(x)

    def backward(g):
        return (g * expit(x.data),)

    return _make(np.logaddexp(0, x.data).astype(x.dtype), (x,), backward)


# Reductions and shape


def _expand(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (_expand(g, x.shape, axis, keepdims),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size // np.asarray(x.data.sum(axis=axis, keepdims=keepdims)).size

    def backward(g):
        return (_expand(g, x.shape, axis, keepdims) / count,)

    return _make(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), backward)


def reshape(x: ArrayLike, shape) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), backward)


def pad2d(x: Tensor, pad: Tuple[int, int, int, int]) -> Tensor:
    """Zero-pad height and width by ``(top, bottom, left, right)``."""
    _check_rank4(x, "pad2d")
    top, bottom, left, right = pad
    if min(pad) < 0:
        raise ValueError(f"padding must be non-negative, got {pad}")
    if not any(pad):
        return x
    h, w = x.shape[2:]

    def backward(g):
        return (g[:, :, top : top + h, left : left + w],)

    y = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    return _make(y, (x,), backward)


# Convolution and pooling


def _check_rank4(x: Tensor, op: str) -> None:
    if x.ndim != 4 or min(x.shape) < 1:
        raise ValueError(f"{op} expects a rank-4 (N, C, H, W) tensor, got shape {x.shape}")


def _out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, oh: int, ow: int) -> np.ndarray:
    """Strided sliding-window view with shape (N, C, OH, OW, kh, kw)."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (oh - 1) * sh + 1 : sh, : (ow - 1) * sw + 1 : sw]


def _scatter_windows(dwin: np.ndarray, shape, sh: int, sw: int) -> np.ndarray:
    """Adjoint of `_windows`: add each window's gradient back onto the input grid."""
    _, _, oh, ow, kh, kw = dwin.shape
    dx = np.zeros(shape, dtype=dwin.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + (oh - 1) * sh + 1 : sh, j : j + (ow - 1) * sw + 1 : sw] += dwin[
                ..., i, j
            ]
    return dx


def conv2d(
    x: Tensor,
    k: Tensor,
    b: Optional[Tensor] = None,
    stride: Tuple[int, int] = (1, 1),
    padding: Tuple[int, int] = (0, 0),
) -> Tensor:
    """2-D cross-correlation (no kernel flip).

    Parameters
    ----------
    x
        Input, shape (N, C_in, H, W).
    k
        Kernel, shape (C_out, C_in, k_h, k_w).
    b
        Optional bias, shape (C_out,).
    """
    _check_rank4(x, "conv2d")
    if k.ndim != 4 or k.shape[1] != x.shape[1]:
        raise ValueError(
            f"conv2d kernel shape {k.shape} does not match input shape {x.shape} "
            "(expected (C_out, C_in, k_h, k_w) with C_in equal to the input channels)"
        )
    if b is not None and b.shape != (k.shape[0],):
        raise ValueError(f"conv2d bias shape {b.shape} does not match kernel shape {k.shape}")

    n, c, h, w = x.shape
    c_out, _, kh, kw = k.shape
    sh, sw = stride
    ph, pw = padding
    oh, ow = _out_size(h, kh, sh, ph), _out_size(w, kw, sw, pw)
    if oh < 1 or ow < 1:
        raise ValueError(
            f"conv2d kernel shape {k.shape} with stride {stride} and padding {padding} "
            f"does not fit input shape {x.shape}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    win = _windows(xp, kh, kw, sh, sw, oh, ow)
    y = np.tensordot(win, k.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        y = y + b.data[:, None, None]
    y = np.ascontiguousarray(y)

    def backward(g):
        dwin = np.tensordot(g, k.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        dx = _scatter_windows(dwin, xp.shape, sh, sw)[:, :, ph : ph + h, pw : pw + w]
        dk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if b is None:
            return dx, dk
        return dx, dk, g.sum(axis=(0, 2, 3))

    parents = (x, k) if b is None else (x, k, b)
    return _make(y, parents, backward)


def depthwise_conv2d(x: Tensor, k: Tensor, stride: Tuple[int, int] = (1, 1)) -> Tensor:
    """Convolve each channel with its own kernel, no cross-channel mixing.

    Parameters
    ----------
    k
        Per-channel kernels, shape (C, k_h, k_w).
    """
    _check_rank4(x, "depthwise_conv2d")
    if k.ndim != 3 or k.shape[0] != x.shape[1]:
        raise ValueError(
            f"depthwise_conv2d kernel shape {k.shape} does not match input shape {x.shape} "
            "(expected (C, k_h, k_w) with C equal to the input channels)"
        )

    _, _, h, w = x.shape
    _, kh, kw = k.shape
    sh, sw = stride
    oh, ow = _out_size(h, kh, sh, 0), _out_size(w, kw, sw, 0)
    if oh < 1 or ow < 1:
        raise ValueError(f"depthwise_conv2d kernel shape {k.shape} does not fit input {x.shape}")

    win = _windows(x.data, kh, kw, sh, sw, oh, ow)
    y = np.einsum("nchwij,cij->nchw", win, k.data)

    def backward(g):
        dwin = g[..., None, None] * k.data[None, :, None, None]
        dx = _scatter_windows(dwin, x.shape, sh, sw)
        dk = np.einsum("nchw,nchwij->cij", g, win)
        return dx, dk

    return _make(y, (x, k), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean of each feature map, shape (N, C, 1, 1)."""
    _check_rank4(x, "global_avg_pool")
    return mean(x, axis=(2, 3), keepdims=True)


def avg_pool(
    x: Tensor, window: Tuple[int, int], stride: Optional[Tuple[int, int]] = None
) -> Tensor:
    """Arithmetic mean over sliding windows (stride defaults to the window)."""
    _check_rank4(x, "avg_pool")
    kh, kw = window
    sh, sw = window if stride is None else stride
    h, w = x.shape[2:]
    if kh > h or kw > w:
        raise ValueError(f"avg_pool window {window} is larger than the input {(h, w)}")

    oh, ow = _out_size(h, kh, sh, 0), _out_size(w, kw, sw, 0)
    win = _windows(x.data, kh, kw, sh, sw, oh, ow)
    y = win.mean(axis=(-2, -1))

    def backward(g):
        dwin = np.broadcast_to((g / (kh * kw))[..., None, None], win.shape)
        return (_scatter_windows(dwin, x.shape, sh, sw),)

    return _make(y, (x,), backward)


# Classification head


def softmax(x: ArrayLike) -> Tensor:
    """Softmax over the last axis, with per-row max subtraction."""
    x = as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward)


def cross_entropy(probs: Tensor, onehot: ArrayLike) -> Tensor:
    """Categorical cross-entropy, averaged over the batch (rows)."""
    t = onehot.data if isinstance(onehot, Tensor) else np.asarray(onehot)
    if t.shape != probs.shape:
        raise ValueError(f"one-hot shape {t.shape} does not match probabilities {probs.shape}")
    row_sums = t.sum(axis=-1)
    if not np.allclose(row_sums, 1):
        bad = int(np.argmax(np.abs(row_sums - 1)))
        raise ValueError(f"one-hot row {bad} sums to {row_sums[bad]}, not 1")

    n = probs.shape[0] if probs.ndim > 1 else 1
    p = np.maximum(probs.data, LOG_FLOOR)
    loss = -(t * np.log(p)).sum() / n

    def backward(g):
        return (g * np.where(probs.data >= LOG_FLOOR, -t / p, 0) / n,)

    return _make(np.asarray(loss, dtype=probs.dtype), (probs,), backward)


# Verification


def grad_check(f: Callable[[Tensor], Tensor], x: ArrayLike, eps: float = 1e-6) -> float:
    """Compare the tape gradient of scalar `f` at `x` with central differences.

    Runs in 64-bit precision. Returns the max over elements of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    with precision(np.float64):
        x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

        tape = get_tape()
        tape.reset()
        leaf = Tensor(x0, requires_grad=True)
        out = f(leaf)
        if not np.all(np.isfinite(out.data)):
            raise FloatingPointError(f"non-finite output {out.data} of the checked function")
        tape.backward(out)
        assert leaf.grad is not None
        analytic = leaf.grad
        _raise_non_finite(analytic, "analytic gradient")

        numeric = np.empty_like(x0)
        with no_grad():
            for idx in np.ndindex(x0.shape):
                xp = x0.copy()
                xp[idx] += eps
                xm = x0.copy()
                xm[idx] -= eps
                fp, fm = f(Tensor(xp)).item(), f(Tensor(xm)).item()
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise FloatingPointError(f"non-finite function value perturbing element {idx}")
                numeric[idx] = (fp - fm) / (2 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0


def _raise_non_finite(a: np.ndarray, what: str) -> None:
    bad = np.argwhere(~np.isfinite(a))
    if bad.size:
        raise FloatingPointError(f"non-finite {what} at element {tuple(bad[0])}")
