"""Minimal dense-tensor engine with reverse-mode gradients.

Covers exactly the operations the patch autoencoder needs: strided 2-d
convolution and its transpose, a fully connected layer, LeakyReLU, the two
reconstruction losses, plus the Adam update. Arrays are numpy, row-major,
float32 by default; float64 inputs are honoured so reference computations
can run at higher precision.

Tensors are immutable from the caller's perspective: every operation
returns a fresh tensor and records how to push gradients back to its
inputs. Gradient bookkeeping lives in a per-call dictionary, so concurrent
forward passes over shared parameters are safe.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError, ShapeError

logger = logging.getLogger(__name__)

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (scoring, validation)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return np.ascontiguousarray(arr, dtype=dtype)
    if arr.dtype in (np.float32, np.float64):
        return np.ascontiguousarray(arr)
    return np.ascontiguousarray(arr, dtype=np.float32)


class Tensor:
    """Dense n-d array plus the bookkeeping needed for reverse mode.

    `_backward(grad_out)` returns one gradient array per parent (or None
    for parents that need no gradient); `backward_pass` threads these
    through the graph in reverse topological order.
    """

    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward=None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


def _node(data, parents, backward) -> Tensor:
    """Wrap an op result, recording the graph only when gradients can flow."""
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    else:
        out = Tensor(data)
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise / dense ops


def leaky_relu(x: Tensor, negative_slope: float = 0.01) -> Tensor:
    """Elementwise max(x, negative_slope * x) with slope in (0, 1)."""
    if not 0.0 < negative_slope < 1.0:
        raise ConfigError(f"leaky_relu: negative_slope must be in (0,1), got {negative_slope}")
    mask = x.data >= 0
    out = np.where(mask, x.data, x.data * x.dtype.type(negative_slope))

    def backward(grad):
        return (np.where(mask, grad, grad * x.dtype.type(negative_slope)),)

    return _node(out, (x,), backward)


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map weights @ x + bias; accepts a leading batch axis on x."""
    if weights.ndim != 2 or bias.ndim != 1:
        raise ShapeError(f"dense: weights must be 2-d and bias 1-d, got {weights.shape}, {bias.shape}")
    m, n = weights.shape
    if bias.shape[0] != m:
        raise ShapeError(f"dense: bias length {bias.shape[0]} != output size {m}")
    if x.ndim not in (1, 2) or x.shape[-1] != n:
        raise ShapeError(f"dense: input {x.shape} does not conform to weights {weights.shape}")
    batched = x.ndim == 2
    x2 = x.data if batched else x.data[None, :]
    out2 = x2 @ weights.data.T + bias.data
    out = out2 if batched else out2[0]

    def backward(grad):
        g2 = grad if batched else grad[None, :]
        dx2 = g2 @ weights.data
        dw = g2.T @ x2
        db = g2.sum(axis=0)
        return (dx2 if batched else dx2[0], dw, db)

    return _node(out, (x, weights, bias), backward)


def reshape(x: Tensor, shape) -> Tensor:
    """View-style reshape; gradient reshapes back."""
    old_shape = x.shape
    out = x.data.reshape(shape)

    def backward(grad):
        return (grad.reshape(old_shape),)

    return _node(out, (x,), backward)


def mse_loss(prediction: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    _check_same_shape(prediction, target, "mse_loss")
    diff = prediction.data - target.data
    out = np.mean(diff * diff)

    def backward(grad):
        scale = grad * 2.0 / diff.size
        return (scale * diff, -scale * diff)

    return _node(out, (prediction, target), backward)


def mae(prediction: Tensor, target: Tensor) -> Tensor:
    """Mean absolute elementwise difference (the patch anomaly score)."""
    _check_same_shape(prediction, target, "mae")
    diff = prediction.data - target.data
    out = np.mean(np.abs(diff))

    def backward(grad):
        g = grad * np.sign(diff) / diff.size
        return (g, -g)

    return _node(out, (prediction, target), backward)


# ---------------------------------------------------------------------------
# convolution

# im2col/col2im turn the strided convolutions into single BLAS matmuls,
# which is what makes CPU training viable.


def _im2col(x_padded: np.ndarray, kh: int, kw: int, stride: int):
    n, c, hp, wp = x_padded.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = sliding_window_view(x_padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(cols: np.ndarray, n: int, c: int, hp: int, wp: int,
            ho: int, wo: int, kh: int, kw: int, stride: int) -> np.ndarray:
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols6[:, :, :, :, i, j]
    return out


def _conv_args(x: Tensor, kernels: Tensor, bias: Tensor, stride: int, padding: int, op: str):
    if kernels.ndim != 4:
        raise ShapeError(f"{op}: kernels must be 4-d, got {kernels.shape}")
    if bias.ndim != 1:
        raise ShapeError(f"{op}: bias must be 1-d, got {bias.shape}")
    if stride not in (1, 2):
        raise ConfigError(f"{op}: stride must be 1 or 2, got {stride}")
    if padding < 0:
        raise ConfigError(f"{op}: padding must be non-negative, got {padding}")
    if x.ndim == 3:
        return x.data[None], False
    if x.ndim == 4:
        return x.data, True
    raise ShapeError(f"{op}: input must be (C,H,W) or (N,C,H,W), got {x.shape}")


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x with kernels (out_channels, in_channels, kh, kw).

    Output extent is floor((H + 2*padding - kh)/stride) + 1 per axis.
    """
    x4, batched = _conv_args(x, kernels, bias, stride, padding, "conv2d")
    c_out, c_in, kh, kw = kernels.shape
    n, c, h, w = x4.shape
    if c != c_in:
        raise ShapeError(f"conv2d: input has {c} channels but kernels expect {c_in}")
    if bias.shape[0] != c_out:
        raise ShapeError(f"conv2d: bias length {bias.shape[0]} != out channels {c_out}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: spatial input {h}x{w} too small for kernel with padding {padding}")

    xp = np.pad(x4, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x4
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = kernels.data.reshape(c_out, c_in * kh * kw)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out if batched else out[0])

    def backward(grad):
        g4 = grad if batched else grad[None]
        gmat = np.ascontiguousarray(g4.transpose(0, 2, 3, 1)).reshape(n * ho * wo, c_out)
        dw = (gmat.T @ cols).reshape(kernels.shape)
        db = gmat.sum(axis=0)
        dcols = gmat @ wmat
        dxp = _col2im(dcols, n, c_in, xp.shape[2], xp.shape[3], ho, wo, kh, kw, stride)
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return (dx if batched else dx[0], dw, db)

    return _node(out, (x, kernels, bias), backward)


def conv2d_transpose(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1,
                     padding: int = 0, output_adjust: int | None = None) -> Tensor:
    """Adjoint of conv2d; kernels are (in_channels, out_channels, kh, kw).

    Output extent is (H-1)*stride - 2*padding + kh + output_adjust, with
    output_adjust defaulting to stride-1 so stride-2 layers exactly double
    even extents (4 -> 8 -> ... -> 64).
    """
    x4, batched = _conv_args(x, kernels, bias, stride, padding, "conv2d_transpose")
    c_in, c_out, kh, kw = kernels.shape
    n, c, h, w = x4.shape
    if c != c_in:
        raise ShapeError(f"conv2d_transpose: input has {c} channels but kernels expect {c_in}")
    if bias.shape[0] != c_out:
        raise ShapeError(f"conv2d_transpose: bias length {bias.shape[0]} != out channels {c_out}")
    adjust = stride - 1 if output_adjust is None else output_adjust
    if not 0 <= adjust < stride:
        raise ConfigError(f"conv2d_transpose: output_adjust must be in [0, stride), got {adjust}")
    ho = (h - 1) * stride - 2 * padding + kh + adjust
    wo = (w - 1) * stride - 2 * padding + kw + adjust
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d_transpose: non-positive output extent {ho}x{wo}")

    # Scatter each input pixel through the kernel: the exact adjoint of the
    # im2col convolution with identical stride and padding.
    xmat = np.ascontiguousarray(x4.transpose(0, 2, 3, 1)).reshape(n * h * w, c_in)
    kmat = kernels.data.reshape(c_in, c_out * kh * kw)
    cols = xmat @ kmat
    padded = _col2im(cols, n, c_out, ho + 2 * padding, wo + 2 * padding, h, w, kh, kw, stride)
    out = padded[:, :, padding:padding + ho, padding:padding + wo] if padding else padded
    out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out if batched else out[0])

    def backward(grad):
        g4 = grad if batched else grad[None]
        gp = np.pad(g4, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g4
        gcols, gho, gwo = _im2col(gp, kh, kw, stride)
        dx = (gcols @ kmat.T).reshape(n, h, w, c_in).transpose(0, 3, 1, 2)
        dx = np.ascontiguousarray(dx)
        dk = (xmat.T @ gcols).reshape(kernels.shape)
        db = g4.sum(axis=(0, 2, 3))
        return (dx if batched else dx[0], dk, db)

    return _node(out, (x, kernels, bias), backward)


# ---------------------------------------------------------------------------
# reverse-mode accumulation


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def gradients(loss: Tensor, parameters) -> dict:
    """Reverse-mode gradients of a scalar loss for each requested parameter.

    Parameters the loss does not depend on get a zero gradient plus a
    diagnostic log line. Returns {parameter: gradient tensor}.
    """
    if loss.size != 1:
        raise ShapeError(f"gradients: loss must be scalar, got shape {loss.shape}")
    params = list(parameters)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        if node._backward is None:
            continue  # leaf: keep any accumulated entry for lookup below
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        for parent, pgrad in zip(node._parents, node._backward(grad)):
            if pgrad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pgrad
            else:
                grads[key] = pgrad
    result: dict[Tensor, Tensor] = {}
    for p in params:
        g = grads.get(id(p))
        if g is None:
            logger.warning("gradients: %r unreachable from the loss; zero gradient", p)
            g = np.zeros_like(p.data)
        result[p] = Tensor(np.ascontiguousarray(g, dtype=p.data.dtype))
    return result


# ---------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class AdamState:
    """Per-parameter Adam accumulators; step counts completed updates."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epsilon <= 0:
            raise ConfigError("AdamState: learning_rate and epsilon must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("AdamState: betas must lie in [0,1)")
        if self.step < 0:
            raise ConfigError("AdamState: step must be non-negative")
        if self.first_moment.shape != self.second_moment.shape:
            raise ShapeError("AdamState: moment shapes disagree")

    @classmethod
    def initial(cls, parameter: "Tensor | np.ndarray", learning_rate: float = 1e-3,
                beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        data = parameter.data if isinstance(parameter, Tensor) else np.asarray(parameter)
        zeros = np.zeros_like(data)
        return cls(zeros, zeros.copy(), 0, learning_rate, beta1, beta2, epsilon)

    def with_learning_rate(self, learning_rate: float) -> "AdamState":
        return replace(self, learning_rate=learning_rate)


def adam_step(parameter: Tensor, gradient: Tensor, state: AdamState) -> tuple[Tensor, AdamState]:
    """One bias-corrected Adam update; pure in all three arguments."""
    p = parameter.data
    g = gradient.data
    if p.shape != g.shape or p.shape != state.first_moment.shape:
        raise ShapeError(f"adam_step: parameter {p.shape}, gradient {g.shape}, "
                         f"state {state.first_moment.shape} must shape-match")
    if not np.all(np.isfinite(g)):
        raise NumericError("adam_step: non-finite gradient, update rejected")
    t = state.step + 1
    dt = p.dtype.type
    m = state.beta1 * state.first_moment + dt(1 - state.beta1) * g
    v = state.beta2 * state.second_moment + dt(1 - state.beta2) * (g * g)
    m_hat = m / dt(1 - state.beta1 ** t)
    v_hat = v / dt(1 - state.beta2 ** t)
    new_p = p - dt(state.learning_rate) * m_hat / (np.sqrt(v_hat) + dt(state.epsilon))
    new_state = replace(state, first_moment=m, second_moment=v, step=t)
    return Tensor(new_p, requires_grad=parameter.requires_grad, name=parameter.name), new_state
