"""
SeqSample autodiff - a small reverse-mode differentiation engine over numpy arrays.

It carries exactly the operators the sampler, the reconstructor and the SSIM
loss need, together with parameter containers, checkpoint (de)serialization,
finite-difference gradient checking and the Adam optimizer.

Complex grids are carried as two real channels on axis -3 (real, imaginary),
so the tape only ever sees real arrays.
"""

import logging
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from errors import FormatError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SQSM"
CHECKPOINT_VERSION = 2
# adam.step is split across two float32 values, each below 2**24
STEP_SPLIT = 2 ** 24
# data range used for a ground truth whose maximum is not positive (blank images)
FALLBACK_DATA_RANGE = 1.0

_local = threading.local()


def _tape_stack() -> List["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    """Return the innermost tape of the calling thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """
    Records differentiable operations in execution order.

    A tape belongs to one thread and one training step. Operations executed
    while no tape is active compute values only.
    """

    def __init__(self):
        self.nodes: List["Node"] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _tape_stack().pop()
        return False

    def record(self, node: "Node") -> None:
        node.tape_id = len(self.nodes)
        self.nodes.append(node)

    def backward(self, loss: "Node") -> None:
        """
        Propagate d(loss)/d(node) to every recorded node and leaf.

        Args:
            loss: Scalar node recorded on this tape

        Raises:
            ShapeError: If loss is not a scalar
            ValueError: If loss was not recorded on this tape
        """
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {loss.shape}")
        tid = loss.tape_id
        if tid is None or tid >= len(self.nodes) or self.nodes[tid] is not loss:
            raise ValueError("loss was not recorded on this tape")
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes[: tid + 1]):
            if node.grad is not None:
                node._backward(node.grad)


class Node:
    """Differentiable value handle: a numpy array plus its gradient slot."""

    # numpy must defer mixed ndarray/Node arithmetic to Node's reflected operators
    __array_ufunc__ = None

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None):
        value = np.asarray(value)
        if not np.issubdtype(value.dtype, np.floating):
            value = value.astype(np.float64)
        self.value = value
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self.tape_id: Optional[int] = None
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value.reshape(()))

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Node{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)


Operand = Union[Node, np.ndarray, float, int]


def as_node(x: Operand, dtype=None) -> Node:
    """Wrap a constant as a non-differentiable node (nodes pass through)."""
    if isinstance(x, Node):
        return x
    value = np.asarray(x)
    if dtype is not None:
        value = value.astype(dtype)
    return Node(value)


def _lift_pair(a: Operand, b: Operand) -> Tuple[Node, Node]:
    if isinstance(a, Node) and not isinstance(b, Node):
        return a, as_node(b, a.dtype)
    if isinstance(b, Node) and not isinstance(a, Node):
        return as_node(a, b.dtype), b
    return as_node(a), as_node(b)


def _result(value: np.ndarray, op: str, parents: Sequence[Node],
            backward: Callable[[np.ndarray], None]) -> Node:
    value = np.asarray(value)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values (output shape {value.shape})")
    node = Node(value)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        node.requires_grad = True
        node._backward = backward
        tape.record(node)
    return node


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(node: Node, grad: np.ndarray) -> None:
    if not node.requires_grad:
        return
    grad = _unbroadcast(np.asarray(grad), node.shape).astype(node.dtype, copy=False)
    if node.grad is None:
        node.grad = np.array(grad, copy=True)
    else:
        node.grad = node.grad + grad


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Operand, b: Operand) -> Node:
    a, b = _lift_pair(a, b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.value + b.value, "add", (a, b), backward)


def sub(a: Operand, b: Operand) -> Node:
    a, b = _lift_pair(a, b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(a.value - b.value, "sub", (a, b), backward)


def mul(a: Operand, b: Operand) -> Node:
    a, b = _lift_pair(a, b)

    def backward(g):
        _accumulate(a, g * b.value)
        _accumulate(b, g * a.value)

    return _result(a.value * b.value, "mul", (a, b), backward)


def div(a: Operand, b: Operand) -> Node:
    a, b = _lift_pair(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = a.value / b.value

    def backward(g):
        _accumulate(a, g / b.value)
        _accumulate(b, -g * a.value / (b.value * b.value))

    return _result(value, "div", (a, b), backward)


def neg(x: Node) -> Node:
    def backward(g):
        _accumulate(x, -g)

    return _result(-x.value, "neg", (x,), backward)


def sqrt(x: Node) -> Node:
    with np.errstate(invalid="ignore"):
        value = np.sqrt(x.value)

    def backward(g):
        _accumulate(x, g * 0.5 / value)

    return _result(value, "sqrt", (x,), backward)


def log1p(x: Node) -> Node:
    with np.errstate(invalid="ignore", divide="ignore"):
        value = np.log1p(x.value)

    def backward(g):
        _accumulate(x, g / (1.0 + x.value))

    return _result(value, "log1p", (x,), backward)


def relu(x: Node) -> Node:
    active = x.value > 0

    def backward(g):
        _accumulate(x, g * active)

    return _result(np.where(active, x.value, 0).astype(x.dtype), "relu", (x,), backward)


def sigmoid(x: Node) -> Node:
    value = expit(x.value)

    def backward(g):
        _accumulate(x, g * value * (1.0 - value))

    return _result(value, "sigmoid", (x,), backward)


def softplus(x: Node) -> Node:
    """log(1 + e^x), whose derivative is sigmoid(x)."""
    value = np.logaddexp(0, x.value).astype(x.dtype)

    def backward(g):
        _accumulate(x, g * expit(x.value))

    return _result(value, "softplus", (x,), backward)


def straight_through(hard: np.ndarray, soft: Node) -> Node:
    """Forward value is ``hard``; the backward pass treats it as ``soft``."""
    hard = np.asarray(hard, dtype=soft.dtype)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: hard {hard.shape} vs soft {soft.shape}")

    def backward(g):
        _accumulate(soft, g)

    return _result(hard, "straight_through", (soft,), backward)


# ---------------------------------------------------------------------------
# Reductions and shape plumbing
# ---------------------------------------------------------------------------

def sum(x: Node, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    value = x.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(value, "sum", (x,), backward)


def mean(x: Node, axis=None, keepdims: bool = False) -> Node:
    count = x.value.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return sum(x, axis=axis, keepdims=keepdims) / float(count)


def max(x: Node, axis: int = -1) -> Node:  # noqa: A001
    """Maximum along one axis (kept as extent 1); ties route the gradient to the first index."""
    idx = np.expand_dims(np.argmax(x.value, axis=axis), axis)
    value = np.take_along_axis(x.value, idx, axis=axis)

    def backward(g):
        full = np.zeros_like(x.value)
        np.put_along_axis(full, idx, g, axis=axis)
        _accumulate(x, full)

    return _result(value, "max", (x,), backward)


def percentile(x: Node, q: float) -> Node:
    """
    Linear-interpolation percentile along the last axis (same values as
    ``np.percentile``); the gradient goes to the two bracketing order statistics.
    """
    size = x.shape[-1]
    position = (size - 1) * q / 100.0
    lo = int(np.floor(position))
    hi = min(lo + 1, size - 1)
    frac = position - lo
    order = np.argsort(x.value, axis=-1, kind="stable")
    idx_lo = order[..., lo:lo + 1]
    idx_hi = order[..., hi:hi + 1]
    v_lo = np.take_along_axis(x.value, idx_lo, axis=-1)
    v_hi = np.take_along_axis(x.value, idx_hi, axis=-1)
    value = (v_lo + frac * (v_hi - v_lo))[..., 0]

    def backward(g):
        full = np.zeros_like(x.value)
        np.put_along_axis(full, idx_lo, (1.0 - frac) * g[..., None], axis=-1)
        if hi != lo:
            upper = np.take_along_axis(full, idx_hi, axis=-1) + frac * g[..., None]
            np.put_along_axis(full, idx_hi, upper, axis=-1)
        _accumulate(x, full)

    return _result(value.astype(x.dtype), "percentile", (x,), backward)


def reshape(x: Node, shape: Sequence[int]) -> Node:
    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _result(x.value.reshape(shape), "reshape", (x,), backward)


def getitem(x: Node, index) -> Node:
    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def backward(g):
        full = np.zeros_like(x.value)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        _accumulate(x, full)

    return _result(x.value[index], "getitem", (x,), backward)


def concat(nodes: Sequence[Operand], axis: int = 1) -> Node:
    nodes = [as_node(n) for n in nodes]
    ref = nodes[0].shape
    for n in nodes[1:]:
        if n.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(n.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: cannot join {n.shape} with {ref} on axis {axis}")
    splits = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def backward(g):
        for n, part in zip(nodes, np.split(g, splits, axis=axis)):
            _accumulate(n, part)

    return _result(np.concatenate([n.value for n in nodes], axis=axis), "concat", nodes, backward)


def concat_channels(a: Node, b: Node) -> Node:
    """Stack two (B, C, H, W) maps along channels."""
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: spatial mismatch {a.shape} vs {b.shape}")
    return concat([a, b], axis=1)


# ---------------------------------------------------------------------------
# Network layers
# ---------------------------------------------------------------------------

def linear(x: Node, W: Node, b: Node) -> Node:
    """y = xW + b for x of shape (in,) or (batch, in)."""
    if x.ndim not in (1, 2) or W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"linear: x {x.shape}, W {W.shape}, b {b.shape}")
    x2 = x.value.reshape(-1, W.shape[0])
    value = (x2 @ W.value + b.value).reshape(x.shape[:-1] + (W.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, W.shape[1])
        _accumulate(x, (g2 @ W.value.T).reshape(x.shape))
        _accumulate(W, x2.T @ g2)
        _accumulate(b, g2.sum(axis=0))

    return _result(value, "linear", (x, W, b), backward)


def conv2d(x: Node, kernel: Node, bias: Optional[Node] = None, stride: int = 1, padding: int = 0) -> Node:
    """
    Cross-correlation of (B, Cin, H, W) input with (Cout, Cin, k, k) kernels.

    Output extent per axis is floor((H + 2*padding - k) / stride) + 1.
    """
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride {stride} / padding {padding}")
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} vs kernel {kernel.shape}")
    k = kernel.shape[2]
    if kernel.shape[3] != k:
        raise ShapeError(f"conv2d: square kernels only, got {kernel.shape}")
    batch, _, height, width = x.shape
    if k > height + 2 * padding or k > width + 2 * padding:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {x.shape}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} vs {kernel.shape[0]} output channels")

    padded = np.pad(x.value, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.value
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    value = np.tensordot(windows, kernel.value, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        value = value + bias.value[None, :, None, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        if kernel.requires_grad:
            _accumulate(kernel, np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3])))
        if bias is not None:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            per_window = np.tensordot(g, kernel.value, axes=([1], [0]))  # (B, oh, ow, Cin, k, k)
            grad_padded = np.zeros_like(padded)
            for i in range(k):
                for j in range(k):
                    grad_padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += \
                        per_window[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                grad_padded = grad_padded[:, :, padding:padding + height, padding:padding + width]
            _accumulate(x, grad_padded)

    return _result(np.ascontiguousarray(value), "conv2d", parents, backward)


def upsample2x(x: Node) -> Node:
    """Nearest-neighbour upsampling of the last two axes."""
    value = x.value.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(g):
        shape = g.shape[:-2] + (g.shape[-2] // 2, 2, g.shape[-1] // 2, 2)
        _accumulate(x, g.reshape(shape).sum(axis=(-3, -1)))

    return _result(value, "upsample2x", (x,), backward)


def avgpool2x(x: Node) -> Node:
    """2x2 average pooling of the last two axes."""
    height, width = x.shape[-2:]
    if height % 2 or width % 2:
        raise ShapeError(f"avgpool2x: odd spatial extents {x.shape}")
    shape = x.shape[:-2] + (height // 2, 2, width // 2, 2)
    value = x.value.reshape(shape).mean(axis=(-3, -1))

    def backward(g):
        _accumulate(x, 0.25 * g.repeat(2, axis=-2).repeat(2, axis=-1))

    return _result(value, "avgpool2x", (x,), backward)


def instance_norm(x: Node, eps: float = 1e-5) -> Node:
    """Affine-free normalisation of every (sample, channel) plane to zero mean, unit variance."""
    if x.shape[-2] * x.shape[-1] < 2:
        raise ShapeError(f"instance_norm: plane of {x.shape[-2:]} is too small")
    axes = (-2, -1)
    centered = x.value - x.value.mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=axes, keepdims=True) + eps)
    value = centered * inv_std

    def backward(g):
        gx = g - g.mean(axis=axes, keepdims=True) - value * (g * value).mean(axis=axes, keepdims=True)
        _accumulate(x, gx * inv_std)

    return _result(value, "instance_norm", (x,), backward)


# ---------------------------------------------------------------------------
# Fourier transforms on two-channel grids
# ---------------------------------------------------------------------------

def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _complex_fft(z: np.ndarray, inverse: bool, centered: bool) -> np.ndarray:
    axes = (-2, -1)
    if centered:
        z = np.fft.ifftshift(z, axes=axes)
    z = np.fft.ifft2(z, axes=axes, norm="ortho") if inverse else np.fft.fft2(z, axes=axes, norm="ortho")
    if centered:
        z = np.fft.fftshift(z, axes=axes)
    return z


def _to_complex(v: np.ndarray) -> np.ndarray:
    return v[..., 0, :, :] + 1j * v[..., 1, :, :]


def _to_channels(z: np.ndarray, dtype) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-3).astype(dtype)


def fft2(x: Node, inverse: bool = False, centered: bool = True) -> Node:
    """
    Unitary 2D DFT of a (..., 2, H, W) grid.

    With ``centered`` the DC bin sits at (H//2, W//2) on both sides of the
    transform. The backward pass applies the inverse transform, which is the
    exact adjoint because the scaling is 1/sqrt(HW) in both directions.

    Raises:
        ShapeError: If the channel axis is not 2 or extents are not powers of two
    """
    if x.ndim < 3 or x.shape[-3] != 2:
        raise ShapeError(f"fft2: expected (..., 2, H, W), got {x.shape}")
    height, width = x.shape[-2:]
    if not (_is_pow2(height) and _is_pow2(width)):
        raise ShapeError(f"fft2: extents {height}x{width} are not powers of two")
    value = _to_channels(_complex_fft(_to_complex(x.value), inverse, centered), x.dtype)

    def backward(g):
        _accumulate(x, _to_channels(_complex_fft(_to_complex(g), not inverse, centered), x.dtype))

    return _result(value, "ifft2" if inverse else "fft2", (x,), backward)


def ifft2(y: Node, centered: bool = True) -> Node:
    return fft2(y, inverse=True, centered=centered)


def complexify(x: Node) -> Node:
    """Real (..., H, W) image to a (..., 2, H, W) grid with zero imaginary channel."""
    value = np.stack([x.value, np.zeros_like(x.value)], axis=-3)

    def backward(g):
        _accumulate(x, g[..., 0, :, :])

    return _result(value, "complexify", (x,), backward)


def magnitude(z: Node, eps: float = 1e-12) -> Node:
    """sqrt(re^2 + im^2 + eps) of a (..., 2, H, W) grid."""
    re, im = z.value[..., 0, :, :], z.value[..., 1, :, :]
    value = np.sqrt(re * re + im * im + eps)

    def backward(g):
        _accumulate(z, np.stack([g * re / value, g * im / value], axis=-3))

    return _result(value, "magnitude", (z,), backward)


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

def ssim(x: Node, y: Operand, window: int = 7, k1: float = 0.01, k2: float = 0.03,
         data_range: Optional[Union[float, np.ndarray]] = None) -> Node:
    """
    Mean SSIM over every valid ``window`` x ``window`` uniform window.

    Images are (H, W), (B, H, W) or (B, 1, H, W). Local covariances use the
    unbiased NP/(NP-1) normalisation. When ``data_range`` is omitted it is the
    per-image maximum of ``y``, or FALLBACK_DATA_RANGE where that maximum
    is not positive.

    Raises:
        ShapeError: If shapes differ or the image is smaller than the window
        ValueError: If a data range is not positive
    """
    x = as_node(x)
    y = as_node(y, x.dtype)
    if x.shape != y.shape:
        raise ShapeError(f"ssim: {x.shape} vs {y.shape}")
    height, width = x.shape[-2:]
    if height < window or width < window:
        raise ShapeError(f"ssim: image {height}x{width} smaller than {window}x{window} window")
    shape4 = (-1, 1, height, width)
    xb = reshape(x, shape4)
    yb = reshape(y, shape4)
    batch = xb.shape[0]
    if data_range is None:
        dr = yb.value.max(axis=(1, 2, 3)).reshape(batch, 1, 1, 1)
        dr = np.where(dr > 0, dr, FALLBACK_DATA_RANGE).astype(x.dtype)
    else:
        dr = np.broadcast_to(np.asarray(data_range, dtype=x.dtype).reshape(-1, 1, 1, 1), (batch, 1, 1, 1))
    if np.any(dr <= 0):
        raise ValueError("ssim: data_range must be positive")

    kernel = Node(np.full((1, 1, window, window), 1.0 / window ** 2, dtype=x.dtype))
    n_points = window ** 2
    cov_norm = n_points / (n_points - 1)
    c1 = ((k1 * dr) ** 2).astype(x.dtype)
    c2 = ((k2 * dr) ** 2).astype(x.dtype)

    ux = conv2d(xb, kernel)
    uy = conv2d(yb, kernel)
    uxx = conv2d(xb * xb, kernel)
    uyy = conv2d(yb * yb, kernel)
    uxy = conv2d(xb * yb, kernel)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)
    a1 = 2 * ux * uy + c1
    a2 = 2 * vxy + c2
    b1 = ux * ux + uy * uy + c1
    b2 = vx + vy + c2
    return mean((a1 * a2) / (b1 * b2))


# ---------------------------------------------------------------------------
# Parameters and checkpoints
# ---------------------------------------------------------------------------

class Params:
    """Named, ordered collection of leaf nodes (network weights and biases)."""

    def __init__(self):
        self._nodes: Dict[str, Node] = {}

    def add(self, name: str, value: np.ndarray) -> Node:
        if name in self._nodes:
            raise ValueError(f"duplicate parameter name: {name}")
        node = Node(np.array(value, copy=True), requires_grad=True, name=name)
        self._nodes[name] = node
        return node

    def init_uniform(self, name: str, shape: Tuple[int, ...], fan_in: int,
                     rng: np.random.Generator, dtype=np.float32) -> Node:
        """Fan-in scaled uniform init in [-sqrt(1/fan_in), sqrt(1/fan_in)]."""
        bound = np.sqrt(1.0 / fan_in)
        return self.add(name, rng.uniform(-bound, bound, size=shape).astype(dtype))

    def __getitem__(self, name: str) -> Node:
        return self._nodes[name]

    def __contains__(self, name: str) -> bool:
        return name in self._nodes

    def __len__(self) -> int:
        return len(self._nodes)

    def __iter__(self) -> Iterator[str]:
        return iter(self._nodes)

    def items(self):
        return self._nodes.items()

    def nodes(self) -> List[Node]:
        return list(self._nodes.values())

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: node.shape for name, node in self._nodes.items()}

    def zero_grad(self) -> None:
        for node in self._nodes.values():
            node.grad = None

    def grads(self) -> Dict[str, np.ndarray]:
        return {
            name: node.grad if node.grad is not None else np.zeros_like(node.value)
            for name, node in self._nodes.items()
        }

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: node.value.copy() for name, node in self._nodes.items()}

    def restore(self, arrays: Dict[str, np.ndarray]) -> None:
        """Load values by name in place, keeping node handles."""
        if set(arrays) != set(self._nodes):
            missing = sorted(set(self._nodes) - set(arrays))
            extra = sorted(set(arrays) - set(self._nodes))
            raise ShapeError(f"parameter names differ (missing {missing}, unexpected {extra})")
        for name, node in self._nodes.items():
            value = np.asarray(arrays[name])
            if value.shape != node.shape:
                raise ShapeError(f"parameter {name}: expected {node.shape}, got {value.shape}")
            node.value = value.astype(node.dtype, copy=True)

    def to_dtype(self, dtype) -> "Params":
        """Cast every value in place (handles stay valid) and return self."""
        for node in self._nodes.values():
            node.value = node.value.astype(dtype)
            node.grad = None
        return self

    @classmethod
    def merge(cls, *groups: "Params") -> "Params":
        merged = cls()
        for group in groups:
            for name, node in group.items():
                if name in merged._nodes:
                    raise ValueError(f"duplicate parameter name: {name}")
                merged._nodes[name] = node
        return merged


@dataclass
class AdamState:
    """Adam moments and step counter; defaults are the usual 0.9 / 0.999 / 1e-8."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Params, grads: Dict[str, np.ndarray], state: AdamState) -> Params:
    """
    Apply one bias-corrected Adam update in place.

    Raises:
        ShapeError: If gradient names or shapes do not match the parameters
    """
    if set(grads) != set(params):
        raise ShapeError(f"gradients for {sorted(set(grads) ^ set(params))} do not match parameters")
    for name, node in params.items():
        if grads[name].shape != node.shape:
            raise ShapeError(f"gradient {name}: {grads[name].shape} vs parameter {node.shape}")

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    step_size = state.lr / bc1
    for name, node in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(node.value))
        v = state.v.setdefault(name, np.zeros_like(node.value))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        node.value -= (step_size * m / (np.sqrt(v / bc2) + state.eps)).astype(node.dtype)
    return params


def _pack_records(records: Sequence[Tuple[str, np.ndarray]]) -> bytes:
    chunks = [struct.pack("<I", len(records))]
    for name, array in records:
        encoded = name.encode("utf-8")
        array = np.asarray(array)
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.astype("<f4").tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.data):
            raise FormatError(f"checkpoint truncated at byte {self.offset}")
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def records(self) -> List[Tuple[str, np.ndarray]]:
        out = []
        for _ in range(self.u32()):
            name = self.take(self.u32()).decode("utf-8")
            rank = self.u32()
            shape = struct.unpack(f"<{rank}I", self.take(4 * rank))
            count = int(np.prod(shape)) if rank else 1
            array = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
            out.append((name, array))
        return out


def encode_checkpoint(params: Params, state: Optional[AdamState] = None) -> bytes:
    """
    Serialize parameters (and optionally Adam state) to the SQSM layout.

    The Adam step is stored as the float32 pair (step // 2**24, step % 2**24),
    exact up to 2**48 steps.
    """
    header = CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
    body = _pack_records([(name, node.value) for name, node in params.items()])
    state_records: List[Tuple[str, np.ndarray]] = []
    if state is not None:
        state_records.append(("adam.step", np.array(divmod(state.step, STEP_SPLIT), dtype=np.float32)))
        for key in ("lr", "beta1", "beta2", "eps"):
            state_records.append((f"adam.{key}", np.asarray(getattr(state, key), dtype=np.float32)))
        for name in params:
            if name in state.m:
                state_records.append((f"adam.m.{name}", state.m[name]))
                state_records.append((f"adam.v.{name}", state.v[name]))
    return header + body + _pack_records(state_records)


def _decode_step(record: np.ndarray) -> int:
    if record.shape != (2,):
        raise FormatError(f"adam.step record has shape {record.shape}, expected (2,)")
    high, low = (int(v) for v in record)
    return high * STEP_SPLIT + low


def decode_checkpoint(data: bytes) -> Tuple[Dict[str, np.ndarray], Optional[AdamState]]:
    """
    Parse SQSM bytes into parameter arrays and optional Adam state.

    Raises:
        FormatError: On wrong magic, unsupported version, truncation or trailing bytes
    """
    reader = _Reader(data)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("not a SeqSample checkpoint (bad magic)")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    params = dict(reader.records())
    state_records = dict(reader.records())
    if reader.offset != len(data):
        raise FormatError(f"{len(data) - reader.offset} trailing bytes after checkpoint")
    if not state_records:
        return params, None
    state = AdamState(
        lr=float(state_records["adam.lr"]),
        beta1=float(state_records["adam.beta1"]),
        beta2=float(state_records["adam.beta2"]),
        eps=float(state_records["adam.eps"]),
        step=_decode_step(state_records["adam.step"]),
    )
    for key, array in state_records.items():
        if key.startswith("adam.m."):
            state.m[key[len("adam.m."):]] = array
        elif key.startswith("adam.v."):
            state.v[key[len("adam.v."):]] = array
    return params, state


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def grad_check(f: Callable[..., Node], inputs: Union[Params, Sequence[np.ndarray]], eps: float = 1e-5,
               max_coords: Optional[int] = None, seed: int = 0) -> float:
    """
    Compare the taped gradient of a scalar function with central differences.

    Args:
        f: Scalar-valued function. Called as ``f(*nodes)`` for array inputs,
           or as ``f()`` when ``inputs`` is a Params collection it closes over
        inputs: Arrays (copied to 64-bit) or a 64-bit Params collection
        eps: Central-difference step
        max_coords: Check at most this many seeded random coordinates per input
        seed: Seed for the coordinate subset

    Returns:
        max over checked coordinates of |analytic - fd| / max(1, |analytic|)

    Raises:
        ShapeError: If f is not scalar-valued
        ValueError: If Params are not 64-bit
    """
    if isinstance(inputs, Params):
        leaves = inputs.nodes()
        if any(node.dtype != np.float64 for node in leaves):
            raise ValueError("grad_check needs 64-bit parameters; call to_dtype(np.float64) first")
        inputs.zero_grad()
        for leaf in leaves:
            leaf.value = np.ascontiguousarray(leaf.value)

        def call():
            return f()
    else:
        leaves = [Node(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]

        def call():
            return f(*leaves)

    with Tape() as tape:
        out = call()
        if out.value.size != 1:
            raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
        tape.backward(out)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value) for leaf in leaves]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for leaf, grad in zip(leaves, analytic):
        size = leaf.value.size
        coords = range(size) if max_coords is None or max_coords >= size else \
            rng.choice(size, size=max_coords, replace=False)
        flat = leaf.value.reshape(-1)
        for i in coords:
            original = flat[i]
            flat[i] = original + eps
            f_plus = call().item()
            flat[i] = original - eps
            f_minus = call().item()
            flat[i] = original
            fd = (f_plus - f_minus) / (2 * eps)
            a = float(grad.reshape(-1)[i])
            worst = np.maximum(worst, abs(a - fd) / np.maximum(1.0, abs(a)))
    logger.debug(f"grad_check: max relative error {float(worst):.3e}")
    return float(worst)
