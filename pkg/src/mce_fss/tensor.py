"""Minimal reverse-mode autodiff over numpy arrays.

Every op takes and returns :class:`Tensor`. When any input requires a
gradient, the output records a closure that pushes the upstream gradient
back to its parents; :meth:`Tensor.backward` replays those closures in
reverse topological order exactly once.

Shapes follow the channel-first, batch-free convention used by the rest of
the package: feature maps are ``C x H x W`` and token sequences ``T x C``.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float64
LN_EPS = 1e-5

_grad_enabled = True


class ContractError(ValueError):
    """An op was called with inputs that violate its preconditions."""


class GraphError(RuntimeError):
    """Misuse of a recorded computation graph."""


class GradCheckError(RuntimeError):
    """Analytic gradient was not finite."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if any(n <= 0 for n in arr.shape):
            raise ContractError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def graph_ops(self) -> list[str]:
        """Op names of the recorded graph in topological order."""
        return [t.op for t in _topo_order(self)]

    def backward(self, grad: np.ndarray | None = None) -> None:
        if self._consumed:
            raise GraphError("backward already ran on this graph; re-run the forward pass")
        if not self.requires_grad:
            raise GraphError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise GraphError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None:
                if node.grad is not None:
                    node._backward(node.grad)
                node._backward = None
                node._consumed = True
                node._parents = ()
                node.grad = None


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def parameter(data, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    """Elementwise add with numpy broadcasting."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", backward)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        x._accumulate(g * c)

    return _make(x.data * c, (x,), "scale", backward)


def add_bias(x: Tensor, bias: Tensor, axis: int = -1) -> Tensor:
    """Broadcast a vector along every position of ``x`` except ``axis``.

    ``axis=-1`` adds a per-channel bias to ``T x C`` tokens; ``axis=0``
    adds a per-channel bias to a ``C x H x W`` map.
    """
    axis = axis % x.ndim
    if bias.ndim != 1 or bias.shape[0] != x.shape[axis]:
        raise ContractError(f"bias {bias.shape} does not match axis {axis} of {x.shape}")
    shape = [1] * x.ndim
    shape[axis] = -1
    return add(x, reshape(bias, tuple(shape)))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), "reshape", backward)


def expand(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Broadcast ``x`` to ``shape`` (materialized)."""
    def backward(g):
        x._accumulate(_unbroadcast(g, x.shape))

    return _make(np.broadcast_to(x.data, shape).copy(), (x,), "expand", backward)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    def backward(g):
        x._accumulate(np.swapaxes(g, -1, -2))

    return _make(np.swapaxes(x.data, -1, -2).copy(), (x,), "transpose", backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ContractError("concat of an empty list")
    sizes = [t.shape[axis] for t in xs]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    try:
        data = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as exc:
        raise ContractError(f"concat shapes {[t.shape for t in xs]}: {exc}") from None
    return _make(data, xs, "concat", backward)


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Slice ``x`` along ``axis`` with a slice or integer array."""
    idx = [slice(None)] * x.ndim
    idx[axis] = index
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accumulate(full)

    return _make(x.data[idx].copy(), (x,), "take", backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum()), (x,), "sum", backward)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    """Mean over one axis (or all elements when ``axis`` is None)."""
    if axis is None:
        n = x.data.size

        def backward(g):
            x._accumulate(np.broadcast_to(g / n, x.shape))

        return _make(np.asarray(x.data.mean()), (x,), "mean", backward)

    axis = axis % x.ndim
    n = x.shape[axis]

    def backward_axis(g):
        x._accumulate(np.broadcast_to(np.expand_dims(g, axis) / n, x.shape))

    return _make(x.data.mean(axis=axis), (x,), "mean", backward_axis)


def stack_mean(xs: Sequence[Tensor]) -> Tensor:
    """Elementwise arithmetic mean of same-shape tensors.

    Computed as ``x0 + mean(xi - x0)`` so that identical inputs return
    ``x0`` exactly.
    """
    xs = list(xs)
    shape = xs[0].shape
    for t in xs:
        if t.shape != shape:
            raise ContractError(f"stack_mean shape mismatch: {[t.shape for t in xs]}")
    if len(xs) == 1:
        return xs[0]
    k = len(xs)

    def backward(g):
        for t in xs:
            if t.requires_grad:
                t._accumulate(g / k)

    x0 = xs[0].data
    data = x0 + np.sum([t.data - x0 for t in xs[1:]], axis=0) / k
    return _make(data, xs, "stack_mean", backward)


# ---------------------------------------------------------------------------
# linear algebra and nonlinearities
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), "matmul", backward)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    finite = np.isfinite(z)
    row_max = np.where(finite, z, -np.inf).max(axis=-1, keepdims=True)
    dead = ~np.isfinite(row_max)
    row_max = np.where(dead, 0.0, row_max)
    e = np.exp(z - row_max)
    s = e.sum(axis=-1, keepdims=True)
    return np.where(dead, 0.0, e / np.where(dead, 1.0, s))


def masked_softmax(logits: Tensor, bias: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax of ``logits + bias``.

    ``bias`` holds one entry per column, each 0 or ``-inf``; it is broadcast
    over rows. Masked columns get weight exactly 0 and a fully masked row is
    all zeros.
    """
    z = logits.data
    if bias is not None:
        bias = np.asarray(bias, dtype=z.dtype)
        if bias.shape != (z.shape[-1],):
            raise ContractError(f"mask of shape {bias.shape} for logits {z.shape}")
        if not np.all((bias == 0) | (bias == -np.inf)):
            raise ContractError("additive mask entries must be 0 or -inf")
        z = z + bias
    y = _softmax_rows(z)

    def backward(g):
        logits._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (logits,), "masked_softmax", backward)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize each token (last axis) to zero mean, unit variance, then affine."""
    c = x.shape[-1]
    if c < 2:
        raise ContractError("layer_norm needs at least 2 channels")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + shift.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, c).sum(axis=0))
        if shift.requires_grad:
            shift._accumulate(g.reshape(-1, c).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            x._accumulate(inv * (gx - gx.mean(axis=-1, keepdims=True)
                                 - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _make(out, (x, gain, shift), "layer_norm", backward)


# plain floats: numpy float64 scalars would promote float32 arrays
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data ** 2)
        x._accumulate(g * (cdf + x.data * pdf))

    return _make(x.data * cdf, (x,), "gelu", backward)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row (last axis) to unit length; zero rows stay zero."""
    norm = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x.data / denom
    small = norm <= eps

    def backward(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        gx = np.where(small, g / denom, (g - y * proj) / denom)
        x._accumulate(gx)

    return _make(y, (x,), "l2_normalize", backward)


def softmax_channels(logits: Tensor) -> Tensor:
    """Softmax over axis 0 of a ``K x H x W`` logit map."""
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=0, keepdims=True)

    def backward(g):
        logits._accumulate(y * (g - (g * y).sum(axis=0, keepdims=True)))

    return _make(y, (logits,), "softmax", backward)


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean pixel cross-entropy of ``K x H x W`` logits against integer labels."""
    target = np.asarray(target).astype(np.int64)
    k = logits.shape[0]
    if target.shape != logits.shape[1:]:
        raise ContractError(f"target {target.shape} vs logits {logits.shape}")
    z = logits.data
    zmax = z.max(axis=0, keepdims=True)
    lse = zmax[0] + np.log(np.exp(z - zmax).sum(axis=0))
    picked = np.take_along_axis(z, target[None], axis=0)[0]
    n = target.size
    value = (lse - picked).sum() / n

    def backward(g):
        p = np.exp(z - lse[None])
        onehot = np.arange(k)[:, None, None] == target[None]
        logits._accumulate(g * (p - onehot) / n)

    return _make(np.asarray(value), (logits,), "cross_entropy", backward)


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------

def _conv_taps(h, w, kh, kw, dilation, padding, stride, ho, wo):
    """Kernel taps that touch at least one real (non-padding) pixel."""
    taps = []
    for i in range(kh):
        rows = i * dilation + stride * np.arange(ho) - padding
        if not np.any((rows >= 0) & (rows < h)):
            continue
        for j in range(kw):
            cols = j * dilation + stride * np.arange(wo) - padding
            if np.any((cols >= 0) & (cols < w)):
                taps.append((i, j))
    return taps


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, dilation: int = 1,
           padding: int | None = None, stride: int = 1) -> Tensor:
    """Zero-padded 2-D cross-correlation of a ``C x H x W`` map.

    ``padding`` defaults to "same" (``dilation * (k - 1) / 2``), so the
    output keeps the input resolution at ``stride=1``. Taps that only ever
    read padding are skipped; they contribute exactly zero.
    """
    if x.ndim != 3 or kernel.ndim != 4:
        raise ContractError(f"conv2d expects CxHxW and OxCxkxk, got {x.shape}, {kernel.shape}")
    o, c, kh, kw = kernel.shape
    if kh != kw or kh not in (1, 3):
        raise ContractError(f"unsupported kernel size {kh}x{kw}")
    if c != x.shape[0]:
        raise ContractError(f"kernel expects {c} input channels, got {x.shape[0]}")
    if dilation < 1 or stride < 1:
        raise ContractError("dilation and stride must be >= 1")
    if padding is None:
        padding = dilation * (kh - 1) // 2
    _, h, w = x.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if ho < 1 or wo < 1:
        raise ContractError("conv2d output would be empty")

    taps = _conv_taps(h, w, kh, kw, dilation, padding, stride, ho, wo)
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = np.empty((c, len(taps), ho, wo), dtype=x.data.dtype)
    for t, (i, j) in enumerate(taps):
        r0, c0 = i * dilation, j * dilation
        cols[:, t] = xp[:, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride]
    ti = np.array([i for i, _ in taps])
    tj = np.array([j for _, j in taps])
    kmat = kernel.data[:, :, ti, tj].reshape(o, c * len(taps))
    cmat = cols.reshape(c * len(taps), ho * wo)
    out = (kmat @ cmat).reshape(o, ho, wo)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def backward(g):
        g2 = g.reshape(o, ho * wo)
        if kernel.requires_grad:
            gk = np.zeros_like(kernel.data)
            gk[:, :, ti, tj] = (g2 @ cmat.T).reshape(o, c, len(taps))
            kernel._accumulate(gk)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=1))
        if x.requires_grad:
            gcols = (kmat.T @ g2).reshape(c, len(taps), ho, wo)
            gxp = np.zeros_like(xp)
            for t, (i, j) in enumerate(taps):
                r0, c0 = i * dilation, j * dilation
                gxp[:, r0:r0 + stride * (ho - 1) + 1:stride,
                    c0:c0 + stride * (wo - 1) + 1:stride] += gcols[:, t]
            if padding:
                gxp = gxp[:, padding:padding + h, padding:padding + w]
            x._accumulate(gxp)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, "conv2d", backward)


def interp_matrix(n_in: int, n_out: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Linear interpolation weights (``n_out x n_in``), align-corners=False."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale_ = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale_ - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinearly resize every channel of a ``C x H x W`` map."""
    if out_h < 1 or out_w < 1:
        raise ContractError("output size must be positive")
    _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x
    ry = interp_matrix(h, out_h, x.dtype)
    rx = interp_matrix(w, out_w, x.dtype)
    out = ry @ x.data @ rx.T

    def backward(g):
        x._accumulate(ry.T @ g @ rx)

    return _make(out, (x,), "bilinear_resize", backward)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5,
               max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Compare backprop gradients of scalar ``f()`` against central differences.

    Returns ``max |analytic - numeric| / max(1, |numeric|)`` over all checked
    entries. ``max_entries`` subsamples entries per parameter (uniformly,
    using ``rng``) to keep big composites affordable.
    """
    params = list(params)
    for p in params:
        p.grad = None
    out = f()
    trace = out.graph_ops()
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p, a in zip(params, analytic):
        if not np.all(np.isfinite(a)):
            raise GradCheckError(f"non-finite gradient for parameter {p.shape}; ops: {' -> '.join(trace)}")

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                up = float(f().data)
                flat[i] = orig - step
                down = float(f().data)
                flat[i] = orig
                num = (up - down) / (2 * step)
                err = abs(a.reshape(-1)[i] - num) / max(1.0, abs(num))
                worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
