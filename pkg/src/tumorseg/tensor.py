"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors wrap numpy arrays. Operations executed while a :class:`Tape` is
active (and touching at least one tensor that requires gradients) are
recorded in execution order; :func:`backward` replays that record in
reverse, so every recorded operation is visited exactly once.

Reductions inside ``matmul``, ``conv2d``, pooling and upsampling are
accumulated in double precision and cast back to the storage dtype.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
LEAKY_SLOPE = 0.01
LN_EPS = 1e-5
LOG_FLOOR = -100.0


class DimensionError(ValueError):
    """Incompatible tensor shapes."""


class ConfigurationError(ValueError):
    """Invalid operation configuration (stride, kernel size, learning rate...)."""


class ContractError(RuntimeError):
    """A call violated an operation precondition."""


_tape_stack: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager::

        with Tape():
            loss = model_loss(...)
        backward(loss)
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


_branch_logs: list[list] = []


class record_branches:
    """Collect the branch taken by every non-smooth op evaluated inside the block.

    ReLU and clip masks and channel selections are logged in call order, so
    two evaluations lie on the same smooth piece iff their logs are equal.
    """

    def __enter__(self) -> list:
        self.log: list = []
        _branch_logs.append(self.log)
        return self.log

    def __exit__(self, *exc):
        _branch_logs.remove(self.log)


def note_branch(pattern: np.ndarray):
    if _branch_logs:
        entry = np.packbits(pattern) if pattern.dtype == bool else np.asarray(pattern).copy()
        for log in _branch_logs:
            log.append(entry)


class no_grad:
    """Suspend recording inside a ``with`` block."""

    def __enter__(self):
        self._saved = list(_tape_stack)
        _tape_stack.clear()

    def __exit__(self, *exc):
        _tape_stack.extend(self._saved)
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_tape", "__weakref__")

    # keep numpy from hijacking reflected operators
    __array_priority__ = 1000

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._tape = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

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

    def __matmul__(self, other):
        return matmul(self, other)


_param_ids = itertools.count()


class Parameter(Tensor):
    """A learnable tensor with an always-allocated gradient buffer."""

    __slots__ = ("id",)

    def __init__(self, value, id: str | None = None, dtype=None):
        arr = np.array(value, dtype=dtype, copy=True)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        super().__init__(arr, requires_grad=True)
        self.id = id if id is not None else f"param{next(_param_ids)}"
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.id!r}, shape={self.shape})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result_dtype(*arrays):
    return np.result_type(*[a.dtype for a in arrays])


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._tape = tape
        tape.nodes.append(out)
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = g.copy() if isinstance(t, Parameter) else g
    else:
        t.grad = t.grad + g


def backward(loss: Tensor):
    """Accumulate d(loss)/d(param) into every reachable ``Parameter.grad``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ContractError("loss was not produced under an active Tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is not None:
                _accumulate(parent, pg)
        node.grad = None
    tape.nodes.clear()


def zero_grad(params: Iterable[Parameter]):
    for p in params:
        p.zero_grad()


def sgd_step(params: Iterable[Parameter], lr: float):
    """Plain SGD: ``value <- value - lr * grad``. Gradients are left in place."""
    if not lr > 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    for p in params:
        p.data = (p.data - lr * p.grad).astype(p.data.dtype, copy=False)


def clip_grad_norm(params: Iterable[Parameter], max_norm: float | None) -> float:
    """Rescale all gradients jointly so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping. ``None`` disables clipping.
    """
    params = list(params)
    norm = math.sqrt(math.fsum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params))
    if max_norm is not None:
        if not max_norm > 0:
            raise ConfigurationError(f"clip norm must be positive, got {max_norm}")
        if norm > max_norm:
            scale = max_norm / norm
            for p in params:
                p.grad = (p.grad * scale).astype(p.grad.dtype, copy=False)
    return norm


class Rng:
    """Seeded generator (numpy PCG64); the same seed gives the same draws everywhere."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low, high, shape=None):
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape, scale=1.0):
        return self._gen.normal(0.0, scale, size=shape)

    def integers(self, low, high, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n):
        return self._gen.permutation(n)

    def spawn(self, key: int) -> "Rng":
        return Rng((self.seed * 1_000_003 + key) % (2**63))


# ---------------------------------------------------------------------------
# element-wise arithmetic


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b or b == ():
        return a
    if a == ():
        return b
    if len(a) != len(b):
        raise DimensionError(f"cannot combine shapes {a} and {b}: rank differs")
    out = []
    for da, db in zip(a, b):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"cannot combine shapes {a} and {b}")
        out.append(max(da, db))
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _binary_operands(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if not isinstance(b, Tensor):
        return _make(a.data + b, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return _make(a + b.data, (b,), lambda g: (g,))
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -b)
    return add(a, mul(b, -1.0))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if not isinstance(b, Tensor):
        return _make(a.data * b, (a,), lambda g: (g * b,))
    if not isinstance(a, Tensor):
        return _make(a * b.data, (b,), lambda g: (g * a,))
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / b)
    a = as_tensor(a, dtype=b.dtype) if not isinstance(a, Tensor) else a
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), bw)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype),)

    return _make(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = math.prod(x.shape[a] for a in axes)
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _make(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, perm: Sequence[int]) -> Tensor:
    perm = tuple(perm)
    if sorted(perm) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {perm} for rank {x.ndim}")
    inv = tuple(np.argsort(perm))
    return _make(np.ascontiguousarray(x.data.transpose(perm)), (x,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise DimensionError(f"concat along axis {axis}: shapes {ref} and {t.shape} disagree")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=ax)))


def gather_channels(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick channels per sample: ``x[b, index[b, j]]`` for x of shape [B, C, ...]."""
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise DimensionError(f"index shape {index.shape} does not match batch of {x.shape}")
    full = index.reshape(index.shape + (1,) * (x.ndim - 2))
    full = np.broadcast_to(full, index.shape + x.shape[2:])
    out = np.take_along_axis(x.data, full, axis=1)

    def bw(g):
        gx = np.zeros_like(x.data)
        b_idx = np.arange(x.shape[0])[:, None]
        np.add.at(gx, (b_idx, index), g)
        return (gx,)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    d = x.data
    note_branch(d > 0)
    scale = np.where(d > 0, 1.0, slope).astype(d.dtype)
    return _make(d * scale, (x,), lambda g: (g * scale,))


def relu(x: Tensor) -> Tensor:
    d = x.data
    mask = d > 0
    note_branch(mask)
    return _make(np.where(mask, d, 0).astype(d.dtype), (x,), lambda g: (g * mask,))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "leaky_relu":
        return leaky_relu(x)
    raise ConfigurationError(f"unknown activation {kind!r}")


def log_clipped(x: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """``max(log(x), floor)``; the gradient is zero where the floor is active."""
    d = x.data
    with np.errstate(divide="ignore"):
        raw = np.log(d)
    live = raw > floor
    note_branch(live)
    y = np.where(live, raw, floor).astype(d.dtype)
    safe = np.where(live, d, 1.0)
    return _make(y, (x,), lambda g: (np.where(live, g / safe, 0.0),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    d = x.data
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last dimension, then apply ``gain`` and ``bias``."""
    c = x.shape[-1]
    if c == 0:
        raise DimensionError("layer_norm over a zero-length dimension")
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match {c}")
    d = x.data.astype(np.float64)
    mu = d.mean(axis=-1, keepdims=True)
    var = ((d - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (d - mu) * inv
    out = (xhat * gain.data + bias.data).astype(x.dtype)
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        g64 = g.astype(np.float64)
        gx_hat = g64 * gain.data
        gx = inv * (
            gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g64 * xhat).sum(axis=lead), g64.sum(axis=lead)

    return _make(out, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# linear algebra and convolution


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``b[..., k, n]`` with matching batch dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} x {b.shape}")
    dtype = _result_dtype(a.data, b.data)
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    out = np.matmul(a64, b64).astype(dtype)

    def bw(g):
        g64 = g.astype(np.float64)
        ga = np.matmul(g64, np.swapaxes(b64, -1, -2))
        if b.ndim == 2:
            gb = a64.reshape(-1, a64.shape[-1]).T @ g64.reshape(-1, g64.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a64, -1, -2), g64)
        return ga, gb

    return _make(out, (a, b), bw)


def _conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0:
        raise ConfigurationError(f"kernel {k} exceeds padded extent {n + 2 * pad}")
    if span % stride:
        raise ConfigurationError(
            f"non-integral output size: ({n} + 2*{pad} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(-2, -1))
    return win[..., ::stride, ::stride, :, :]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation.

    ``x`` is ``[C_in, H, W]`` or batched ``[B, C_in, H, W]``; ``w`` is
    ``[C_out, C_in, kh, kw]`` and ``b`` is ``[C_out]``.
    """
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"bad stride/pad {stride}/{pad}")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects [B,C,H,W] x [O,C,kh,kw], got {x.shape} and {w.shape}")
    bsz, cin, h, wid = xd.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv2d bias shape {b.shape} != ({cout},)")
    ho = _conv_out_size(h, kh, stride, pad)
    wo = _conv_out_size(wid, kw, stride, pad)
    dtype = _result_dtype(xd, w.data)
    xp = np.pad(xd.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = _windows(xp, kh, kw, stride)  # [B, C, Ho, Wo, kh, kw]
    w64 = w.data.astype(np.float64)
    out = np.tensordot(win, w64, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.astype(np.float64)[None, :, None, None]
    out = out.astype(dtype)
    if unbatched:
        out = out[0]

    def bw(g):
        g64 = (g[None] if unbatched else g).astype(np.float64)
        gw = np.tensordot(g64, win, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g64, w64[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
        gx = gxp[:, :, pad : pad + h, pad : pad + wid]
        if unbatched:
            gx = gx[0]
        grads = [gx, gw]
        if b is not None:
            grads.append(g64.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw)


def depthwise_conv2d(x: Tensor, kernel: np.ndarray, pad: int) -> Tensor:
    """Apply one fixed 2-D kernel to every channel independently, stride 1."""
    kernel = np.asarray(kernel, dtype=np.float64)
    kh, kw = kernel.shape
    shape = x.shape
    h, wid = shape[-2:]
    _conv_out_size(h, kh, 1, pad)
    _conv_out_size(wid, kw, 1, pad)
    xd = x.data.reshape(-1, h, wid).astype(np.float64)
    xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad)))
    win = _windows(xp, kh, kw, 1)
    out = np.tensordot(win, kernel, axes=([3, 4], [0, 1]))
    out_shape = shape[:-2] + out.shape[-2:]
    ho, wo = out.shape[-2:]

    def bw(g):
        g64 = g.reshape(-1, ho, wo).astype(np.float64)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + ho, j : j + wo] += g64 * kernel[i, j]
        return (gxp[:, pad : pad + h, pad : pad + wid].reshape(shape),)

    return _make(out.reshape(out_shape).astype(x.dtype), (x,), bw)


def avg_pool(x: Tensor, kind: str = "global", k: int = 3) -> Tensor:
    """``global``: mean over H, W (kept as 1x1). ``local``: zero-padded k x k mean, same shape."""
    if kind == "global":
        return mean(x, axis=(-2, -1), keepdims=True)
    if kind == "local":
        if k < 1 or k % 2 == 0:
            raise ConfigurationError(f"local pooling window must be odd, got {k}")
        return depthwise_conv2d(x, np.full((k, k), 1.0 / (k * k)), pad=k // 2)
    raise ConfigurationError(f"unknown pooling kind {kind!r}")


def bilinear_matrix(n: int, factor: int) -> np.ndarray:
    """Interpolation weights [factor*n, n], half-pixel centres, edge-clamped."""
    m = np.zeros((n * factor, n))
    for o in range(n * factor):
        src = min(max((o + 0.5) / factor - 0.5, 0.0), n - 1)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ConfigurationError(f"upsampling factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    h, wid = x.shape[-2:]
    ah = bilinear_matrix(h, factor)
    aw = bilinear_matrix(wid, factor)
    out = np.matmul(np.matmul(ah, x.data.astype(np.float64)), aw.T).astype(x.dtype)

    def bw(g):
        return (np.matmul(np.matmul(ah.T, g.astype(np.float64)), aw),)

    return _make(out, (x,), bw)
