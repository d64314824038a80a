"""Dense tensors with reverse-mode automatic differentiation.

Everything trainable in this repo runs on the `Tensor` class below: a numpy
array plus an optional gradient buffer and a backward closure. Graphs are
built eagerly by the ops in this module and walked once, in reverse
topological order, by `Tensor.backward`.

Conventions:
  * values are float32 by default; `gradcheck_mode()` switches new tensors to
    float64 (finite differences are unreliable at 32-bit),
  * broadcasting is limited to (a) python scalars and (b) a smaller operand
    whose shape is a trailing suffix of the larger one (the "leading batch
    dims" case); anything richer needs an explicit expand op,
  * integer data (token ids, masks used for indexing) lives in plain numpy
    arrays or lists, never in Tensors.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, DimensionError, NumericError, ParameterError

_DEFAULT_DTYPE = np.float32


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily change the dtype given to newly created tensors."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def gradcheck_mode():
    """64-bit mode for finite-difference verification."""
    return use_dtype(np.float64)


class Tensor:
    """A dense n-d array with optional reverse-mode gradient support."""

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str | None = None,
                 parents: tuple["Tensor", ...] = ()):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = parents
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    # -- gradient machinery -------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Populate .grad on every reachable tensor with requires_grad.

        The receiver must be scalar (size 1); that is the only entry point the
        training code needs and it keeps seeding unambiguous.
        """
        if self.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        ComputeGraph(self).backward()

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return take_slice(self, index)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


class ComputeGraph:
    """The op records reachable from a root, in topological order.

    Built once per backward pass; acyclic by construction (ops only ever point
    at pre-existing tensors). `backward` visits each node exactly once in
    reverse topological order.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = self._toposort(root)

    @staticmethod
    def _toposort(root: Tensor) -> list[Tensor]:
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
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self):
        self.root._accumulate(np.ones_like(self.root.data))
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


# -- construction helpers ---------------------------------------------------


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def randn(shape, rng: np.random.Generator, scale: float = 1.0,
          requires_grad: bool = False) -> Tensor:
    data = (rng.standard_normal(shape) * scale).astype(_DEFAULT_DTYPE)
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def check_finite(t: Tensor, where: str = "tensor"):
    """NaN/Inf is a detectable error state; raise instead of propagating."""
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {where}")
    return t


# -- elementwise arithmetic -------------------------------------------------


def _suffix_broadcast_grad(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient computed at broadcast shape down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if small == big[len(big) - len(small):] or small == ():
        return
    raise DimensionError(f"{opname}: shapes {sa} and {sb} only broadcast on leading batch dims")


def _binary(a, b, opname, fwd, bwd_a, bwd_b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, opname)
    out = Tensor(fwd(a.data, b.data), requires_grad=a.requires_grad or b.requires_grad,
                 op=opname, parents=(a, b))
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(_suffix_broadcast_grad(bwd_a(g, a.data, b.data), a.shape))
            if b.requires_grad:
                b._accumulate(_suffix_broadcast_grad(bwd_b(g, a.data, b.data), b.shape))
        out._backward = _bw
    return out


def add(a, b) -> Tensor:
    return _binary(a, b, "add", lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub", lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, "mul", lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data ** exponent, requires_grad=a.requires_grad, op="pow", parents=(a,))
    if out.requires_grad:
        def _bw(g):
            a._accumulate(g * exponent * a.data ** (exponent - 1))
        out._backward = _bw
    return out


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y, requires_grad=a.requires_grad, op="exp", parents=(a,))
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(g * y)
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.log(a.data), requires_grad=a.requires_grad, op="log", parents=(a,))
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(g / a.data)
    return out


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y, requires_grad=a.requires_grad, op="tanh", parents=(a,))
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(g * (1.0 - y * y))
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y, requires_grad=a.requires_grad, op="sigmoid", parents=(a,))
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(g * y * (1.0 - y))
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0), requires_grad=a.requires_grad, op="relu", parents=(a,))
    if out.requires_grad:
        mask = a.data > 0
        out._backward = lambda g: a._accumulate(g * mask)
    return out


def gelu(a) -> Tensor:
    """tanh-approximation GELU."""
    a = _as_tensor(a)
    c = np.sqrt(2.0 / np.pi).astype(a.dtype) if a.dtype == np.float32 else np.sqrt(2.0 / np.pi)
    x = a.data
    inner = c * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)
    out = Tensor(y, requires_grad=a.requires_grad, op="gelu", parents=(a,))
    if out.requires_grad:
        def _bw(g):
            dinner = c * (1.0 + 3 * 0.044715 * x ** 2)
            dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            a._accumulate(g * dy)
        out._backward = _bw
    return out


# -- reductions -------------------------------------------------------------


def _restore_axes(g: np.ndarray, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    if not keepdims:
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), requires_grad=a.requires_grad,
                 op="sum", parents=(a,))
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(
            _restore_axes(g, a.shape, axis, keepdims).copy())
    return out


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    out = Tensor(out_data, requires_grad=a.requires_grad, op="mean", parents=(a,))
    if out.requires_grad:
        count = a.size / max(out_data.size, 1)
        out._backward = lambda g: a._accumulate(
            _restore_axes(g, a.shape, axis, keepdims) / count)
    return out


# -- shape ops --------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape), requires_grad=a.requires_grad, op="reshape", parents=(a,))
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(g.reshape(a.shape))
    return out


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.swapaxes(a.data, ax1, ax2), requires_grad=a.requires_grad,
                 op="swapaxes", parents=(a,))
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(np.swapaxes(g, ax1, ax2))
    return out


def take_slice(a, index) -> Tensor:
    """Basic (slice/int) indexing with gradient scatter."""
    a = _as_tensor(a)
    out = Tensor(a.data[index], requires_grad=a.requires_grad, op="slice", parents=(a,))
    if out.requires_grad:
        def _bw(g):
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, index, g)
        out._backward = _bw
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ParameterError("concat of zero tensors")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis),
                 requires_grad=any(p.requires_grad for p in parts),
                 op="concat", parents=tuple(parts))
    if out.requires_grad:
        sizes = [p.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def _bw(g):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    p._accumulate(g[tuple(idx)])
        out._backward = _bw
    return out


def expand(a, shape) -> Tensor:
    """Explicit broadcast to `shape` (full numpy rules; gradient sums back)."""
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"cannot expand {a.shape} to {shape}") from exc
    out = Tensor(data.copy(), requires_grad=a.requires_grad, op="expand", parents=(a,))
    if out.requires_grad:
        lead = len(shape) - a.ndim
        summed = tuple(range(lead)) + tuple(
            lead + i for i, d in enumerate(a.shape) if d == 1 and shape[lead + i] != 1)

        def _bw(g):
            a._accumulate(g.sum(axis=summed).reshape(a.shape) if summed else g)
        out._backward = _bw
    return out


def repeat_rows(a, n: int) -> Tensor:
    """(..., D) -> (..., n, D): explicit expand along a new second-to-last axis."""
    a = _as_tensor(a)
    data = np.repeat(np.expand_dims(a.data, -2), n, axis=-2)
    out = Tensor(data, requires_grad=a.requires_grad, op="repeat_rows", parents=(a,))
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(g.sum(axis=-2))
    return out


def upsample_repeat(a, factor: int, axis: int = -2) -> Tensor:
    """Nearest-neighbor upsampling: each entry along `axis` repeated `factor` times."""
    if factor < 1:
        raise ParameterError("upsample factor must be >= 1")
    a = _as_tensor(a)
    out = Tensor(np.repeat(a.data, factor, axis=axis), requires_grad=a.requires_grad,
                 op="upsample", parents=(a,))
    if out.requires_grad:
        ax = axis % a.ndim

        def _bw(g):
            shape = list(a.shape)
            shape[ax:ax + 1] = [shape[ax], factor]
            a._accumulate(g.reshape(shape).sum(axis=ax + 1))
        out._backward = _bw
    return out


def pad_axis(a, axis: int, before: int, after: int, value: float = 0.0) -> Tensor:
    a = _as_tensor(a)
    widths = [(0, 0)] * a.ndim
    widths[axis % a.ndim] = (before, after)
    out = Tensor(np.pad(a.data, widths, constant_values=value),
                 requires_grad=a.requires_grad, op="pad", parents=(a,))
    if out.requires_grad:
        ax = axis % a.ndim
        idx = [slice(None)] * a.ndim
        idx[ax] = slice(before, before + a.shape[ax])
        out._backward = lambda g: a._accumulate(g[tuple(idx)])
    return out


# -- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product. Supports (m,k)@(k,n), batched (...,m,k)@(...,k,n) with equal
    leading dims, and the weight case (...,m,k)@(k,n)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad,
                 op="matmul", parents=(a, b))
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(g @ np.swapaxes(b.data, -1, -2))
            if b.requires_grad:
                if b.ndim == 2 and a.ndim > 2:
                    k, n = b.shape
                    gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
                else:
                    gb = np.swapaxes(a.data, -1, -2) @ g
                b._accumulate(gb)
        out._backward = _bw
    return out


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather: ids is a plain int array/list, table is (V, D)."""
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids], requires_grad=table.requires_grad,
                 op="embedding", parents=(table,))
    if out.requires_grad:
        def _bw(g):
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        out._backward = _bw
    return out


# -- softmax family ---------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if a.size == 0 or a.shape[axis % max(a.ndim, 1)] == 0:
        raise DimensionError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, requires_grad=a.requires_grad, op="softmax", parents=(a,))
    if out.requires_grad:
        def _bw(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            a._accumulate(y * (g - dot))
        out._backward = _bw
    return out


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if a.size == 0 or a.shape[axis % max(a.ndim, 1)] == 0:
        raise DimensionError("log_softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y, requires_grad=a.requires_grad, op="log_softmax", parents=(a,))
    if out.requires_grad:
        sm = np.exp(y)

        def _bw(g):
            a._accumulate(g - sm * g.sum(axis=axis, keepdims=True))
        out._backward = _bw
    return out


def layer_norm(x, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x = _as_tensor(x)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError(f"layer_norm gain/bias must be shape {x.shape[-1:]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data,
                 requires_grad=x.requires_grad or gain.requires_grad or bias.requires_grad,
                 op="layer_norm", parents=(x, gain, bias))
    if out.requires_grad:
        def _bw(g):
            if gain.requires_grad:
                gain._accumulate((g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
            if bias.requires_grad:
                bias._accumulate(g.reshape(-1, x.shape[-1]).sum(axis=0))
            if x.requires_grad:
                gy = g * gain.data
                n = x.shape[-1]
                m1 = gy.mean(axis=-1, keepdims=True)
                m2 = (gy * xhat).mean(axis=-1, keepdims=True)
                x._accumulate(inv * (gy - m1 - xhat * m2))
        out._backward = _bw
    return out


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention; `mask` is additive and applied before softmax.

    q: (..., Tq, d), k: (..., Tk, d), v: (..., Tk, dv); mask broadcasts against
    the (..., Tq, Tk) score array.
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"attention q/k dims differ: {q.shape} vs {k.shape}")
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = mul(matmul(q, swapaxes(k, -1, -2)), scale)
    if mask is not None:
        scores = add(scores, Tensor(np.asarray(mask, dtype=scores.dtype)))
    return matmul(softmax(scores, axis=-1), v)


# -- convolutions -----------------------------------------------------------


def _conv_windows(x: np.ndarray, ksize: int, stride: int):
    win = np.lib.stride_tricks.sliding_window_view(x, ksize, axis=-2)
    # sliding_window_view puts the window axis last: (B, T_out_full, C, K)
    win = np.moveaxis(win, -1, -2)  # (B, T_out_full, K, C)
    return win[..., ::stride, :, :] if stride > 1 else win


def conv1d(x, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str | int = "same") -> Tensor:
    """1-d convolution over the time axis.

    x: (T, Cin) or (B, T, Cin); kernel: (K, Cin, Cout). "same" keeps T for
    stride 1 and gives ceil(T/stride) otherwise.
    """
    if stride < 1:
        raise ParameterError("conv1d stride must be >= 1")
    x = _as_tensor(x)
    squeeze = x.ndim == 2
    xb = reshape(x, (1,) + x.shape) if squeeze else x
    ksize, cin, cout = kernel.shape
    if xb.shape[-1] != cin:
        raise DimensionError(f"conv1d channels: input {xb.shape[-1]} vs kernel {cin}")
    if padding == "same":
        total = max((int(np.ceil(xb.shape[1] / stride)) - 1) * stride + ksize - xb.shape[1], 0)
        before, after = total // 2, total - total // 2
    elif padding == "valid":
        before = after = 0
    else:
        before = after = int(padding)
    xp = pad_axis(xb, 1, before, after) if (before or after) else xb

    b, tp, _ = xp.shape
    t_out = (tp - ksize) // stride + 1
    win = _conv_windows(xp.data, ksize, stride)  # (B, T_out, K, Cin)
    cols = win.reshape(b * t_out, ksize * cin)
    w2 = kernel.data.reshape(ksize * cin, cout)
    y = (cols @ w2).reshape(b, t_out, cout)
    if bias is not None:
        y = y + bias.data
    out = Tensor(y, requires_grad=xp.requires_grad or kernel.requires_grad
                 or (bias is not None and bias.requires_grad),
                 op="conv1d", parents=(xp, kernel) + ((bias,) if bias is not None else ()))
    if out.requires_grad:
        def _bw(g):
            g2 = g.reshape(b * t_out, cout)
            if kernel.requires_grad:
                kernel._accumulate((cols.T @ g2).reshape(ksize, cin, cout))
            if bias is not None and bias.requires_grad:
                bias._accumulate(g2.sum(axis=0))
            if xp.requires_grad:
                gcols = (g2 @ w2.T).reshape(b, t_out, ksize, cin)
                gx = np.zeros_like(xp.data)
                for kk in range(ksize):
                    gx[:, kk:kk + t_out * stride:stride, :] += gcols[:, :, kk, :]
                xp._accumulate(gx)
        out._backward = _bw
    return reshape(out, out.shape[1:]) if squeeze else out


def depthwise_conv1d(x, kernel: Tensor) -> Tensor:
    """Per-channel 'same' convolution over time; kernel: (K, C)."""
    x = _as_tensor(x)
    squeeze = x.ndim == 2
    xb = reshape(x, (1,) + x.shape) if squeeze else x
    ksize, c = kernel.shape
    if xb.shape[-1] != c:
        raise DimensionError(f"depthwise_conv1d channels: input {xb.shape[-1]} vs kernel {c}")
    before = (ksize - 1) // 2
    after = ksize - 1 - before
    xp = pad_axis(xb, 1, before, after)
    win = _conv_windows(xp.data, ksize, 1)  # (B, T, K, C)
    y = np.einsum("btkc,kc->btc", win, kernel.data)
    out = Tensor(y, requires_grad=xp.requires_grad or kernel.requires_grad,
                 op="depthwise_conv1d", parents=(xp, kernel))
    if out.requires_grad:
        t = xb.shape[1]

        def _bw(g):
            if kernel.requires_grad:
                kernel._accumulate(np.einsum("btkc,btc->kc", win, g))
            if xp.requires_grad:
                gx = np.zeros_like(xp.data)
                for kk in range(ksize):
                    gx[:, kk:kk + t, :] += g * kernel.data[kk]
                xp._accumulate(gx)
        out._backward = _bw
    return reshape(out, out.shape[1:]) if squeeze else out


# -- regularization ---------------------------------------------------------


def dropout(x, p: float, rng: np.random.Generator, train: bool = True) -> Tensor:
    if not train or p <= 0.0:
        return _as_tensor(x)
    if p >= 1.0:
        raise ParameterError("dropout probability must be < 1")
    x = _as_tensor(x)
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    keep = keep.astype(x.dtype)
    out = Tensor(x.data * keep, requires_grad=x.requires_grad, op="dropout", parents=(x,))
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(g * keep)
    return out
