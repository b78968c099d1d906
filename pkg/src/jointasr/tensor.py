"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op builds a node holding its parents and a closure mapping the output
gradient to parent gradients. ``backward`` walks the nodes reachable from a
scalar loss in exact reverse creation order, then frees the graph.

Shapes are explicit. The only implicit expansion is bias-add, where a 1-D
tensor is added along the last axis.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

_counter = itertools.count()

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

DEBUG_FINITE = False


class DimensionError(ValueError):
    pass


class InputTooShortError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_counter)
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._id = next(_counter)
    out._consumed = False
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    if DEBUG_FINITE:
        assert np.all(np.isfinite(data)), "non-finite values produced"
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that requires it."""
    if loss.data.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward() already ran on this graph; rebuild it before calling again")
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in nodes:
            continue
        nodes[node._id] = node
        stack.extend(node._parents)
    order = sorted(nodes, reverse=True)
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for nid in order:
        node = nodes[nid]
        g = grads.pop(nid, None)
        if node._backward is None:
            if g is not None and node.requires_grad:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g
            continue
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg
    for node in nodes.values():
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node.requires_grad = False
    loss._consumed = True


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum, or bias-add when ``b`` is 1-D matching the last axis of ``a``."""
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        axes = tuple(range(a.ndim - 1))
        return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=axes)))
    raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), lambda g: (g * c,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return scale(sum_all(x), 1.0 / n)


def stack_scalars(xs: Sequence[Tensor]) -> Tensor:
    """Gather scalar tensors into one 1-D tensor."""
    data = np.array([x.data.reshape(()) for x in xs])

    def bw(g):
        return tuple(g[i].reshape(xs[i].shape) for i in range(len(xs)))

    return _make(data, tuple(xs), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    out = x.data.reshape(shape)
    if out.size != x.data.size:
        raise DimensionError(f"reshape: {old} cannot become {tuple(shape)}")
    return _make(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start+length)`` along ``axis``."""
    ax = axis % x.ndim
    if start < 0 or length < 0 or start + length > x.shape[ax]:
        raise DimensionError(f"narrow: [{start}, {start + length}) outside axis {ax} of {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(start, start + length)
    sl = tuple(sl)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        out[sl] = g
        return (out,)

    return _make(x.data[sl].copy(), (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: shape mismatch {ref} vs {x.shape} along axis {axis}")
    sizes = [x.shape[ax] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(xs)))

    return _make(np.concatenate([x.data for x in xs], axis=ax), tuple(xs), bw)


def embedding_select(table: Tensor, idx) -> Tensor:
    """Gather rows of ``table`` (N×D) at integer indices of any shape -> idx.shape + (D,)."""
    idx = np.asarray(idx, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"embedding_select: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding_select: index out of range for {table.shape[0]} rows")
    n, d = table.shape

    def bw(g):
        out = np.zeros((n, d))
        np.add.at(out, idx.reshape(-1), g.reshape(-1, d))
        return (out,)

    return _make(table.data[idx], (table,), bw)


def replace_rows(x: Tensor, rows, fill: Tensor) -> Tensor:
    """Copy of ``x`` (F×D) with the given rows replaced by the vector ``fill`` (D,)."""
    rows = np.asarray(rows, dtype=np.int64)
    if x.ndim != 2 or fill.shape != (x.shape[1],):
        raise DimensionError(f"replace_rows: {x.shape} with fill {fill.shape}")
    out = x.data.copy()
    out[rows] = fill.data

    def bw(g):
        gx = g.copy()
        gx[rows] = 0.0
        return gx, g[rows].sum(axis=0)

    return _make(out, (x, fill), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def conv_out_len(t: int, k: int, stride: int, padding: int = 0) -> int:
    return (t + 2 * padding - k) // stride + 1


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    groups: int = 1,
    padding: int = 0,
) -> Tensor:
    """1-D convolution of ``x`` (C_in×T) with ``weight`` (C_out×C_in/groups×K).

    ``padding`` zero-pads both ends symmetrically.
    """
    if x.ndim != 2 or weight.ndim != 3:
        raise DimensionError(f"conv1d: expected C_in×T input and 3-D weight, got {x.shape}, {weight.shape}")
    c_in, t = x.shape
    c_out, cg_in, k = weight.shape
    if stride < 1 or groups < 1:
        raise ValueError("conv1d: stride and groups must be positive")
    if c_in % groups or c_out % groups or cg_in != c_in // groups:
        raise DimensionError(f"conv1d: channels {c_in}->{c_out} incompatible with groups={groups}, weight {weight.shape}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv1d: bias shape {bias.shape} vs C_out={c_out}")
    tp = t + 2 * padding
    if tp < k:
        raise InputTooShortError(f"conv1d: input length {tp} shorter than kernel {k}")
    xp = np.pad(x.data, ((0, 0), (padding, padding))) if padding else x.data
    t_out = (tp - k) // stride + 1
    win = sliding_window_view(xp, k, axis=1)[:, ::stride]  # C_in × T_out × K
    cg_out = c_out // groups
    wd = weight.data
    win_g = win.reshape(groups, cg_in, t_out, k).transpose(0, 2, 1, 3).reshape(groups, t_out, cg_in * k)
    w_g = wd.reshape(groups, cg_out, cg_in * k)
    out = np.matmul(w_g, win_g.transpose(0, 2, 1)).reshape(c_out, t_out)
    if bias is not None:
        out = out + bias.data[:, None]

    def bw(g):
        g_g = g.reshape(groups, cg_out, t_out)
        gw = np.matmul(g_g, win_g).reshape(c_out, cg_in, k)
        gwin = np.matmul(np.swapaxes(g_g, 1, 2), w_g)  # groups × T_out × cg_in*K
        gwin = gwin.reshape(groups, t_out, cg_in, k).transpose(0, 2, 1, 3).reshape(c_in, t_out, k)
        gxp = np.zeros_like(xp)
        span = stride * (t_out - 1) + 1
        for j in range(k):
            gxp[:, j:j + span:stride] += gwin[:, :, j]
        gx = gxp[:, padding:padding + t] if padding else gxp
        gb = g.sum(axis=1) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
    return _make(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: params {gamma.shape}/{beta.shape} vs last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    axes = tuple(range(x.ndim - 1))

    def bw(g):
        gxhat = g * gd
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or when p == 0."""
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout at train time needs an explicit rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def cosine_similarity(u: Tensor, v: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine similarity along the last axis; norms are clamped below at ``eps``."""
    _check_same(u, v, "cosine_similarity")
    ud, vd = u.data, v.data
    nu = np.maximum(np.sqrt((ud * ud).sum(axis=-1)), eps)
    nv = np.maximum(np.sqrt((vd * vd).sum(axis=-1)), eps)
    dot = (ud * vd).sum(axis=-1)
    cos = dot / (nu * nv)

    def bw(g):
        gk = g[..., None]
        c = cos[..., None]
        # clamped norms act as constants
        du = vd / (nu * nv)[..., None] - np.where((nu > eps)[..., None], c * ud / (nu * nu)[..., None], 0.0)
        dv = ud / (nu * nv)[..., None] - np.where((nv > eps)[..., None], c * vd / (nv * nv)[..., None], 0.0)
        return gk * du, gk * dv

    return _make(cos, (u, v), bw)


def cross_entropy_from_logits(logits: Tensor, targets) -> Tensor:
    """Mean over rows of -log softmax(logits)[row, target]."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy_from_logits: logits {logits.shape}, targets {targets.shape}")
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - shifted[rows, targets]).mean()
    p = np.exp(shifted - lse[:, None])

    def bw(g):
        d = p.copy()
        d[rows, targets] -= 1.0
        return (d * (g / n),)

    return _make(np.array(loss), (logits,), bw)
