"""Dense tensors with a single-use reverse-mode tape.

Every differentiable operation is a plain function that takes ``Tensor``
arguments, computes the forward value with numpy and, when any input tracks
gradients, attaches a ``TapeNode`` holding a backward closure.  ``backward``
walks the tape once in reverse topological order and then consumes it.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TapeNode",
    "TapeConsumedError",
    "tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "matmul",
    "relu",
    "sigmoid",
    "activation",
    "conv3d_valid",
    "maxpool3d_2",
    "upsample_nearest3d_2",
    "crop3d",
    "concat",
    "layer_norm",
    "spmm",
    "inject_grad_fault",
    "no_grad",
]


class TapeConsumedError(RuntimeError):
    """Raised when ``backward`` is called on a tape that was already used."""


class TapeNode:
    __slots__ = ("op", "inputs", "backward_fn", "consumed")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """An n-dimensional float array with optional gradient tracking."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: TapeNode | None = None

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum(self, axis)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# fault injection (used to verify that gradcheck catches broken backward code)

_FAULTS: set[str] = set()


@contextlib.contextmanager
def inject_grad_fault(op: str, factor: float = 1.5):
    """Scale every gradient produced by ``op`` inside the block by ``factor``."""
    _FAULTS.add(op)
    global _FAULT_FACTOR
    previous = _FAULT_FACTOR
    _FAULT_FACTOR = factor
    try:
        yield
    finally:
        _FAULTS.discard(op)
        _FAULT_FACTOR = previous


_FAULT_FACTOR = 1.5
_GRAD_ENABLED = True
_PATTERNS: list | None = None


def log_pattern(arr: np.ndarray) -> None:
    """Note a discrete branch choice (relu signs, pooling winners, graph edges)."""
    if _PATTERNS is not None:
        _PATTERNS.append(np.packbits(arr) if arr.dtype == bool else arr.copy())


@contextlib.contextmanager
def record_patterns():
    """Collect every discrete branch choice made inside the block.

    Two evaluations with equal patterns lie on the same smooth piece of a
    piecewise-smooth function.
    """
    global _PATTERNS
    previous, _PATTERNS = _PATTERNS, []
    try:
        yield _PATTERNS
    finally:
        _PATTERNS = previous


@contextlib.contextmanager
def no_grad():
    """Forward computation without recording a tape."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``out_data`` and register a tape node if any input tracks gradients."""
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        if op in _FAULTS:
            inner, factor = backward_fn, _FAULT_FACTOR

            def backward_fn(g, _inner=inner):
                return tuple(None if r is None else r * factor for r in _inner(g))

        out._node = TapeNode(op, tuple(inputs), backward_fn)
    return out


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for parent in t._node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tracked leaf reachable from scalar ``loss``.

    Leaf gradients accumulate.  The tape is consumed: a second call on the
    same graph raises ``TapeConsumedError``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor that requires grad")
    if loss._node is not None and loss._node.consumed:
        raise TapeConsumedError("tape already consumed; run a new forward pass")

    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        if node.consumed:
            raise TapeConsumedError("tape already consumed; run a new forward pass")
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.inputs, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node.consumed = True
        node.backward_fn = None


# ---------------------------------------------------------------------------
# elementwise and reductions


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _record("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        g = np.expand_dims(g, tuple(ax % len(shape) for ax in axes))
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return div(sum(a, axis), float(n))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _record("transpose", np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inv),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    log_pattern(mask)
    # np.maximum keeps NaN visible instead of silently zeroing it
    return _record("relu", np.maximum(a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split evaluation keeps exp() from overflowing on either tail
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex)).astype(a.dtype)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# volumetric layers; tensors are laid out as (channels, depth, height, width)


def conv3d_valid(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Unpadded 3-D cross-correlation of a (C_in, D, H, W) map."""
    if x.ndim != 4 or w.ndim != 5:
        raise ValueError(f"conv3d_valid expects x (C,D,H,W) and w (O,C,k,k,k); got {x.shape}, {w.shape}")
    c_out, c_in, kd, kh, kw = w.shape
    if x.shape[0] != c_in:
        raise ValueError(f"input has {x.shape[0]} channels, weights expect {c_in}")
    _, d, h, wd = x.shape
    if d < kd or h < kh or wd < kw:
        raise ValueError(f"spatial extent {x.shape[1:]} smaller than kernel {(kd, kh, kw)}")
    if b is not None and b.shape != (c_out,):
        raise ValueError(f"bias shape {b.shape} does not match {c_out} output channels")
    od, oh, ow = d - kd + 1, h - kh + 1, wd - kw + 1
    xd, wdat = x.data, w.data
    nvox = od * oh * ow
    offsets = [(i, j, k) for i in range(kd) for j in range(kh) for k in range(kw)]

    if c_in * len(offsets) * nvox <= 150_000_000:
        # im2col + one matmul; the per-offset loop below only bounds memory
        cols = np.empty((c_in, len(offsets), nvox), dtype=xd.dtype)
        for n, (i, j, k) in enumerate(offsets):
            cols[:, n] = xd[:, i:i + od, j:j + oh, k:k + ow].reshape(c_in, nvox)
        cols = cols.reshape(c_in * len(offsets), nvox)
        wmat = wdat.reshape(c_out, -1)
        out = wmat @ cols
    else:
        cols = None
        out = np.zeros((c_out, nvox), dtype=np.result_type(xd, wdat))
        for i, j, k in offsets:
            out += wdat[:, :, i, j, k] @ xd[:, i:i + od, j:j + oh, k:k + ow].reshape(c_in, nvox)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(c_out, od, oh, ow)

    def bw(g):
        g2 = g.reshape(c_out, nvox)
        gx = np.zeros_like(xd) if x.requires_grad else None
        if cols is not None:
            gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
            if gx is not None:
                gcols = (wdat.reshape(c_out, -1).T @ g2).reshape(c_in, len(offsets), od, oh, ow)
                for n, (i, j, k) in enumerate(offsets):
                    gx[:, i:i + od, j:j + oh, k:k + ow] += gcols[:, n]
        else:
            gw = np.empty_like(wdat) if w.requires_grad else None
            for i, j, k in offsets:
                if gw is not None:
                    patch = xd[:, i:i + od, j:j + oh, k:k + ow].reshape(c_in, nvox)
                    gw[:, :, i, j, k] = g2 @ patch.T
                if gx is not None:
                    gx[:, i:i + od, j:j + oh, k:k + ow] += (wdat[:, :, i, j, k].T @ g2).reshape(c_in, od, oh, ow)
        gb = g2.sum(axis=1) if b is not None and b.requires_grad else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _record("conv3d_valid", out, inputs, bw)


def maxpool3d_2(x: Tensor) -> Tensor:
    """2x2x2 max pooling; ties send the gradient to the first voxel in z-major order."""
    if x.ndim != 4:
        raise ValueError(f"maxpool3d_2 expects (C,D,H,W), got {x.shape}")
    c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ValueError(f"maxpool3d_2 needs even spatial extents, got {(d, h, w)}")
    blocks = (x.data.reshape(c, d // 2, 2, h // 2, 2, w // 2, 2)
              .transpose(0, 1, 3, 5, 2, 4, 6)
              .reshape(c, d // 2, h // 2, w // 2, 8))
    arg = blocks.argmax(axis=-1)
    log_pattern(arg)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = (gb.reshape(c, d // 2, h // 2, w // 2, 2, 2, 2)
              .transpose(0, 1, 4, 2, 5, 3, 6)
              .reshape(c, d, h, w))
        return (gx,)

    return _record("maxpool3d_2", out, (x,), bw)


def upsample_nearest3d_2(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"upsample_nearest3d_2 expects (C,D,H,W), got {x.shape}")
    c, d, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, None, :, None, :, None], (c, d, 2, h, 2, w, 2)).reshape(c, 2 * d, 2 * h, 2 * w)

    def bw(g):
        return (g.reshape(c, d, 2, h, 2, w, 2).sum(axis=(2, 4, 6)),)

    return _record("upsample_nearest3d_2", out, (x,), bw)


def crop3d(x: Tensor, start: Sequence[int], size: Sequence[int]) -> Tensor:
    """Spatial sub-block ``x[:, s0:s0+n0, s1:s1+n1, s2:s2+n2]``."""
    sl = (slice(None),) + tuple(slice(s, s + n) for s, n in zip(start, size))
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[sl] = g
        return (gx,)

    return _record("crop3d", x.data[sl].copy(), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row of an (N, E) matrix over its E features, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    centred = xd - mu
    inv_std = 1.0 / np.sqrt((centred ** 2).mean(axis=1, keepdims=True) + eps)
    xhat = centred * inv_std
    out = xhat * gamma.data + beta.data
    e = xd.shape[1]

    def bw(g):
        dxhat = g * gamma.data
        gx = inv_std / e * (e * dxhat - dxhat.sum(axis=1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record("layer_norm", out, (x, gamma, beta), bw)


def spmm(adj, h: Tensor, normalize: bool = True) -> Tensor:
    """Sparse-dense product ``D^-1 A h`` (or ``A h``); the adjacency is a constant."""
    if h.ndim != 2 or h.shape[0] != adj.num_nodes:
        raise ValueError(f"adjacency has {adj.num_nodes} rows, features have shape {h.shape}")
    a = adj.to_scipy()
    scale = (1.0 / np.maximum(adj.degrees, 1)).astype(h.dtype)[:, None] if normalize else None
    out = a @ h.data
    if scale is not None:
        out = out * scale

    def bw(g):
        if scale is not None:
            g = g * scale
        return (np.asarray(a.T @ g),)

    return _record("spmm", np.asarray(out, dtype=h.dtype), (h,), bw)
