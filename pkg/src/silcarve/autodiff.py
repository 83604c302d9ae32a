"""Reverse-mode automatic differentiation over numpy arrays.

Every operation wraps its result in a new :class:`Tensor` that records its
parent tensors and a vector-Jacobian closure.  ``backward`` replays that
implicit tape in reverse topological order and accumulates gradients into
every tensor that requires them.  Graphs are rebuilt on each forward pass
and never reused across batches.

Arrays keep whatever float dtype they were given (float64 by default), so
the same graph code runs in single or double precision.
"""

from __future__ import annotations

import itertools

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "relu",
    "sigmoid",
    "log",
    "matmul",
    "reshape",
    "concat",
    "tile_spatial",
    "crop_center",
    "resize_nn",
    "conv2d",
    "conv_transpose",
    "max_over_set",
    "avg_over_set",
    "bce_loss",
    "backward",
    "trace",
    "BCE_EPS",
]

BCE_EPS = 1e-7


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """N-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple = ()
        self._vjp = None

    @classmethod
    def _from_op(cls, data, op: str, parents, vjp):
        """Wrap an op result; the graph edge is kept only if a parent needs it."""
        out = cls(data)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out.op = op
            out._parents = tuple(parents)
            out._vjp = vjp
        return out

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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def item(self) -> float:
        return float(self.data)

    # operator sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def scale(self, s: float) -> "Tensor":
        return scale(self, s)

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def log(self) -> "Tensor":
        return log(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self.op!r}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# graph walk

def trace(t: Tensor) -> list:
    """Ancestors of ``t`` in topological order (parents before children)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(t, False)]
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into every requires_grad ancestor.

    ``loss`` must be scalar.  Repeated calls without clearing grads add up;
    each call uses fresh flow buffers so the sums stay correct.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = trace(loss)
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            held = flowing.get(id(parent))
            flowing[id(parent)] = pg if held is None else held + pg


# ---------------------------------------------------------------------------
# elementwise ops

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(name, a, b, fwd, vjp_pair):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = fwd(a.data, b.data)
    except ValueError as exc:
        raise ValueError(
            f"{name}: incompatible shapes {a.data.shape} and {b.data.shape}"
        ) from exc

    def vjp(g):
        ga, gb = vjp_pair(g, a.data, b.data)
        if ga is not None:
            ga = _unbroadcast(ga, a.data.shape)
        if gb is not None:
            gb = _unbroadcast(gb, b.data.shape)
        return ga, gb

    return Tensor._from_op(out, name, (a, b), vjp)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, da, db: (g, g))


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, da, db: (g, -g))


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda g, da, db: (g * db, g * da))


def neg(t) -> Tensor:
    t = as_tensor(t)
    return Tensor._from_op(-t.data, "neg", (t,), lambda g: (-g,))


def scale(t, s: float) -> Tensor:
    t = as_tensor(t)
    s = float(s)
    return Tensor._from_op(t.data * s, "scale", (t,), lambda g: (g * s,))


def relu(t) -> Tensor:
    t = as_tensor(t)
    mask = t.data > 0
    # np.maximum (not where) so non-finite inputs stay visible downstream
    return Tensor._from_op(
        np.maximum(t.data, 0.0), "relu", (t,), lambda g: (g * mask,)
    )


def sigmoid(t) -> Tensor:
    t = as_tensor(t)
    x = t.data
    # evaluate on the non-overflowing branch for either sign
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return Tensor._from_op(out, "sigmoid", (t,), vjp)


def log(t) -> Tensor:
    t = as_tensor(t)
    return Tensor._from_op(np.log(t.data), "log", (t,), lambda g: (g / t.data,))


def tensor_sum(t) -> Tensor:
    t = as_tensor(t)
    out = np.asarray(t.data.sum())

    def vjp(g):
        return (np.broadcast_to(g, t.data.shape),)

    return Tensor._from_op(out, "sum", (t,), vjp)


# ---------------------------------------------------------------------------
# shape ops

def reshape(t, shape) -> Tensor:
    t = as_tensor(t)
    old = t.data.shape
    out = t.data.reshape(shape)
    return Tensor._from_op(out, "reshape", (t,), lambda g: (g.reshape(old),))


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat requires at least one tensor")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(out, "concat", ts, vjp)


def tile_spatial(t, spatial: tuple) -> Tensor:
    """Replicate a channel vector over a spatial grid: (..., C) -> (..., C, *spatial)."""
    t = as_tensor(t)
    spatial = tuple(int(s) for s in spatial)
    expanded = t.data.reshape(t.data.shape + (1,) * len(spatial))
    out = np.broadcast_to(expanded, t.data.shape + spatial).copy()
    axes = tuple(range(t.data.ndim, t.data.ndim + len(spatial)))

    def vjp(g):
        return (g.sum(axis=axes),)

    return Tensor._from_op(out, "tile_spatial", (t,), vjp)


def crop_center(t, out_spatial: tuple) -> Tensor:
    """Center-crop the trailing ``len(out_spatial)`` axes."""
    t = as_tensor(t)
    out_spatial = tuple(int(s) for s in out_spatial)
    nd = len(out_spatial)
    in_spatial = t.data.shape[-nd:]
    for have, want in zip(in_spatial, out_spatial):
        if want > have:
            raise ValueError(f"crop_center: cannot crop {in_spatial} to {out_spatial}")
    starts = [(have - want) // 2 for have, want in zip(in_spatial, out_spatial)]
    key = (Ellipsis,) + tuple(
        slice(s, s + want) for s, want in zip(starts, out_spatial)
    )
    out = t.data[key]

    def vjp(g):
        gx = np.zeros_like(t.data)
        gx[key] = g
        return (gx,)

    return Tensor._from_op(out, "crop_center", (t,), vjp)


def resize_nn(t, out_hw: tuple) -> Tensor:
    """Nearest-neighbor resize of the two trailing axes."""
    t = as_tensor(t)
    H, W = t.data.shape[-2:]
    H2, W2 = (int(s) for s in out_hw)
    rows = np.floor(np.arange(H2) * (H / H2)).astype(np.int64)
    cols = np.floor(np.arange(W2) * (W / W2)).astype(np.int64)
    out = t.data[..., rows[:, None], cols[None, :]]

    def vjp(g):
        lead = t.data.shape[:-2]
        gflat = g.reshape((-1, H2, W2))
        acc = np.zeros((gflat.shape[0], H, W), dtype=g.dtype)
        bidx = np.arange(gflat.shape[0])[:, None, None]
        np.add.at(acc, (bidx, rows[None, :, None], cols[None, None, :]), gflat)
        return (acc.reshape(lead + (H, W)),)

    return Tensor._from_op(out, "resize_nn", (t,), vjp)


# ---------------------------------------------------------------------------
# matmul and convolutions

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(
            f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul: inner dimensions disagree, {a.data.shape} @ {b.data.shape}"
        )
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(out, "matmul", (a, b), vjp)


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """(B,C,H,W) -> (B, C*k*k, Ho*Wo) patch matrix."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    B, C, Ho, Wo, _, _ = win.shape
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(B, C * k * k, Ho * Wo), Ho, Wo


def _col2im(cols: np.ndarray, xshape: tuple, k: int, stride: int, pad: int):
    """Adjoint of :func:`_im2col`: scatter-add patches back onto the image."""
    B, C, H, W = xshape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    g = np.zeros((B, C, Hp, Wp), dtype=cols.dtype)
    c6 = cols.reshape(B, C, k, k, Ho, Wo)
    for a in range(k):
        for b in range(k):
            g[:, :, a : a + stride * Ho : stride, b : b + stride * Wo : stride] += c6[
                :, :, a, b
            ]
    if pad:
        g = g[:, :, pad : pad + H, pad : pad + W]
    return g


def conv2d(x, kernel, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (C,H,W) or (B,C,H,W) input with an (F,C,k,k) kernel.

    The output spatial size (H + 2*pad - k)/stride + 1 must be an exact
    integer; remainders are rejected rather than floored.
    """
    xt, kt = as_tensor(x), as_tensor(kernel)
    if kt.data.ndim != 4:
        raise ValueError(f"conv2d kernel must be (F,C,k,k), got {kt.data.shape}")
    if xt.data.ndim not in (3, 4):
        raise ValueError(f"conv2d input must be (C,H,W) or (B,C,H,W), got {xt.data.shape}")
    stride, pad = int(stride), int(pad)
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: invalid stride {stride} or pad {pad}")
    batched = xt.data.ndim == 4
    xb = xt.data if batched else xt.data[None]
    B, C, H, W = xb.shape
    F, Ck, kh, kw = kt.data.shape
    if kh != kw:
        raise ValueError(f"conv2d kernel must be square, got {kt.data.shape}")
    k = kh
    if Ck != C:
        raise ValueError(
            f"conv2d: kernel expects {Ck} input channels, input {xt.data.shape} has {C}"
        )
    if k > H + 2 * pad or k > W + 2 * pad:
        raise ValueError(
            f"conv2d: kernel {kt.data.shape} larger than padded input {xt.data.shape}"
        )
    if (H + 2 * pad - k) % stride or (W + 2 * pad - k) % stride:
        raise ValueError(
            f"conv2d: size {(H, W)} with pad {pad}, kernel {k}, stride {stride} "
            "does not divide exactly"
        )
    cols, Ho, Wo = _im2col(xb, k, stride, pad)
    kmat = kt.data.reshape(F, C * k * k)
    out = np.matmul(kmat, cols).reshape(B, F, Ho, Wo)

    def vjp(g):
        gb = g if batched else g[None]
        gf = gb.reshape(B, F, Ho * Wo)
        gk = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kt.data.shape)
        gcols = np.matmul(kmat.T, gf)
        gx = _col2im(gcols, (B, C, H, W), k, stride, pad)
        return (gx if batched else gx[0]), gk

    return Tensor._from_op(out if batched else out[0], "conv2d", (xt, kt), vjp)


def conv_transpose(x, kernel, stride: int = 1, dims: int = 2) -> Tensor:
    """Transposed convolution (the adjoint of ``conv2d``-style cross-correlation).

    ``kernel`` is (C_in, C_out, k, ..., k) with ``dims`` spatial axes; the
    output spatial size is (n - 1) * stride + k per axis.
    """
    if dims not in (2, 3):
        raise ValueError(f"conv_transpose: dims must be 2 or 3, got {dims}")
    stride = int(stride)
    if stride < 1:
        raise ValueError(f"conv_transpose: stride must be >= 1, got {stride}")
    xt, kt = as_tensor(x), as_tensor(kernel)
    kd = kt.data
    if kd.ndim != dims + 2:
        raise ValueError(
            f"conv_transpose: kernel for dims={dims} must have {dims + 2} axes, "
            f"got {kd.shape}"
        )
    ks = kd.shape[2:]
    if len(set(ks)) != 1:
        raise ValueError(f"conv_transpose: kernel must be cubic, got {kd.shape}")
    k = ks[0]
    if xt.data.ndim not in (dims + 1, dims + 2):
        raise ValueError(
            f"conv_transpose: input for dims={dims} must have {dims + 1} or "
            f"{dims + 2} axes, got {xt.data.shape}"
        )
    batched = xt.data.ndim == dims + 2
    xb = xt.data if batched else xt.data[None]
    B, Ci = xb.shape[:2]
    sp = xb.shape[2:]
    if kd.shape[0] != Ci:
        raise ValueError(
            f"conv_transpose: kernel expects {kd.shape[0]} input channels, "
            f"input {xt.data.shape} has {Ci}"
        )
    Co = kd.shape[1]
    out_sp = tuple((n - 1) * stride + k for n in sp)
    offsets = list(itertools.product(range(k), repeat=dims))
    region = {
        off: tuple(slice(o, o + stride * n, stride) for o, n in zip(off, sp))
        for off in offsets
    }

    out = np.zeros((B, Co) + out_sp, dtype=xb.dtype)
    for off in offsets:
        kr = kd[(slice(None), slice(None)) + off]  # (Ci, Co)
        yr = np.tensordot(xb, kr, axes=([1], [0]))  # (B, *sp, Co)
        out[(slice(None), slice(None)) + region[off]] += np.moveaxis(yr, -1, 1)

    sp_axes = tuple(range(2, 2 + dims))

    def vjp(g):
        gb = g if batched else g[None]
        gx = np.zeros_like(xb)
        gk = np.zeros_like(kd)
        for off in offsets:
            kr = kd[(slice(None), slice(None)) + off]
            gslice = gb[(slice(None), slice(None)) + region[off]]  # (B,Co,*sp)
            gx += np.moveaxis(np.tensordot(gslice, kr, axes=([1], [1])), -1, 1)
            gk[(slice(None), slice(None)) + off] = np.tensordot(
                xb, gslice, axes=((0,) + sp_axes, (0,) + sp_axes)
            )
        return (gx if batched else gx[0]), gk

    return Tensor._from_op(out if batched else out[0], "conv_transpose", (xt, kt), vjp)


# ---------------------------------------------------------------------------
# set pooling

def _check_same_shapes(ts, name):
    shapes = {t.data.shape for t in ts}
    if len(shapes) > 1:
        raise ValueError(f"{name}: all inputs must share a shape, got {sorted(shapes)}")


def max_over_set(features) -> Tensor:
    """Elementwise max over a non-empty set of same-shape tensors.

    Ties route the gradient to the first tensor (in argument order) that
    attains the max, so each element's gradient has exactly one recipient.
    """
    ts = [as_tensor(f) for f in features]
    if not ts:
        raise ValueError("max_over_set requires at least one tensor")
    _check_same_shapes(ts, "max_over_set")
    stack = np.stack([t.data for t in ts])
    out = stack.max(axis=0)

    def vjp(g):
        winner = stack.argmax(axis=0)  # first occurrence wins ties
        return tuple(np.where(winner == i, g, 0.0) for i in range(len(ts)))

    return Tensor._from_op(out, "max_over_set", ts, vjp)


def avg_over_set(features) -> Tensor:
    """Elementwise mean over a non-empty set of same-shape tensors.

    Values are sorted elementwise before summation so the result is
    bit-identical under any permutation of the inputs.
    """
    ts = [as_tensor(f) for f in features]
    if not ts:
        raise ValueError("avg_over_set requires at least one tensor")
    _check_same_shapes(ts, "avg_over_set")
    n = len(ts)
    stack = np.stack([t.data for t in ts])
    out = np.sort(stack, axis=0).sum(axis=0) / n

    def vjp(g):
        share = g / n
        return tuple(share for _ in ts)

    return Tensor._from_op(out, "avg_over_set", ts, vjp)


# ---------------------------------------------------------------------------
# loss

def bce_loss(pred, target) -> Tensor:
    """Binary cross entropy, mean-reduced over all elements.

    Predictions are clamped to [BCE_EPS, 1 - BCE_EPS] before the logs;
    targets must be exactly 0 or 1.  Returns a scalar tensor.
    """
    pt = as_tensor(pred)
    tg = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=float)
    if pt.data.shape != tg.shape:
        raise ValueError(
            f"bce_loss: prediction shape {pt.data.shape} != target shape {tg.shape}"
        )
    if not np.all((tg == 0.0) | (tg == 1.0)):
        raise ValueError("bce_loss: target values must be exactly 0 or 1")
    p = np.clip(pt.data, BCE_EPS, 1.0 - BCE_EPS)
    count = p.size
    loss = -(tg * np.log(p) + (1.0 - tg) * np.log(1.0 - p)).sum() / count

    def vjp(g):
        return (g * (p - tg) / (p * (1.0 - p) * count),)

    return Tensor._from_op(np.asarray(loss), "bce_loss", (pt,), vjp)
