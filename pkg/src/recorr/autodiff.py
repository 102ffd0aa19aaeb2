"""A small reverse-mode differentiation engine over a fixed set of 3-D ops.

Every op takes and returns :class:`Tensor` objects wrapping numpy arrays.
Shapes are static and there is no implicit broadcasting: elementwise ops
require equal shapes (Python scalars are the only exception) and the only
broadcast is the per-channel bias inside :func:`conv3d`.

Gradients are computed by :meth:`Tensor.backward`, which walks the recorded
graph in reverse topological order and accumulates ``.grad`` on every leaf
created with ``requires_grad=True``.
"""
from __future__ import annotations

import contextlib
import hashlib
from itertools import product

import numpy as np

from . import volume as vc
from .errors import ContractError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


_BRANCH_LOG = None


@contextlib.contextmanager
def record_branches():
    """Collect a digest of every discrete branch choice made inside the block.

    Leaky ReLU signs and trilinear cell indices / clamp masks are the only
    non-smooth points of the op set; two evaluations with equal digests lie
    on the same smooth piece. Used by the finite-difference audit.
    """
    global _BRANCH_LOG
    prev = _BRANCH_LOG
    _BRANCH_LOG = []
    try:
        yield _BRANCH_LOG
    finally:
        _BRANCH_LOG = prev


def _log_branch(*arrays):
    if _BRANCH_LOG is not None:
        h = hashlib.sha1()
        for a in arrays:
            h.update(np.ascontiguousarray(a).tobytes())
        _BRANCH_LOG.append(h.hexdigest())


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        self._parents = _parents
        self._backward = _backward

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self, grad=None):
        """Reverse sweep from this node; scalar outputs only unless ``grad`` is given."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root):
    """Nodes reachable from ``root``, each listed before its parents."""
    seen = set()
    post = []
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return post[::-1]


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _node(data, parents, backward, op):
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, None, tuple(parents), backward, op)
    return Tensor(data, op=op)


def _same_shape(op, *ts):
    s = ts[0].shape
    for t in ts[1:]:
        if t.shape != s:
            raise ContractError(f"{op}: shape mismatch {s} vs {t.shape}")


# -- elementwise ------------------------------------------------------------


def add(a, b):
    _same_shape("add", a, b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    _same_shape("sub", a, b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b):
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def scale(a, s):
    s = float(s)
    return _node(a.data * a.dtype.type(s), (a,), lambda g: (g * g.dtype.type(s),), "scale")


def add_scalar(a, s):
    return _node(a.data + a.dtype.type(s), (a,), lambda g: (g,), "add_scalar")


def square(a):
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2 * g * ad,), "square")


def sqrt(a):
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g / (2 * out),), "sqrt")


def leaky_relu(a, slope=0.2):
    ad = a.data
    pos = ad >= 0
    _log_branch(pos)
    k = a.dtype.type(slope)
    return _node(np.where(pos, ad, ad * k), (a,), lambda g: (np.where(pos, g, g * k),), "leaky_relu")


def sigmoid(a):
    out = 0.5 * (1 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a):
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


# -- reductions -------------------------------------------------------------


def sum(a, axis=None):  # noqa: A001 - mirrors numpy
    shape = a.shape
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.full(shape, g, dtype=a.dtype),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        gx = np.expand_dims(g, tuple(ax % len(shape) for ax in axes))
        return (np.broadcast_to(gx, shape).copy(),)

    return _node(np.asarray(out), (a,), back, "sum")


def mean(a):
    return scale(sum(a), 1.0 / a.size)


# -- channel plumbing -------------------------------------------------------


def concat(tensors, axis=0):
    tensors = list(tensors)
    rest = [t.shape[:axis] + t.shape[axis + 1 :] for t in tensors]
    if any(r != rest[0] for r in rest):
        raise ContractError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def channels(a, start, stop):
    """Channel slice ``a[start:stop]``."""
    if not 0 <= start < stop <= a.shape[0]:
        raise ContractError(f"channel slice [{start}:{stop}] out of range for {a.shape[0]} channels")
    shape = a.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[start:stop] = g
        return (gx,)

    return _node(a.data[start:stop], (a,), back, "channels")


def split(a, sizes):
    """Split along channels into consecutive chunks of ``sizes``."""
    if int(np.sum(sizes)) != a.shape[0]:
        raise ContractError(f"split sizes {sizes} do not sum to {a.shape[0]}")
    out, lo = [], 0
    for s in sizes:
        out.append(channels(a, lo, lo + s))
        lo += s
    return out


def diff(a, axis):
    """Forward difference ``a[i+1] - a[i]`` along ``axis``."""
    if a.shape[axis] < 2:
        raise ContractError("diff needs at least two samples along the axis")
    hi = [slice(None)] * a.data.ndim
    lo = [slice(None)] * a.data.ndim
    hi[axis] = slice(1, None)
    lo[axis] = slice(None, -1)
    hi, lo = tuple(hi), tuple(lo)
    shape = a.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[hi] += g
        gx[lo] -= g
        return (gx,)

    return _node(a.data[hi] - a.data[lo], (a,), back, "diff")


# -- convolution ------------------------------------------------------------


def _conv_geometry(x_shape, k, stride, padding):
    D, H, W = x_shape[1:]
    out = tuple((n + 2 * p - kk) // stride + 1 for n, p, kk in zip((D, H, W), padding, k))
    if min(out) < 1:
        raise ContractError(f"conv3d: kernel {k} too large for input {x_shape}")
    return out


def conv3d(x, w, b=None, stride=1, padding=None):
    """3-D cross-correlation of ``x`` (C, D, H, W) with ``w`` (O, C, kd, kh, kw).

    Zero padding defaults to ``(k - 1) // 2`` per axis.
    """
    if x.data.ndim != 4 or w.data.ndim != 5:
        raise ContractError(f"conv3d: bad ranks {x.shape}, {w.shape}")
    O, C = w.shape[:2]
    if x.shape[0] != C:
        raise ContractError(f"conv3d: input has {x.shape[0]} channels, kernel expects {C}")
    if b is not None and b.shape != (O,):
        raise ContractError(f"conv3d: bias shape {b.shape} != ({O},)")
    if stride not in (1, 2):
        raise ContractError("conv3d: stride must be 1 or 2")
    k = w.shape[2:]
    padding = tuple((kk - 1) // 2 for kk in k) if padding is None else tuple(padding)
    Do, Ho, Wo = _conv_geometry(x.shape, k, stride, padding)
    pd, ph, pw = padding
    xp = np.pad(x.data, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
    s = stride
    cols = np.empty((C,) + tuple(k) + (Do, Ho, Wo), dtype=x.dtype)
    for a, bb, c in product(*(range(kk) for kk in k)):
        cols[:, a, bb, c] = xp[:, a : a + s * Do : s, bb : bb + s * Ho : s, c : c + s * Wo : s]
    K = C * int(np.prod(k))
    cols2 = cols.reshape(K, -1)
    wmat = w.data.reshape(O, K)
    out = wmat @ cols2
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(O, Do, Ho, Wo)
    xshape = x.shape

    def back(g):
        g2 = g.reshape(O, -1)
        gw = (g2 @ cols2.T).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=1) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape((C,) + tuple(k) + (Do, Ho, Wo))
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for a, bb, c in product(*(range(kk) for kk in k)):
                dxp[:, a : a + s * Do : s, bb : bb + s * Ho : s, c : c + s * Wo : s] += dcols[:, a, bb, c]
            gx = dxp[:, pd : pd + xshape[1], ph : ph + xshape[2], pw : pw + xshape[3]]
        return (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, back if b is not None else (lambda g: back(g)[:2]), "conv3d")


# -- resampling -------------------------------------------------------------


def resize(x, out_dims, vector_scale=False):
    """Separable trilinear resampling to ``out_dims`` (half-voxel alignment).

    With ``vector_scale`` the input is a displacement field and each
    component is multiplied by the size ratio along its axis.
    """
    in_dims = x.shape[1:]
    mats = [vc.interp_matrix(n_in, n_out, x.dtype) for n_in, n_out in zip(in_dims, out_dims)]
    factors = vc.field_scale(in_dims, out_dims) if vector_scale else (1.0, 1.0, 1.0)
    if vector_scale and x.shape[0] != 3:
        raise ContractError("vector_scale resize needs a 3-channel field")

    def apply(arr, ms):
        for axis, A in enumerate(ms):
            arr = np.moveaxis(np.tensordot(A, arr, axes=([1], [axis + 1])), 0, axis + 1)
        return arr

    out = np.ascontiguousarray(apply(x.data, mats))
    if vector_scale:
        for a in range(3):
            out[a] *= factors[a]

    def back(g):
        g = g.copy()
        if vector_scale:
            for a in range(3):
                g[a] *= factors[a]
        return (np.ascontiguousarray(apply(g, [A.T for A in mats])),)

    return _node(out, (x,), back, "resize")


def warp(image, field):
    """Differentiable trilinear warp of ``image`` by displacement ``field``."""
    if field.data.ndim != 4 or field.shape[0] != 3 or field.shape[1:] != image.shape[1:]:
        raise ContractError(f"warp: field {field.shape} incompatible with image {image.shape}")
    dims = image.shape[1:]
    coords = vc.identity_grid(dims, field.dtype) + field.data
    cache = vc.sample_cache(dims, coords)
    _log_branch(*[i for pair in cache.idx for i in pair], *cache.live)
    img = image.data
    out = vc.gather(img, cache)
    C = img.shape[0]
    n_vox = int(np.prod(dims))

    def back(g):
        g_img = None
        g_field = None
        if image.requires_grad:
            acc = np.zeros(C * n_vox, dtype=g.dtype)
            offs = (np.arange(C) * n_vox)[:, None]
            gflat = g.reshape(C, -1)
            for idx, wgt, _ in cache.corners():
                acc += np.bincount((offs + idx.reshape(1, -1)).ravel(),
                                   weights=(gflat * wgt.reshape(1, -1)).ravel(),
                                   minlength=C * n_vox)
            g_img = acc.reshape(img.shape).astype(g.dtype, copy=False)
        if field.requires_grad:
            flat = img.reshape(C, -1)
            fz, fy, fx = cache.frac
            g_field = np.zeros(field.shape, dtype=g.dtype)
            for idx, _, (bz, by, bx) in cache.corners():
                v = np.einsum("c...,c...->...", g, flat[:, idx])
                wz = fz if bz else 1 - fz
                wy = fy if by else 1 - fy
                wx = fx if bx else 1 - fx
                g_field[0] += v * (1 if bz else -1) * wy * wx
                g_field[1] += v * wz * (1 if by else -1) * wx
                g_field[2] += v * wz * wy * (1 if bx else -1)
            for a in range(3):
                g_field[a] *= cache.live[a]
        return (g_img, g_field)

    return _node(out, (image, field), back, "warp")


def compose(outer, inner):
    """Displacement of ``phi_outer o phi_inner``."""
    return add(inner, warp(outer, inner))


# -- correlation ------------------------------------------------------------


def offsets(r):
    """The ``r**3`` integer shifts, lexicographic in (dz, dy, dx)."""
    h = r // 2
    return [(dz, dy, dx) for dz in range(-h, h + 1) for dy in range(-h, h + 1) for dx in range(-h, h + 1)]


def correlation(f, g, r):
    """Local correlation volume: channel ``k`` is ``<f(p), g(p + o_k)> / C``.

    ``g`` is zero-padded by ``r // 2`` so shifts reaching outside the grid
    contribute zero.
    """
    if f.shape != g.shape:
        raise ContractError(f"correlation: feature shapes differ {f.shape} vs {g.shape}")
    if r < 1 or r % 2 == 0:
        raise ContractError(f"search size r must be a positive odd integer, got {r}")
    C, D, H, W = f.shape
    h = r // 2
    # both grids live in one zero-padded box and are flattened; an offset is
    # then a constant flat shift, so every offset is one contiguous reduction
    pad = ((0, 0), (h, h), (h, h), (h, h))
    Dp, Hp, Wp = D + 2 * h, H + 2 * h, W + 2 * h

    def flat_padded(a):
        if h == 0:
            return np.ascontiguousarray(a).reshape(C, -1)
        box = np.zeros((C, Dp, Hp, Wp), dtype=a.dtype)
        box[:, h : h + D, h : h + H, h : h + W] = a
        return box.reshape(C, -1)

    fp, gp = flat_padded(f.data), flat_padded(g.data)
    lo = (h * Hp + h) * Wp + h
    hi = ((h + D - 1) * Hp + h + H - 1) * Wp + h + W
    shifts = [(dz * Hp + dy) * Wp + dx for dz, dy, dx in offsets(r)]
    inv_c = f.dtype.type(1.0 / C)
    fw = fp[:, lo:hi]
    # entries outside [lo, hi) and the pad gaps inside it are never read back
    flat = np.empty((len(shifts), Dp * Hp * Wp), dtype=f.dtype)
    for k, sh in enumerate(shifts):
        row = flat[k, lo:hi]
        np.einsum("cn,cn->n", fw, gp[:, lo + sh : hi + sh], out=row)
        row *= inv_c
    out = flat.reshape(-1, Dp, Hp, Wp)[:, h : h + D, h : h + H, h : h + W].copy()

    def back(go):
        gop = np.pad(go * inv_c, pad).reshape(len(shifts), -1)
        gf = np.zeros_like(fp) if f.requires_grad else None
        gg = np.zeros_like(gp) if g.requires_grad else None
        for k, sh in enumerate(shifts):
            gk = gop[k, lo:hi]
            if gf is not None:
                gf[:, lo:hi] += gp[:, lo + sh : hi + sh] * gk
            if gg is not None:
                gg[:, lo + sh : hi + sh] += fw * gk
        crop = lambda a: None if a is None else a.reshape(C, Dp, Hp, Wp)[:, h : h + D, h : h + H, h : h + W].copy()
        return (crop(gf), crop(gg))

    return _node(out, (f, g), back, "correlation")


# -- box filtering ----------------------------------------------------------


def _box(arr, window):
    # zero-padded centered box sum along the three spatial axes
    h = window // 2
    out = arr
    for axis in (1, 2, 3):
        n = out.shape[axis]
        pad = [(0, 0)] * out.ndim
        pad[axis] = (h + 1, h)
        cs = np.cumsum(np.pad(out, pad), axis=axis)
        hi = [slice(None)] * out.ndim
        lo = [slice(None)] * out.ndim
        hi[axis] = slice(window, window + n)
        lo[axis] = slice(0, n)
        out = cs[tuple(hi)] - cs[tuple(lo)]
    return out


def window_count(dims, window) -> np.ndarray:
    """Number of in-grid voxels in the centered ``window**3`` box around each voxel."""
    return _box(np.ones((1,) + tuple(dims)), window)[0]


def box_sum(a, window):
    """Sum over a centered ``window**3`` neighbourhood with zero padding.

    The operator is self-adjoint, so backward applies it to the gradient.
    """
    if window < 1 or window % 2 == 0:
        raise ContractError("box window must be a positive odd integer")
    return _node(_box(a.data, window), (a,), lambda g: (_box(g, window),), "box_sum")
