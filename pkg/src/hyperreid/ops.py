"""Differentiable primitives over Tensor.

Each operation computes its forward value eagerly with numpy and, when a
Tape is active and an input requires gradients, records a closure holding
the backward rule. Elementwise operations broadcast numpy-style; matmul
broadcasts leading (stack) dimensions. Gradients for broadcast operands are
reduced back to the operand shape by summation.
"""

from __future__ import annotations

import numpy as np

from .tensor import (DecompositionError, NumericsError, ShapeError, Tape,
                     Tensor)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(name, data, inputs, backward, ste=False) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data.sum()):
        raise NumericsError(f"{name}: non-finite values in forward output")
    tape = Tape.active()
    out = Tensor(data)
    if tape is not None and any(
            isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, tuple(inputs), backward, name, ste)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _unbroadcast_stack(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Like _unbroadcast but leaves the trailing two (matrix) dims alone."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i in range(len(shape) - 2) if shape[i] == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make("add", a.data + b.data, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _make("sub", a.data - b.data, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make("mul", a.data * b.data, (a, b), bwd)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    def bwd(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _make("div", a.data / b.data, (a, b), bwd)


def neg(a):
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,),
                 lambda g: (g * mask,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def absolute(a):
    a = as_tensor(a)
    return _make("absolute", np.abs(a.data), (a,),
                 lambda g: (g * np.sign(a.data),))


def power(a, exponent: float):
    """Elementwise a**exponent for a fixed scalar exponent."""
    a = as_tensor(a)
    p = float(exponent)
    out = a.data ** p
    return _make("power", out, (a,),
                 lambda g: (g * p * a.data ** (p - 1.0),))


def clamp_min(a, floor: float):
    a = as_tensor(a)
    mask = a.data > floor
    return _make("clamp_min", np.maximum(a.data, floor), (a,),
                 lambda g: (g * mask,))


# -- structural -------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast_stack(ga, a.shape), _unbroadcast_stack(gb, b.shape)
    return _make("matmul", a.data @ b.data, (a, b), bwd)


def transpose(a, axes=None):
    """Permute axes; default swaps the trailing two."""
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inverse),))


def reshape(a, shape):
    a = as_tensor(a)
    orig = a.shape
    return _make("reshape", a.data.reshape(shape), (a,),
                 lambda g: (g.reshape(orig),))


def concat(tensors, axis: int = -1):
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)
    def bwd(g):
        g = np.moveaxis(g, axis, 0)
        return tuple(np.moveaxis(g[offsets[i]:offsets[i + 1]], 0, axis)
                     for i in range(len(ts)))
    return _make("concat", np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bwd)


def slice_axis(a, axis: int, start: int, stop: int):
    a = as_tensor(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    def bwd(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)
    return _make("slice_axis", a.data[index].copy(), (a,), bwd)


def sum_(a, axis=None, keepdims: bool = False):
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make("sum", out, (a,), bwd)


def mean(a, axis=None, keepdims: bool = False):
    a = as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.size / max(out.size, 1)
    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)
    return _make("mean", out, (a,), bwd)


# -- row-structured ----------------------------------------------------------

def softmax_rows(a):
    """Softmax along the last axis, computed with max subtraction."""
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    def bwd(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)
    return _make("softmax_rows", out, (a,), bwd)


def l2_normalize_rows(a, eps: float = 1e-12):
    a = as_tensor(a)
    norm = np.sqrt(np.sum(a.data * a.data, axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    out = a.data / norm
    def bwd(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return ((g - out * inner) / norm,)
    return _make("l2_normalize_rows", out, (a,), bwd)


def step_straight_through(a, clip: float = 1.0):
    """Hard 0/1 threshold at zero; backward is clipped-identity.

    The gradient passes unchanged where the pre-activation magnitude is
    <= clip and is zeroed elsewhere, so |g_in| <= |g_out| entrywise. This
    op is exempt from finite-difference equality by design.
    """
    a = as_tensor(a)
    passthrough = np.abs(a.data) <= clip
    return _make("step_straight_through", (a.data > 0).astype(np.float64),
                 (a,), lambda g: (g * passthrough,), ste=True)


# -- factorizations ----------------------------------------------------------

def _solve_tri(l: np.ndarray, b: np.ndarray, transposed: bool) -> np.ndarray:
    """Stacked triangular solve by substitution over the small last dims.

    Solves L X = B (or L^T X = B when transposed) for lower-triangular L of
    shape (..., C, C) and B of shape (..., C, K). Never forms an inverse.
    """
    c = l.shape[-1]
    x = np.zeros(np.broadcast_shapes(l.shape[:-2] + b.shape[-2:], b.shape),
                 dtype=np.float64)
    bb = np.broadcast_to(b, x.shape)
    if not transposed:
        for j in range(c):
            acc = np.einsum("...k,...kn->...n", l[..., j, :j], x[..., :j, :])
            x[..., j, :] = (bb[..., j, :] - acc) / l[..., j, j][..., None]
    else:
        for j in range(c - 1, -1, -1):
            acc = np.einsum("...k,...kn->...n", l[..., j + 1:, j], x[..., j + 1:, :])
            x[..., j, :] = (bb[..., j, :] - acc) / l[..., j, j][..., None]
    return x


def solve_lower_triangular(l, b):
    """X = L^{-1} B for lower-triangular L, via forward substitution."""
    l, b = as_tensor(l), as_tensor(b)
    if l.shape[-1] != l.shape[-2] or l.shape[-1] != b.shape[-2]:
        raise ShapeError(f"triangular solve shapes {l.shape} vs {b.shape}")
    x = _solve_tri(l.data, b.data, transposed=False)
    def bwd(g):
        gb = _solve_tri(l.data, g, transposed=True)
        gl = -np.tril(gb @ np.swapaxes(x, -1, -2))
        return (_unbroadcast_stack(gl, l.shape), _unbroadcast_stack(gb, b.shape))
    return _make("solve_lower_triangular", x, (l, b), bwd)


def cholesky(a):
    """Lower-triangular L with L L^T equal to the symmetrized input.

    The input is symmetrized as (A + A^T)/2 before factoring, which is a
    no-op for the symmetric positive definite matrices the contract
    requires and makes the symmetric backward rule exact under free
    elementwise perturbation. Backward uses the standard differential
    identity through two triangular solves.
    """
    a = as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"cholesky needs square matrices, got {a.shape}")
    c = a.shape[-1]
    s = 0.5 * (a.data + np.swapaxes(a.data, -1, -2))
    l = np.zeros_like(s)
    for j in range(c):
        pivot = s[..., j, j] - np.einsum("...k,...k->...", l[..., j, :j], l[..., j, :j])
        if np.any(pivot <= 0.0):
            raise DecompositionError(f"cholesky: non-positive pivot at index {j}")
        l[..., j, j] = np.sqrt(pivot)
        if j + 1 < c:
            acc = np.einsum("...ik,...k->...i", l[..., j + 1:, :j], l[..., j, :j])
            l[..., j + 1:, j] = (s[..., j + 1:, j] - acc) / l[..., j, j][..., None]
    idx = np.arange(c)
    def bwd(g):
        lbar = np.tril(g)
        m = np.swapaxes(l, -1, -2) @ lbar
        phi = np.tril(m)
        phi[..., idx, idx] *= 0.5
        sym = phi + np.swapaxes(phi, -1, -2)
        tmp = _solve_tri(l, sym, transposed=True)            # L^{-T} sym
        full = _solve_tri(l, np.swapaxes(tmp, -1, -2), transposed=True)
        return (0.5 * np.swapaxes(full, -1, -2),)            # symmetric grad
    return _make("cholesky", l, (a,), bwd)


# -- patch extraction (convolution support) ----------------------------------

def extract_patches(x, kh: int, kw: int, stride: int = 1, pad: int = 0):
    """im2col for NHWC input: (B,H,W,C) -> (B,Ho,Wo,kh*kw*C).

    Patch channels are ordered (kh, kw, C) row-major, matching conv weight
    layout (kh*kw*C, out_channels).
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"extract_patches needs (B,H,W,C), got {x.shape}")
    b, h, w, cin = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"kernel {kh}x{kw} too large for input {x.shape}")
    padded = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    slabs = [padded[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :]
             for di in range(kh) for dj in range(kw)]
    data = np.stack(slabs, axis=3).reshape(b, ho, wo, kh * kw * cin)
    def bwd(g):
        gp = np.zeros_like(padded)
        g5 = g.reshape(b, ho, wo, kh * kw, cin)
        idx = 0
        for di in range(kh):
            for dj in range(kw):
                gp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :] += g5[:, :, :, idx, :]
                idx += 1
        return (gp[:, pad:pad + h, pad:pad + w, :],)
    return _make("extract_patches", data, (x,), bwd)


# -- composites --------------------------------------------------------------

def conv2d(x, weight, bias, kh: int, kw: int, stride: int = 1, pad: int = 1):
    """Same-family 2D convolution on NHWC via patch extraction + matmul.

    weight: (kh*kw*in_channels, out_channels); bias: (out_channels,).
    """
    patches = extract_patches(x, kh, kw, stride=stride, pad=pad)
    b, ho, wo, d = patches.shape
    flat = reshape(patches, (b, ho * wo, d))
    y = add(matmul(flat, weight), bias)
    return reshape(y, (b, ho, wo, weight.shape[-1]))


def cross_entropy_rows(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of logit rows against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy_rows: {logits.shape} vs labels {labels.shape}")
    # Constant max shift: mathematically cancels, numerically stabilizes.
    shift = Tensor(np.max(logits.data, axis=-1, keepdims=True))
    z = sub(logits, shift)
    lse = log(sum_(exp(z), axis=-1, keepdims=True))
    logp = sub(z, lse)
    onehot = Tensor(np.eye(logits.shape[-1])[labels])
    return neg(mean(sum_(mul(logp, onehot), axis=-1)))


def l1_distance(a, b) -> Tensor:
    """Rowwise L1 distance along the last axis."""
    return sum_(absolute(sub(a, b)), axis=-1)


# -- Tensor ergonomics -------------------------------------------------------

Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__truediv__ = lambda self, other: div(self, other)
Tensor.__rtruediv__ = lambda self, other: div(other, self)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__matmul__ = lambda self, other: matmul(self, other)
Tensor.t = lambda self: transpose(self)
Tensor.reshape = lambda self, shape: reshape(self, shape)
Tensor.sum = lambda self, axis=None, keepdims=False: sum_(self, axis, keepdims)
Tensor.mean = lambda self, axis=None, keepdims=False: mean(self, axis, keepdims)
Tensor.relu = lambda self: relu(self)
Tensor.exp = lambda self: exp(self)
Tensor.log = lambda self: log(self)
Tensor.abs = lambda self: absolute(self)
