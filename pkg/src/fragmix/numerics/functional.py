"""Differentiable operations over :class:`Tensor`.

Broadcasting is deliberately narrow: an operand may be a scalar, or its
shape must right-align with the other operand's shape using size-1 axes,
and the result shape must equal one of the two inputs. That covers bias
vectors, per-channel ``(C, 1, 1)`` scales and learnable scalars.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, DimensionError
from .kernels import col2im, im2col, out_size
from .tensor import Tensor, as_tensor


def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for tensor of rank {ndim}")
    return axis % ndim


def _axes(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (_axis(axis, ndim),)
    return tuple(sorted(_axis(a, ndim) for a in axis))


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        shape = np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a} and {b}") from None
    if shape != a and shape != b:
        raise DimensionError(f"two-sided broadcasting of {a} and {b} is not supported")
    return shape


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


def _coerce(a, b):
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    if a_t and not b_t:
        b = as_tensor(np.asarray(b, dtype=a.dtype))
    elif b_t and not a_t:
        a = as_tensor(np.asarray(a, dtype=b.dtype))
    elif not a_t and not b_t:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, (a, b), backward)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        return (g * s,)

    return Tensor._from_op(x.data * x.dtype.type(s), (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return Tensor._from_op(ad @ bd, (a, b), backward)


# -- elementwise nonlinearities ---------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), backward)


def square(x: Tensor) -> Tensor:
    xd = x.data

    def backward(g):
        return (2 * g * xd,)

    return Tensor._from_op(xd * xd, (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)

    def backward(g):
        return (g / (2 * y),)

    return Tensor._from_op(y, (x,), backward)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    mask = x.data > lo

    def backward(g):
        return (g * mask,)

    return Tensor._from_op(np.maximum(x.data, x.dtype.type(lo)), (x,), backward)


def log(x: Tensor) -> Tensor:
    xd = x.data

    def backward(g):
        return (g / xd,)

    return Tensor._from_op(np.log(xd), (x,), backward)


def star_relu(x: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """``a * relu(x)**2 + b`` with scalar tensors ``a`` and ``b``."""
    if a.size != 1 or b.size != 1:
        raise DimensionError(f"StarReLU parameters must be scalars, got {a.shape} and {b.shape}")
    r = np.maximum(x.data, 0)
    r2 = r * r
    ad = a.data.reshape(())

    def backward(g):
        return (
            g * (2 * ad) * r,
            np.asarray((g * r2).sum(), dtype=a.dtype).reshape(a.shape),
            np.asarray(g.sum(), dtype=b.dtype).reshape(b.shape),
        )

    out = (ad * r2 + b.data.reshape(())).astype(x.dtype, copy=False)
    return Tensor._from_op(out, (x, a, b), backward)


# -- reductions & normalisation -----------------------------------------------


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    axes = _axes(axis, x.ndim)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return Tensor._from_op(np.asarray(x.data.mean(axis=axes, keepdims=keepdims)), (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _axis(axis, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return Tensor._from_op(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _axis(axis, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=ax, keepdims=True),)

    return Tensor._from_op(y, (x,), backward)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """``v / max(||v||, eps)`` along ``axis``."""
    ax = _axis(axis, x.ndim)
    norm = np.sqrt((x.data * x.data).sum(axis=ax, keepdims=True))
    denom = np.maximum(norm, x.dtype.type(eps))
    y = x.data / denom
    active = norm > eps

    def backward(g):
        proj = (g * y).sum(axis=ax, keepdims=True)
        return (np.where(active, g - y * proj, g) / denom,)

    return Tensor._from_op(y, (x,), backward)


def layer_norm(x: Tensor, axis: int, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise along ``axis`` then apply the affine ``gamma``/``beta``."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be > 0, got {eps}")
    ax = _axis(axis, x.ndim)
    c = x.shape[ax]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match axis extent {c}"
        )
    bshape = [1] * x.ndim
    bshape[ax] = c
    gd = gamma.data.reshape(bshape)
    mu = x.data.mean(axis=ax, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    other = tuple(i for i in range(x.ndim) if i != ax)

    def backward(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=ax, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=ax, keepdims=True)
        )
        dgamma = (g * xhat).sum(axis=other)
        dbeta = g.sum(axis=other)
        return dx, dgamma, dbeta

    y = xhat * gd + beta.data.reshape(bshape)
    return Tensor._from_op(y, (x, gamma, beta), backward)


# -- shape manipulation --------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from None
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    return Tensor._from_op(np.ascontiguousarray(y), (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(_axis(a, x.ndim) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return Tensor._from_op(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward)


def take(x: Tensor, index) -> Tensor:
    """Fancy-index ``x.data[index]``; scattered-add backward."""
    y = x.data[index]
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return Tensor._from_op(np.array(y, copy=True), (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the identity outside training."""
    if not 0 <= p < 1:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)

    def backward(g):
        return (g * keep,)

    return Tensor._from_op(x.data * keep, (x,), backward)


# -- convolution ----------------------------------------------------------------


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-D cross-correlation over NCHW input, via im2col."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if groups < 1 or c % groups or o % groups:
        raise ConfigError(f"channels in={c}, out={o} are not divisible by groups={groups}")
    if cg != c // groups:
        raise DimensionError(f"weight expects {cg} channels per group, input provides {c // groups}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"invalid stride={stride} / padding={padding}")
    oh, ow = out_size(h, kh, stride, padding), out_size(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"bias shape {bias.shape} does not match {o} output channels")

    g_, og, k = groups, o // groups, kh * kw
    L = oh * ow
    cols = im2col(x.data, kh, kw, stride, padding)  # (n, c, k, L)
    depthwise = cg == 1 and og == 1
    if depthwise:
        wk = weight.data.reshape(1, c, k, 1)
        out = (cols * wk).sum(axis=2)  # (n, c, L)
    elif groups == 1:
        w2 = weight.data.reshape(o, c * k)
        out = np.matmul(w2, cols.reshape(n, c * k, L))
    else:
        wg = weight.data.reshape(g_, og, cg * k)
        out = np.matmul(wg[None], cols.reshape(n, g_, cg * k, L)).reshape(n, o, L)
    out = out.reshape(n, o, oh, ow)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    wshape, xshape = weight.shape, x.shape
    wd = weight.data

    def backward(gout):
        gl = gout.reshape(n, o, L)
        if depthwise:
            dw = np.einsum("nckl,ncl->ck", cols, gl).reshape(wshape)
            dcols = wd.reshape(1, c, k, 1) * gl[:, :, None, :]
        elif groups == 1:
            c2 = cols.reshape(n, c * k, L)
            dw = np.einsum("nol,nkl->ok", gl, c2).reshape(wshape)
            dcols = np.matmul(wd.reshape(o, c * k).T, gl).reshape(n, c, k, L)
        else:
            c3 = cols.reshape(n, g_, cg * k, L)
            g3 = gl.reshape(n, g_, og, L)
            dw = np.einsum("ngol,ngkl->gok", g3, c3).reshape(wshape)
            dcols = np.matmul(wd.reshape(g_, og, cg * k).transpose(0, 2, 1)[None], g3)
            dcols = dcols.reshape(n, c, k, L)
        dx = col2im(np.ascontiguousarray(dcols), xshape, kh, kw, stride, padding)
        grads = [dx, dw]
        if bias is not None:
            grads.append(gout.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)
