"""Forward computations and backward rules for every op-kind.

Each op-kind is an :class:`OpDef` in the ``OPS`` registry. ``apply`` runs the
forward on raw arrays and, when any input is tracked, records the node so
:func:`unfoldldm.tensor.tensor.backward` can call the matching rule.

Shapes never broadcast, with one exception: a single-element tensor may be
combined elementwise with a tensor of any shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import erfc

from unfoldldm.errors import ShapeError
from unfoldldm.tensor import kernels
from unfoldldm.tensor.tensor import Tensor, as_tensor, grad_enabled

LAYER_NORM_EPS = 1e-6
NORMALIZE_EPS = 1e-12
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass
class OpDef:
    name: str
    forward: Callable
    backward: Callable


OPS: dict[str, OpDef] = {}


def register(name: str):
    def deco(pair):
        fwd, bwd = pair
        OPS[name] = OpDef(name, fwd, bwd)
        return pair
    return deco


def apply(kind: str, *inputs, **attrs) -> Tensor:
    op = OPS[kind]
    tensors = [as_tensor(t) for t in inputs]
    out_data, ctx = op.forward(*[t.data for t in tensors], **attrs)
    out = Tensor(out_data)
    if grad_enabled() and any(t.requires_grad or t.kind is not None for t in tensors):
        out.kind = kind
        out.parents = tuple(tensors)
        out.ctx = ctx
    return out


def _is_scalar(a: np.ndarray) -> bool:
    return a.size == 1 and a.ndim <= 1


def _check_elementwise(op: str, a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(op, f"shapes {a.shape} and {b.shape} differ (only scalar broadcasting is allowed)")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape).astype(g.dtype, copy=False)


# ---------------------------------------------------------------- elementwise

def _add_f(a, b):
    _check_elementwise("add", a, b)
    return a + b, (a.shape, b.shape)


def _add_b(g, ctx):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


register("add")((_add_f, _add_b))


def _sub_f(a, b):
    _check_elementwise("sub", a, b)
    return a - b, (a.shape, b.shape)


def _sub_b(g, ctx):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(-g, sb)


register("sub")((_sub_f, _sub_b))


def _mul_f(a, b):
    _check_elementwise("mul", a, b)
    return a * b, (a, b)


def _mul_b(g, ctx):
    a, b = ctx
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


register("mul")((_mul_f, _mul_b))


def _div_f(a, b):
    _check_elementwise("div", a, b)
    out = a / b
    return out, (a, b, out)


def _div_b(g, ctx):
    a, b, out = ctx
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)


register("div")((_div_f, _div_b))


def _scalar_mul_f(a, c: float):
    return a * c, c


register("scalar_mul")((_scalar_mul_f, lambda g, c: (g * c,)))


def _gelu_f(x):
    cdf = 0.5 * erfc(-x / _SQRT2)  # erfc keeps the far negative tail accurate
    return x * cdf, (x, cdf)


def _gelu_b(g, ctx):
    x, cdf = ctx
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (g * (cdf + x * pdf)).astype(x.dtype, copy=False),


register("gelu")((_gelu_f, _gelu_b))


def _softplus_f(x):
    with np.errstate(invalid="ignore"):
        out = np.logaddexp(0.0, x).astype(x.dtype, copy=False)
    return out, x


def _softplus_b(g, x):
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return (g * sig).astype(x.dtype, copy=False),


register("softplus")((_softplus_f, _softplus_b))


def _softmax_f(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return y, y


def _softmax_b(g, y):
    return y * (g - (g * y).sum(axis=-1, keepdims=True)),


register("softmax")((_softmax_f, _softmax_b))


# ---------------------------------------------------------------- reductions

def _sum_f(x):
    return np.asarray(x.sum(), dtype=x.dtype), x.shape


register("sum")((_sum_f, lambda g, shape: (np.broadcast_to(g, shape).copy(),)))


def _mean_f(x):
    return np.asarray(x.mean(), dtype=x.dtype), x.shape


def _mean_b(g, shape):
    n = int(np.prod(shape))
    return (np.broadcast_to(g / n, shape).copy(),)


register("mean")((_mean_f, _mean_b))


def _l1_sum_f(x):
    return np.asarray(np.abs(x).sum(), dtype=x.dtype), x


register("l1_sum")((_l1_sum_f, lambda g, x: (g * np.sign(x),)))


def _mean_pool_f(x):
    if x.ndim != 4:
        raise ShapeError("mean_pool", f"expected N x C x H x W input, got {x.shape}")
    return x.mean(axis=(2, 3)), x.shape


def _mean_pool_b(g, shape):
    n, c, h, w = shape
    return (np.broadcast_to((g / (h * w))[:, :, None, None], shape).copy(),)


register("mean_pool")((_mean_pool_f, _mean_pool_b))


def _l2_norm_f(x, axes=(-2, -1)):
    n = np.sqrt((x * x).sum(axis=axes, keepdims=True))
    return np.squeeze(n, axis=axes), (x, n, axes)


def _l2_norm_b(g, ctx):
    x, n, axes = ctx
    safe = np.where(n > 0, n, 1.0)
    return (np.expand_dims(g, axes) * np.where(n > 0, x / safe, 0.0)).astype(x.dtype, copy=False),


register("l2_norm")((_l2_norm_f, _l2_norm_b))


def _normalize_f(x, axes=(-2, -1), eps=NORMALIZE_EPS):
    n = np.sqrt((x * x).sum(axis=axes, keepdims=True))
    d = np.maximum(n, eps)
    y = x / d
    return y, (y, d, n > eps, axes)


def _normalize_b(g, ctx):
    y, d, active, axes = ctx
    proj = (g * y).sum(axis=axes, keepdims=True)
    return np.where(active, (g - y * proj) / d, g / d).astype(y.dtype, copy=False),


register("normalize")((_normalize_f, _normalize_b))


def _layer_norm_f(x, gamma, beta, axis=1, eps=LAYER_NORM_EPS):
    if gamma.shape != (x.shape[axis],) or beta.shape != gamma.shape:
        raise ShapeError(
            "layer_norm",
            f"affine params {gamma.shape}/{beta.shape} do not match axis {axis} of {x.shape}",
        )
    bshape = [1] * x.ndim
    bshape[axis] = x.shape[axis]
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gb = gamma.reshape(bshape)
    return xhat * gb + beta.reshape(bshape), (xhat, inv, gb, axis)


def _layer_norm_b(g, ctx):
    xhat, inv, gb, axis = ctx
    red = tuple(i for i in range(g.ndim) if i != axis)
    dgamma = (g * xhat).sum(axis=red)
    dbeta = g.sum(axis=red)
    gx = g * gb
    dx = inv * (gx - gx.mean(axis=axis, keepdims=True)
                - xhat * (gx * xhat).mean(axis=axis, keepdims=True))
    return dx, dgamma, dbeta


register("layer_norm")((_layer_norm_f, _layer_norm_b))


# ---------------------------------------------------------------- shape ops

def _reshape_f(x, shape):
    try:
        return x.reshape(shape), x.shape
    except ValueError as exc:
        raise ShapeError("reshape", f"cannot reshape {x.shape} into {tuple(shape)}") from exc


register("reshape")((_reshape_f, lambda g, shape: (g.reshape(shape),)))


def _transpose_f(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", f"axes {axes} invalid for rank {x.ndim}")
    return np.ascontiguousarray(x.transpose(axes)), tuple(np.argsort(axes))


register("transpose")((_transpose_f, lambda g, inv: (np.ascontiguousarray(g.transpose(inv)),)))


def _concat_f(*xs, axis=1):
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis % len(ref)):
            raise ShapeError("concat", f"cannot join {ref} and {x.shape} along axis {axis}")
    sizes = [x.shape[axis] for x in xs]
    return np.concatenate(xs, axis=axis), (sizes, axis)


def _concat_b(g, ctx):
    sizes, axis = ctx
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.ascontiguousarray(p) for p in np.split(g, cuts, axis=axis))


register("concat")((_concat_f, _concat_b))


def _split_f(x, axis, start, stop):
    if not (0 <= start < stop <= x.shape[axis]):
        raise ShapeError("split", f"range [{start}, {stop}) outside axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    return np.ascontiguousarray(x[tuple(idx)]), (x.shape, x.dtype, tuple(idx))


def _split_b(g, ctx):
    shape, dtype, idx = ctx
    out = np.zeros(shape, dtype=g.dtype)
    out[idx] = g
    return out,


register("split")((_split_f, _split_b))


def _reflect_index(n: int, p: int) -> np.ndarray:
    """Source index of each padded position, as numpy's reflect padding picks it.

    A length-1 axis reflects onto itself, which amounts to edge replication.
    """
    return np.pad(np.arange(n), p, mode="reflect") if n > 1 else np.zeros(n + 2 * p, dtype=int)


def _fold(g, src, n, axis):
    """Adjoint of gathering ``src`` along ``axis``: sum padded slices back onto ``n`` entries."""
    g = np.moveaxis(g, axis, 0)
    p = (len(src) - n) // 2
    out = g[p:p + n].copy()
    for i in [*range(p), *range(p + n, n + 2 * p)]:
        out[src[i]] += g[i]
    return np.moveaxis(out, 0, axis)


def _pad_f(x, p=1):
    h, w = x.shape[-2:]
    if p >= h and h > 1 or p >= w and w > 1:
        raise ShapeError("pad", f"reflect padding {p} needs spatial extents > {p}, got {x.shape}")
    rows, cols = _reflect_index(h, p), _reflect_index(w, p)
    return x[..., rows, :][..., cols], (rows, cols, h, w)


def _pad_b(g, ctx):
    rows, cols, h, w = ctx
    return _fold(_fold(g, cols, w, -1), rows, h, -2),


register("pad")((_pad_f, _pad_b))


# ---------------------------------------------------------------- linear algebra

def _matmul_f(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner extents of {a.shape} and {b.shape} do not conform")
    if a.ndim != b.ndim and min(a.ndim, b.ndim) != 2:
        raise ShapeError("matmul", f"leading extents of {a.shape} and {b.shape} differ")
    if a.ndim == b.ndim and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", f"leading extents of {a.shape} and {b.shape} differ")
    return a @ b, (a, b)


def _matmul_b(g, ctx):
    a, b = ctx
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    if ga.shape != a.shape:
        ga = ga.reshape(-1, *a.shape).sum(axis=0)
    if gb.shape != b.shape:
        gb = gb.reshape(-1, *b.shape).sum(axis=0)
    return ga, gb


register("matmul")((_matmul_f, _matmul_b))


def _bmm_f(a, b):
    if a.ndim < 3 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError("batched_matmul", f"operands {a.shape} and {b.shape} do not conform")
    return a @ b, (a, b)


def _bmm_b(g, ctx):
    a, b = ctx
    return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g


register("batched_matmul")((_bmm_f, _bmm_b))


def _linear_f(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError("linear", f"input {x.shape}, weight {w.shape}, bias {b.shape}")
    return x @ w.T + b, (x, w)


def _linear_b(g, ctx):
    x, w = ctx
    return g @ w, g.T @ x, g.sum(axis=0)


register("linear")((_linear_f, _linear_b))


def _modulate_f(x, scale, shift):
    if x.ndim != 4 or scale.shape != x.shape[:2] or shift.shape != x.shape[:2]:
        raise ShapeError("modulate", f"features {x.shape}, scale {scale.shape}, shift {shift.shape}")
    return x * scale[:, :, None, None] + shift[:, :, None, None], (x, scale)


def _modulate_b(g, ctx):
    x, scale = ctx
    return g * scale[:, :, None, None], (g * x).sum(axis=(2, 3)), g.sum(axis=(2, 3))


register("modulate")((_modulate_f, _modulate_b))


# ---------------------------------------------------------------- convolutions

def _conv2d_f(x, w, b, stride=1, groups=1):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-d input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, k, k2 = w.shape
    if k != k2 or b.shape != (o,):
        raise ShapeError("conv2d", f"weight {w.shape} / bias {b.shape} malformed")
    if groups == 1:
        if ci != c:
            raise ShapeError("conv2d", f"weight expects {ci} input channels, input has {c}")
    elif groups == c:
        if ci != 1 or o != c:
            raise ShapeError("conv2d", f"depthwise weight must be {c}x1x{k}x{k}, got {w.shape}")
    else:
        raise ShapeError("conv2d", f"groups must be 1 or {c}, got {groups}")
    if h < k or wd < k:
        raise ShapeError("conv2d", f"kernel {k} larger than input extents {h}x{wd}")
    ho = (h - k) // stride + 1
    wo = (wd - k) // stride + 1

    if groups == 1 and k == 1 and stride == 1:
        out = (w.reshape(o, c) @ x.reshape(n, c, h * wd)).reshape(n, o, h, wd)
        return out + b[None, :, None, None], ("pw", x, w)

    if groups != 1:
        if stride != 1:
            raise ShapeError("conv2d", "depthwise convolution supports stride 1 only")
        out = kernels.depthwise(x, w[:, 0])
        return out + b[None, :, None, None], ("dw", x, w)

    slices = [
        (slice(None), slice(None), slice(i, i + stride * (ho - 1) + 1, stride),
         slice(j, j + stride * (wo - 1) + 1, stride))
        for i in range(k) for j in range(k)
    ]
    cols = np.empty((n, c, k * k, ho * wo), dtype=np.result_type(x, w))
    for idx, sl in enumerate(slices):
        cols[:, :, idx, :] = x[sl].reshape(n, c, ho * wo)
    cols = cols.reshape(n, c * k * k, ho * wo)
    out = (w.reshape(o, c * k * k) @ cols).reshape(n, o, ho, wo)
    return out + b[None, :, None, None], ("dense", x.shape, w, cols, slices)


def _conv2d_b(g, ctx):
    mode = ctx[0]
    gb = g.sum(axis=(0, 2, 3))
    if mode == "pw":
        _, x, w = ctx
        n, c, h, wd = x.shape
        o = w.shape[0]
        g2 = g.reshape(n, o, h * wd)
        gx = (w.reshape(o, c).T @ g2).reshape(x.shape)
        gw = np.tensordot(g2, x.reshape(n, c, h * wd), axes=([0, 2], [0, 2])).reshape(w.shape)
        return gx, gw, gb
    if mode == "dense":
        _, xshape, w, cols, slices = ctx
        n, c = xshape[:2]
        o, _, k, _ = w.shape
        g2 = g.reshape(n, o, -1)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        gcols = (w.reshape(o, -1).T @ g2).reshape(n, c, k * k, *g.shape[2:])
        gx = np.zeros(xshape, dtype=g.dtype)
        for idx, sl in enumerate(slices):
            gx[sl] += gcols[:, :, idx]
        return gx, gw, gb
    _, x, w = ctx
    gx, gw = kernels.depthwise_grad(x, w[:, 0], g)
    return gx, gw[:, None], gb


register("conv2d")((_conv2d_f, _conv2d_b))


def _conv_t_f(x, w, b):
    # kernel 2, stride 2: every input pixel writes its own 2x2 output block
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != x.shape[1] or w.shape[2:] != (2, 2):
        raise ShapeError("conv_transpose2d", f"input {x.shape} incompatible with weight {w.shape}")
    n, c, h, wd = x.shape
    o = w.shape[1]
    if b.shape != (o,):
        raise ShapeError("conv_transpose2d", f"bias {b.shape} does not match {o} outputs")
    y = w.reshape(c, o * 4).T @ x.reshape(n, c, h * wd)
    y = y.reshape(n, o, 2, 2, h, wd).transpose(0, 1, 4, 2, 5, 3).reshape(n, o, 2 * h, 2 * wd)
    return y + b[None, :, None, None], (x, w)


def _conv_t_b(g, ctx):
    x, w = ctx
    n, c, h, wd = x.shape
    o = w.shape[1]
    g2 = g.reshape(n, o, h, 2, wd, 2).transpose(0, 1, 3, 5, 2, 4).reshape(n, o * 4, h * wd)
    gx = (w.reshape(c, o * 4) @ g2).reshape(x.shape)
    gw = np.tensordot(x.reshape(n, c, h * wd), g2, axes=([0, 2], [0, 2])).reshape(w.shape)
    return gx, gw, g.sum(axis=(0, 2, 3))


register("conv_transpose2d")((_conv_t_f, _conv_t_b))


# ---------------------------------------------------------------- public wrappers

def add(a, b): return apply("add", a, b)
def sub(a, b): return apply("sub", a, b)
def mul(a, b): return apply("mul", a, b)
def div(a, b): return apply("div", a, b)
def scalar_mul(a, c: float): return apply("scalar_mul", a, c=float(c))
def gelu(x): return apply("gelu", x)
def softplus(x): return apply("softplus", x)
def softmax(x): return apply("softmax", x)
def sum_all(x): return apply("sum", x)
def mean_all(x): return apply("mean", x)
def l1_sum(x): return apply("l1_sum", x)
def mean_pool(x): return apply("mean_pool", x)
def l2_norm(x, axes=(-2, -1)): return apply("l2_norm", x, axes=tuple(axes))
def normalize(x, axes=(-2, -1)): return apply("normalize", x, axes=tuple(axes))
def reshape(x, shape): return apply("reshape", x, shape=tuple(shape))
def transpose(x, axes=None): return apply("transpose", x, axes=None if axes is None else tuple(axes))
def concat(xs, axis=1): return apply("concat", *xs, axis=axis)
def matmul(a, b): return apply("matmul", a, b)
def batched_matmul(a, b): return apply("batched_matmul", a, b)
def linear(x, w, b): return apply("linear", x, w, b)
def modulate(x, scale, shift): return apply("modulate", x, scale, shift)
def pad(x, p=1): return apply("pad", x, p=p)
def conv_transpose2d(x, w, b): return apply("conv_transpose2d", x, w, b)


def layer_norm(x, gamma, beta, axis=1):
    return apply("layer_norm", x, gamma, beta, axis=axis)


def conv2d(x, w, b, stride=1, groups=1):
    return apply("conv2d", x, w, b, stride=stride, groups=groups)


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def split(x, sizes, axis=1):
    """Cut ``x`` along ``axis`` into consecutive pieces of the given sizes."""
    if sum(sizes) != x.shape[axis]:
        raise ShapeError("split", f"sizes {sizes} do not sum to extent {x.shape[axis]} of axis {axis}")
    out, start = [], 0
    for s in sizes:
        out.append(apply("split", x, axis=axis, start=start, stop=start + s))
        start += s
    return out
