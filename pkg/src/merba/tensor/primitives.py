"""Forward/backward/shape rules for every primitive the network uses.

Layout convention for images is N x H x W x C.  Elementwise binary ops follow
numpy broadcasting; gradients are summed back to the input shape.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from .core import REQUIRED, Primitive, ShapeError, register

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(name, a, b):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a} and {b} are not compatible") from None


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


class _Binary(Primitive):
    n_inputs = 2
    attrs = {}

    def shape(self, shapes):
        return _broadcast_shape(self.name, *shapes)


@register
class Add(_Binary):
    name = "add"

    def forward(self, xs):
        a, b = xs
        return a + b, (a.shape, b.shape)

    def backward(self, ctx, g):
        sa, sb = ctx
        return _unbroadcast(g, sa), _unbroadcast(g, sb)


@register
class Sub(_Binary):
    name = "sub"

    def forward(self, xs):
        a, b = xs
        return a - b, (a.shape, b.shape)

    def backward(self, ctx, g):
        sa, sb = ctx
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)


@register
class Mul(_Binary):
    name = "mul"

    def forward(self, xs):
        a, b = xs
        return a * b, (a, b)

    def backward(self, ctx, g):
        a, b = ctx
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@register
class Div(_Binary):
    name = "div"

    def forward(self, xs):
        a, b = xs
        return a / b, (a, b)

    def backward(self, ctx, g):
        a, b = ctx
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


class _Unary(Primitive):
    n_inputs = 1
    attrs = {}

    def shape(self, shapes):
        return shapes[0]


@register
class Neg(_Unary):
    name = "neg"

    def forward(self, xs):
        return -xs[0], None

    def backward(self, ctx, g):
        return (-g,)


@register
class Exp(_Unary):
    name = "exp"

    def forward(self, xs):
        y = np.exp(xs[0])
        return y, y

    def backward(self, y, g):
        return (g * y,)


@register
class Log(_Unary):
    name = "log"

    def forward(self, xs):
        return np.log(xs[0]), xs[0]

    def backward(self, x, g):
        return (g / x,)


@register
class Relu(_Unary):
    name = "relu"

    def forward(self, xs):
        x = xs[0]
        return np.maximum(x, 0), x > 0

    def backward(self, mask, g):
        return (g * mask,)


@register
class Silu(_Unary):
    name = "silu"

    def forward(self, xs):
        x = xs[0]
        s = expit(x)
        return x * s, (x, s)

    def backward(self, ctx, g):
        x, s = ctx
        return (g * (s * (1 + x * (1 - s))),)


@register
class Gelu(_Unary):
    """Exact (erf) GELU."""

    name = "gelu"

    def forward(self, xs):
        x = xs[0]
        cdf = 0.5 * (1.0 + erf(x / _SQRT2))
        return (x * cdf).astype(x.dtype, copy=False), (x, cdf)

    def backward(self, ctx, g):
        x, cdf = ctx
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)


@register
class Softplus(_Unary):
    name = "softplus"

    def forward(self, xs):
        x = xs[0]
        return np.logaddexp(0, x).astype(x.dtype, copy=False), x

    def backward(self, x, g):
        return ((g * expit(x)).astype(x.dtype, copy=False),)


@register
class Sum(Primitive):
    name = "sum"
    n_inputs = 1
    attrs = {"axis": None, "keepdims": False}

    def shape(self, shapes, axis, keepdims):
        (s,) = shapes
        axes = _norm_axis(axis, len(s))
        if keepdims:
            return tuple(1 if i in axes else n for i, n in enumerate(s))
        return tuple(n for i, n in enumerate(s) if i not in axes)

    def forward(self, xs, axis, keepdims):
        x = xs[0]
        axes = _norm_axis(axis, x.ndim)
        return np.asarray(x.sum(axis=axes, keepdims=keepdims)), (x.shape, axes)

    def backward(self, ctx, g, axis, keepdims):
        shape, axes = ctx
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)


@register
class Mean(Sum):
    name = "mean"

    def forward(self, xs, axis, keepdims):
        x = xs[0]
        axes = _norm_axis(axis, x.ndim)
        return np.asarray(x.mean(axis=axes, keepdims=keepdims)), (x.shape, axes)

    def backward(self, ctx, g, axis, keepdims):
        shape, axes = ctx
        count = int(np.prod([shape[a] for a in axes]))
        (gx,) = super().backward(ctx, g, axis, keepdims)
        return (gx / count,)


@register
class Reshape(Primitive):
    name = "reshape"
    n_inputs = 1
    attrs = {"shape": REQUIRED}

    def shape(self, shapes, shape):
        (s,) = shapes
        size = int(np.prod(s))
        shape = list(shape)
        if shape.count(-1) == 1:
            known = int(np.prod([n for n in shape if n != -1]))
            if known == 0 or size % known:
                raise ShapeError(f"reshape: cannot view {s} as {tuple(shape)}")
            shape[shape.index(-1)] = size // known
        if int(np.prod(shape)) != size:
            raise ShapeError(f"reshape: cannot view {s} as {tuple(shape)}")
        return tuple(shape)

    def forward(self, xs, shape):
        x = xs[0]
        return x.reshape(self.shape([x.shape], shape)), x.shape

    def backward(self, in_shape, g, shape):
        return (g.reshape(in_shape),)


@register
class Transpose(Primitive):
    name = "transpose"
    n_inputs = 1
    attrs = {"axes": REQUIRED}

    def shape(self, shapes, axes):
        (s,) = shapes
        if sorted(axes) != list(range(len(s))):
            raise ShapeError(f"transpose: axes {axes} invalid for shape {s}")
        return tuple(s[a] for a in axes)

    def forward(self, xs, axes):
        return np.ascontiguousarray(xs[0].transpose(axes)), None

    def backward(self, ctx, g, axes):
        return (g.transpose(np.argsort(axes)),)


@register
class Concat(Primitive):
    name = "concat"
    attrs = {"axis": REQUIRED}

    def shape(self, shapes, axis):
        ref = list(shapes[0])
        ax = axis % len(ref)
        total = 0
        for s in shapes:
            if len(s) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(s, ref)) if i != ax):
                raise ShapeError(f"concat: shapes {tuple(ref)} and {tuple(s)} differ off axis {axis}")
            total += s[ax]
        ref[ax] = total
        return tuple(ref)

    def forward(self, xs, axis):
        return np.concatenate(xs, axis=axis), [x.shape[axis] for x in xs]

    def backward(self, sizes, g, axis):
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, cuts, axis=axis))


@register
class Slice(Primitive):
    name = "slice"
    n_inputs = 1
    attrs = {"axis": REQUIRED, "start": REQUIRED, "stop": REQUIRED}

    def shape(self, shapes, axis, start, stop):
        s = list(shapes[0])
        ax = axis % len(s)
        if not 0 <= start < stop <= s[ax]:
            raise ShapeError(f"slice: [{start}:{stop}] out of range for extent {s[ax]}")
        s[ax] = stop - start
        return tuple(s)

    def forward(self, xs, axis, start, stop):
        x = xs[0]
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, stop)
        return x[tuple(idx)].copy(), (x.shape, tuple(idx))

    def backward(self, ctx, g, axis, start, stop):
        shape, idx = ctx
        gx = np.zeros(shape, dtype=g.dtype)
        gx[idx] = g
        return (gx,)


@register
class Take(Primitive):
    """Gather along one axis with a fixed integer index array."""

    name = "take"
    n_inputs = 1
    attrs = {"indices": REQUIRED, "axis": REQUIRED}

    def shape(self, shapes, indices, axis):
        s = list(shapes[0])
        ax = axis % len(s)
        idx = np.asarray(indices)
        if idx.ndim != 1 or (idx.size and (idx.min() < -s[ax] or idx.max() >= s[ax])):
            raise ShapeError(f"take: indices out of range for extent {s[ax]}")
        s[ax] = idx.size
        return tuple(s)

    def forward(self, xs, indices, axis):
        x = xs[0]
        return np.take(x, indices, axis=axis), x.shape

    def backward(self, shape, g, indices, axis):
        idx = np.asarray(indices)
        ax = axis % len(shape)
        gx = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(gx, ax, 0)
        gm = np.moveaxis(g, ax, 0)
        if len(np.unique(idx)) == idx.size:
            moved[idx] = gm
        else:
            np.add.at(moved, idx, gm)
        return (gx,)


@register
class Matmul(Primitive):
    """Batched matrix product over the last two axes, numpy broadcasting on the rest."""

    name = "matmul"
    n_inputs = 2
    attrs = {}

    def shape(self, shapes):
        a, b = shapes
        if len(a) < 2 or len(b) < 2 or a[-1] != b[-2]:
            raise ShapeError(f"matmul: shapes {a} and {b} are not aligned")
        lead = _broadcast_shape("matmul", a[:-2], b[:-2])
        return tuple(lead) + (a[-2], b[-1])

    def forward(self, xs):
        a, b = xs
        return a @ b, (a, b)

    def backward(self, ctx, g):
        a, b = ctx
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


@register
class Softmax(Primitive):
    name = "softmax"
    n_inputs = 1
    attrs = {"axis": -1}

    def shape(self, shapes, axis):
        return shapes[0]

    def forward(self, xs, axis):
        x = xs[0]
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        y = e / e.sum(axis=axis, keepdims=True)
        return y, y

    def backward(self, y, g, axis):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


@register
class CrossEntropy(Primitive):
    """Per-row cross-entropy from logits ``(B, K)`` against integer targets."""

    name = "cross_entropy"
    n_inputs = 1
    attrs = {"targets": REQUIRED}

    def shape(self, shapes, targets):
        (s,) = shapes
        if len(s) != 2 or len(targets) != s[0]:
            raise ShapeError(f"cross_entropy: logits {s} vs {len(targets)} targets")
        return (s[0],)

    def forward(self, xs, targets):
        z = xs[0]
        t = np.asarray(targets)
        zmax = z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
        loss = lse - z[np.arange(len(t)), t]
        p = np.exp(z - lse[:, None])
        return loss, (p, t)

    def backward(self, ctx, g, targets):
        p, t = ctx
        d = p.copy()
        d[np.arange(len(t)), t] -= 1
        return (d * g[:, None],)


@register
class LayerNorm(Primitive):
    """Normalize over the last axis, then scale and shift."""

    name = "layer_norm"
    n_inputs = 3
    attrs = {"eps": 1e-5}

    def shape(self, shapes, eps):
        x, w, b = shapes
        if tuple(w) != (x[-1],) or tuple(b) != (x[-1],):
            raise ShapeError(f"layer_norm: input {x} with affine {w}/{b}")
        return x

    def forward(self, xs, eps):
        x, w, b = xs
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        xhat = xc * inv
        return xhat * w + b, (xhat, inv, w)

    def backward(self, ctx, g, eps):
        xhat, inv, w = ctx
        lead = tuple(range(g.ndim - 1))
        gw = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gx_hat = g * w
        gx = inv * (gx_hat - gx_hat.mean(-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(-1, keepdims=True))
        return gx, gw, gb


class BatchNormState:
    """Running statistics owned by a batch-norm layer."""

    def __init__(self, channels, dtype):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


@register
class BatchNorm(Primitive):
    """Per-channel normalization over every axis but the last."""

    name = "batch_norm"
    n_inputs = 3
    attrs = {"eps": 1e-5, "momentum": 0.1, "training": REQUIRED, "state": REQUIRED}

    def shape(self, shapes, eps, momentum, training, state):
        return LayerNorm.shape(self, shapes, eps)

    def forward(self, xs, eps, momentum, training, state):
        x, w, b = xs
        axes = tuple(range(x.ndim - 1))
        if training:
            mu = x.mean(axis=axes)
            xc = x - mu
            var = (xc * xc).mean(axis=axes)
            n = x.size // x.shape[-1]
            unbiased = var * n / (n - 1) if n > 1 else var
            state.mean[...] = (1 - momentum) * state.mean + momentum * mu
            state.var[...] = (1 - momentum) * state.var + momentum * unbiased
        else:
            xc = x - state.mean
            var = state.var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        return (xhat * w + b).astype(x.dtype, copy=False), (xhat, inv, w, training)

    def backward(self, ctx, g, eps, momentum, training, state):
        xhat, inv, w, training = ctx
        axes = tuple(range(g.ndim - 1))
        gw = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gx_hat = g * w
        if training:
            gx = inv * (gx_hat - gx_hat.mean(axis=axes)
                        - xhat * (gx_hat * xhat).mean(axis=axes))
        else:
            gx = gx_hat * inv
        return gx, gw, gb


@register
class Conv2d(Primitive):
    """NHWC convolution; weight laid out as (kh, kw, C_in, C_out), optional bias."""

    name = "conv2d"
    attrs = {"stride": 1, "padding": 0}

    def shape(self, shapes, stride, padding):
        if len(shapes) not in (2, 3):
            raise ShapeError("conv2d: expects input, weight[, bias]")
        x, w = shapes[:2]
        if len(x) != 4 or len(w) != 4 or x[3] != w[2]:
            raise ShapeError(f"conv2d: input {x} incompatible with weight {w}")
        if len(shapes) == 3 and tuple(shapes[2]) != (w[3],):
            raise ShapeError(f"conv2d: bias {shapes[2]} for {w[3]} output channels")
        ho = (x[1] + 2 * padding - w[0]) // stride + 1
        wo = (x[2] + 2 * padding - w[1]) // stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d: input {x} too small for kernel {w[:2]}")
        return (x[0], ho, wo, w[3])

    def forward(self, xs, stride, padding):
        x, w = xs[:2]
        p = padding
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        kh, kw = w.shape[:2]
        cols = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        out = np.tensordot(cols, w, axes=([3, 4, 5], [2, 0, 1]))
        if len(xs) == 3:
            out = out + xs[2]
        return out, (cols, xp.shape, w, len(xs) == 3)

    def backward(self, ctx, g, stride, padding):
        cols, xp_shape, w, has_bias = ctx
        kh, kw = w.shape[:2]
        ho, wo = g.shape[1:3]
        gw = np.tensordot(cols, g, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
        gxp = np.zeros(xp_shape, dtype=g.dtype)
        s = stride
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += g @ w[i, j].T
        p = padding
        gx = gxp[:, p:xp_shape[1] - p, p:xp_shape[2] - p, :] if p else gxp
        out = [gx, np.ascontiguousarray(gw)]
        if has_bias:
            out.append(g.sum(axis=(0, 1, 2)))
        return tuple(out)


@register
class DepthwiseConv1d(Primitive):
    """Per-channel 1D convolution along axis 1 of ``(B, T, E)``, same padding."""

    name = "conv1d_depthwise"
    n_inputs = 3
    attrs = {}

    def shape(self, shapes):
        x, w, b = shapes
        if len(x) != 3 or len(w) != 2 or w[1] != x[2] or tuple(b) != (x[2],) or w[0] % 2 == 0:
            raise ShapeError(f"conv1d_depthwise: input {x}, weight {w}, bias {b}")
        return x

    def forward(self, xs):
        x, w, b = xs
        k = w.shape[0]
        p = (k - 1) // 2
        t = x.shape[1]
        xp = np.pad(x, ((0, 0), (p, p), (0, 0)))
        out = np.broadcast_to(b, x.shape).copy()
        for i in range(k):
            out += xp[:, i:i + t, :] * w[i]
        return out, (xp, w)

    def backward(self, ctx, g):
        xp, w = ctx
        k = w.shape[0]
        p = (k - 1) // 2
        t = g.shape[1]
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w)
        for i in range(k):
            gxp[:, i:i + t, :] += g * w[i]
            gw[i] = (g * xp[:, i:i + t, :]).sum(axis=(0, 1))
        return gxp[:, p:p + t, :], gw, g.sum(axis=(0, 1))


@register
class GlobalAvgPool(Primitive):
    """Average over the spatial axes of an NHWC map, keeping 1x1 extents."""

    name = "avg_pool"
    n_inputs = 1
    attrs = {}

    def shape(self, shapes):
        (s,) = shapes
        if len(s) != 4:
            raise ShapeError(f"avg_pool: expects NHWC input, got {s}")
        return (s[0], 1, 1, s[3])

    def forward(self, xs):
        x = xs[0]
        return x.mean(axis=(1, 2), keepdims=True), x.shape

    def backward(self, shape, g):
        return (np.broadcast_to(g / (shape[1] * shape[2]), shape).copy(),)


@register
class Dropout(Primitive):
    """Inverted dropout; the caller only applies it in training mode."""

    name = "dropout"
    n_inputs = 1
    attrs = {"p": 0.1, "rng": REQUIRED}

    def shape(self, shapes, p, rng):
        return shapes[0]

    def forward(self, xs, p, rng):
        x = xs[0]
        if p <= 0:
            return x, None
        mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
        return x * mask, mask

    def backward(self, mask, g, p, rng):
        return (g if mask is None else g * mask,)


@register
class SelectiveScan(Primitive):
    """Input-dependent linear recurrence, run sequentially over axis 1.

    Inputs: u ``(B,T,E)``, delta ``(B,T,E)`` (already positive), A ``(E,N)``,
    Bm ``(B,T,N)``, Cm ``(B,T,N)``, skip ``(E,)``.

    ``h_t = exp(delta_t A) * h_{t-1} + Bbar_t u_t`` with ``h_0 = 0`` and
    ``y_t = sum_n C_t[n] h_t[n] + skip * u_t``.  ``Bbar`` is ``delta * B``
    (Euler) unless ``zoh`` is set, in which case ``(exp(delta A) - 1) / A * B``.
    """

    name = "selective_scan"
    n_inputs = 6
    attrs = {"zoh": False}

    def shape(self, shapes, zoh):
        u, d, a, bm, cm, skip = shapes
        if len(u) != 3 or tuple(d) != tuple(u) or len(a) != 2 or a[0] != u[2]:
            raise ShapeError(f"selective_scan: u {u}, delta {d}, A {a}")
        if tuple(bm) != (u[0], u[1], a[1]) or tuple(cm) != tuple(bm) or tuple(skip) != (u[2],):
            raise ShapeError(f"selective_scan: B {bm}, C {cm}, skip {skip} for u {u}, A {a}")
        return u

    def forward(self, xs, zoh):
        u, delta, a, bm, cm, skip = xs
        nb, t_len, e = u.shape
        dA = np.exp(delta[..., None] * a)                      # B,T,E,N
        if zoh:
            coef = (dA - 1.0) / a                               # B,T,E,N
            dBu = coef * bm[:, :, None, :] * u[..., None]
        else:
            coef = None
            dBu = (delta * u)[..., None] * bm[:, :, None, :]
        hs = np.empty_like(dA)
        h = np.zeros((nb, e, a.shape[1]), dtype=u.dtype)
        for t in range(t_len):
            h = dA[:, t] * h + dBu[:, t]
            hs[:, t] = h
        y = np.einsum("bten,btn->bte", hs, cm) + skip * u
        return y, (u, delta, a, bm, cm, skip, dA, coef, hs)

    def backward(self, ctx, g, zoh):
        u, delta, a, bm, cm, skip, dA, coef, hs = ctx
        t_len = u.shape[1]
        gskip = (g * u).sum(axis=(0, 1))
        gu = g * skip
        gC = np.einsum("bte,bten->btn", g, hs)
        # reverse recurrence for dL/dh_t
        gh = np.empty_like(hs)
        acc = np.zeros_like(hs[:, 0])
        for t in range(t_len - 1, -1, -1):
            acc = g[:, t, :, None] * cm[:, t, None, :] + acc
            gh[:, t] = acc
            acc = acc * dA[:, t]
        h_prev = np.zeros_like(hs)
        h_prev[:, 1:] = hs[:, :-1]
        g_dA = gh * h_prev * dA                                  # d/d(delta*A) via exp
        gdelta = (g_dA * a).sum(-1)
        ga = np.einsum("bten,bte->en", g_dA, delta)
        b_ = bm[:, :, None, :]
        if zoh:
            # Bbar = coef * B, coef = (exp(delta A) - 1) / A
            gcoef = gh * b_ * u[..., None]
            gdelta += (gcoef * dA).sum(-1)
            dcoef_da = (delta[..., None] * dA * a - (dA - 1.0)) / (a * a)
            ga += (gcoef * dcoef_da).sum(axis=(0, 1))
            gB = (gh * coef * u[..., None]).sum(axis=2)
            gu += (gh * coef * b_).sum(-1)
        else:
            gdelta += (gh * b_).sum(-1) * u
            gB = np.einsum("bten,bte->btn", gh, delta * u)
            gu += (gh * b_).sum(-1) * delta
        return gu, gdelta, ga, gB, gC, gskip
