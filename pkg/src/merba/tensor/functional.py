"""Thin named wrappers over :func:`apply_primitive`."""
from __future__ import annotations

import numpy as np

from .core import apply_primitive


def add(a, b):
    return apply_primitive("add", (a, b))


def mul(a, b):
    return apply_primitive("mul", (a, b))


def matmul(a, b):
    return apply_primitive("matmul", (a, b))


def exp(x):
    return apply_primitive("exp", (x,))


def log(x):
    return apply_primitive("log", (x,))


def relu(x):
    return apply_primitive("relu", (x,))


def silu(x):
    return apply_primitive("silu", (x,))


def gelu(x):
    return apply_primitive("gelu", (x,))


def softplus(x):
    return apply_primitive("softplus", (x,))


def softmax(x, axis=-1):
    return apply_primitive("softmax", (x,), axis=axis)


def reshape(x, shape):
    return apply_primitive("reshape", (x,), shape=tuple(shape))


def transpose(x, axes):
    return apply_primitive("transpose", (x,), axes=tuple(axes))


def concat(xs, axis):
    return apply_primitive("concat", tuple(xs), axis=axis)


def slice_axis(x, start, stop, axis):
    return apply_primitive("slice", (x,), axis=axis, start=start, stop=stop)


def take(x, indices, axis):
    return apply_primitive("take", (x,), indices=np.asarray(indices, dtype=np.int64), axis=axis)


def linear(x, weight, bias=None):
    y = apply_primitive("matmul", (x, weight))
    return y if bias is None else apply_primitive("add", (y, bias))


def layer_norm(x, weight, bias, eps=1e-5):
    return apply_primitive("layer_norm", (x, weight, bias), eps=eps)


def batch_norm(x, weight, bias, state, training, eps=1e-5, momentum=0.1):
    return apply_primitive("batch_norm", (x, weight, bias), eps=eps, momentum=momentum,
                           training=training, state=state)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return apply_primitive("conv2d", inputs, stride=stride, padding=padding)


def conv1d_depthwise(x, weight, bias):
    return apply_primitive("conv1d_depthwise", (x, weight, bias))


def avg_pool(x):
    return apply_primitive("avg_pool", (x,))


def dropout(x, p, rng, training=True):
    if not training or p <= 0:
        return x
    return apply_primitive("dropout", (x,), p=p, rng=rng)


def selective_scan(u, delta, A, B, C, skip, zoh=False):
    return apply_primitive("selective_scan", (u, delta, A, B, C, skip), zoh=zoh)


def cross_entropy(logits, targets):
    return apply_primitive("cross_entropy", (logits,), targets=np.asarray(targets, dtype=np.int64))
