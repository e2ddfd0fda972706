"""Parameter containers and the basic layers shared by the network."""
from __future__ import annotations

import numpy as np

from .tensor import BatchNormState, Tensor, get_default_dtype, is_meta_mode
from .tensor import functional as F


def parameter(init, shape, rng, name=None):
    """Create a trainable tensor; in meta mode only the shape is kept."""
    shape = tuple(int(n) for n in shape)
    if is_meta_mode():
        return Tensor.meta(shape, requires_grad=True, name=name)
    data = np.asarray(init(shape, rng), dtype=get_default_dtype())
    return Tensor(data, requires_grad=True, name=name)


def zeros(shape, rng=None):
    return np.zeros(shape)


def ones(shape, rng=None):
    return np.ones(shape)


def trunc_normal(std=0.02):
    def init(shape, rng):
        return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)
    return init


def fan_in_uniform(fan_in):
    bound = 1.0 / np.sqrt(fan_in)

    def init(shape, rng):
        return rng.uniform(-bound, bound, size=shape)
    return init


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, BatchNormState):
                yield f"{prefix}{name}.running_mean", value.mean
                yield f"{prefix}{name}.running_var", value.var
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def num_params(self):
        return sum(p.size for p in self.parameters())

    def train(self, mode=True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr
        for name, buf in buffers.items():
            buf[...] = state[name]


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True, std=0.02):
        self.weight = parameter(trunc_normal(std), (in_dim, out_dim), rng)
        self.bias = parameter(zeros, (out_dim,), rng) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, rng=None, eps=1e-5):
        self.weight = parameter(ones, (dim,), rng)
        self.bias = parameter(zeros, (dim,), rng)
        self.eps = eps

    def forward(self, x):
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class BatchNorm(Module):
    # momentum/eps are not given by the source design; torch defaults
    def __init__(self, dim, rng=None, eps=1e-5, momentum=0.1):
        self.weight = parameter(ones, (dim,), rng)
        self.bias = parameter(zeros, (dim,), rng)
        self.stats = BatchNormState(dim, get_default_dtype())
        self.eps = eps
        self.momentum = momentum

    def forward(self, x):
        return F.batch_norm(x, self.weight, self.bias, self.stats, self.training,
                            eps=self.eps, momentum=self.momentum)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0, bias=True):
        fan_in = in_ch * kernel * kernel
        self.weight = parameter(fan_in_uniform(fan_in), (kernel, kernel, in_ch, out_ch), rng)
        self.bias = parameter(fan_in_uniform(fan_in), (out_ch,), rng) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Mlp(Module):
    """Linear -> GELU -> dropout -> Linear -> dropout."""

    def __init__(self, dim, ratio, rng, drop=0.0, drop_rng=None):
        hidden = int(dim * ratio)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)
        self.drop = drop
        self.drop_rng = drop_rng

    def forward(self, x):
        x = F.dropout(F.gelu(self.fc1(x)), self.drop, self.drop_rng, self.training)
        return F.dropout(self.fc2(x), self.drop, self.drop_rng, self.training)
