"""Token mixer over a scanned window sequence.

Two branches of width ``D/2`` are computed from the input sequence:

* SSM branch: linear -> depthwise conv1d -> SiLU -> selective scan
* plain branch: linear -> depthwise conv1d -> SiLU

and concatenated back to ``D`` channels.  There is deliberately no output
projection here; the owning local extractor applies it after fusing the
scan directions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Module, parameter, trunc_normal, zeros
from .tensor import ShapeError
from .tensor import functional as F


@dataclass(frozen=True)
class MixerConfig:
    state_dim: int = 8
    conv_kernel: int = 3
    exact_zoh: bool = False
    dt_min: float = 1e-3
    dt_max: float = 1e-1


def _dt_bias_init(cfg):
    # softplus(bias) log-uniform in [dt_min, dt_max]
    def init(shape, rng):
        dt = np.exp(rng.uniform(np.log(cfg.dt_min), np.log(cfg.dt_max), size=shape))
        return dt + np.log(-np.expm1(-dt))
    return init


def _a_log_init(shape, rng=None):
    e, n = shape
    return np.log(np.tile(np.arange(1, n + 1, dtype=np.float64), (e, 1)))


def _conv_init(kernel):
    bound = 1.0 / np.sqrt(kernel)

    def init(shape, rng):
        return rng.uniform(-bound, bound, size=shape)
    return init


class Mixer(Module):
    def __init__(self, dim, rng, cfg=MixerConfig()):
        if dim % 2:
            raise ValueError(f"mixer width must be even, got {dim}")
        e, n, k = dim // 2, cfg.state_dim, cfg.conv_kernel
        self.dim = dim
        self.cfg = cfg
        self.in_ssm = parameter(trunc_normal(), (dim, e), rng)
        self.in_plain = parameter(trunc_normal(), (dim, e), rng)
        self.conv_ssm_w = parameter(_conv_init(k), (k, e), rng)
        self.conv_ssm_b = parameter(zeros, (e,), rng)
        self.conv_plain_w = parameter(_conv_init(k), (k, e), rng)
        self.conv_plain_b = parameter(zeros, (e,), rng)
        self.dt_w = parameter(trunc_normal(), (e, e), rng)
        self.dt_b = parameter(_dt_bias_init(cfg), (e,), rng)
        self.b_proj = parameter(trunc_normal(), (e, n), rng)
        self.c_proj = parameter(trunc_normal(), (e, n), rng)
        self.a_log = parameter(_a_log_init, (e, n), rng)
        self.skip = parameter(lambda s, r: np.ones(s), (e,), rng)

    def ssm(self, u):
        """Selective scan of ``u`` ``(B, T, E)`` with input-dependent step, B and C."""
        if u.shape[-1] != self.dim // 2:
            raise ShapeError(f"scan input width {u.shape[-1]} != branch width {self.dim // 2}")
        delta = F.softplus(F.linear(u, self.dt_w, self.dt_b))
        A = -F.exp(self.a_log)
        Bm = F.matmul(u, self.b_proj)
        Cm = F.matmul(u, self.c_proj)
        return F.selective_scan(u, delta, A, Bm, Cm, self.skip, zoh=self.cfg.exact_zoh)

    def forward(self, x):
        """``(B, T, D)`` -> ``(B, T, D)``."""
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ShapeError(f"mixer expects (B, T, {self.dim}), got {x.shape}")
        xs = F.matmul(x, self.in_ssm)
        xs = F.silu(F.conv1d_depthwise(xs, self.conv_ssm_w, self.conv_ssm_b))
        xp = F.matmul(x, self.in_plain)
        xp = F.silu(F.conv1d_depthwise(xp, self.conv_plain_w, self.conv_plain_b))
        return F.concat([self.ssm(xs), xp], axis=-1)
