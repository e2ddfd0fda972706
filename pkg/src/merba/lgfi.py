"""Local-global feature integration stage.

A stage cuts the ``N x H x W x D`` map into non-overlapping windows, runs
``depth`` local extractor blocks inside every window, stitches the windows
back, applies full-map self-attention blocks and finally downsamples (or, for
the last stage, batch-normalizes and average-pools).
"""
from __future__ import annotations

from dataclasses import dataclass

from .mixer import Mixer, MixerConfig
from .nn import BatchNorm, Conv2d, LayerNorm, Linear, Mlp, Module
from .scan import ScanDirection, apply_scan, build_permutation, invert_scan
from .tensor import ShapeError
from .tensor import functional as F


@dataclass(frozen=True)
class WindowGrid:
    """Windows of one batch, stacked as ``(N * rows * cols, wh, ww, D)``.

    Windows are ordered sample-major, then row-major over the window grid.
    """

    windows: object
    rows: int
    cols: int
    source_shape: tuple

    @property
    def count(self):
        return self.rows * self.cols


def window_count(height, width, wh, ww):
    return (height * width) // (wh * ww)


def partition(x, wh, ww):
    n, h, w, d = x.shape
    if h % wh or w % ww:
        pad_h, pad_w = (-h) % wh, (-w) % ww
        raise ShapeError(
            f"{h}x{w} map is not divisible into {wh}x{ww} windows; "
            f"pad by {pad_h} rows and {pad_w} columns")
    rows, cols = h // wh, w // ww
    t = F.reshape(x, (n, rows, wh, cols, ww, d))
    t = F.transpose(t, (0, 1, 3, 2, 4, 5))
    return WindowGrid(F.reshape(t, (n * rows * cols, wh, ww, d)), rows, cols, tuple(x.shape))


def merge(windows, grid):
    n, h, w, d = grid.source_shape
    wh, ww = windows.shape[1:3]
    t = F.reshape(windows, (n, grid.rows, grid.cols, wh, ww, windows.shape[-1]))
    t = F.transpose(t, (0, 1, 3, 2, 4, 5))
    return F.reshape(t, (n, h, w, windows.shape[-1]))


def fuse_scans(windows, perms, mixers):
    """Scan each window in every direction, mix, restore the grid and sum.

    With a single shared mixer all directions run as one stacked batch.
    """
    b = windows.shape[0]
    seqs = [apply_scan(windows, p) for p in perms]
    if len(mixers) == 1:
        z = mixers[0](F.concat(seqs, axis=0) if len(seqs) > 1 else seqs[0])
        outs = [F.slice_axis(z, i * b, (i + 1) * b, axis=0) if len(seqs) > 1 else z
                for i in range(len(seqs))]
    else:
        outs = [m(s) for m, s in zip(mixers, seqs)]
    fused = None
    for out, perm in zip(outs, perms):
        f = invert_scan(out, perm)
        fused = f if fused is None else fused + f
    return fused


class LocalExtractor(Module):
    """Multi-direction mixer fusion followed by a linear layer and an MLP."""

    def __init__(self, dim, rng, *, directions=("a", "b", "c", "d"), mixer_cfg=MixerConfig(),
                 mlp_ratio=4.0, drop=0.0, drop_rng=None, prenorm=True, residual=True,
                 per_direction_params=False):
        self.directions = tuple(ScanDirection.parse(d) if isinstance(d, str) else d
                                for d in directions)
        self.norm1 = LayerNorm(dim, rng) if prenorm else None
        n_mixers = len(self.directions) if per_direction_params else 1
        self.mixers = [Mixer(dim, rng, mixer_cfg) for _ in range(n_mixers)]
        self.proj = Linear(dim, dim, rng)
        self.norm2 = LayerNorm(dim, rng)
        self.mlp = Mlp(dim, mlp_ratio, rng, drop, drop_rng)
        self.residual = residual

    def forward(self, w):
        """``(B, wh, ww, D)`` windows -> same shape."""
        wh, ww = w.shape[1:3]
        perms = [build_permutation(d, wh, ww) for d in self.directions]
        h = self.norm1(w) if self.norm1 is not None else w
        f = self.proj(fuse_scans(h, perms, self.mixers))
        x = w + f if self.residual else f
        m = self.mlp(self.norm2(x))
        return x + m if self.residual else m


class Attention(Module):
    def __init__(self, dim, heads, rng, drop=0.0, drop_rng=None):
        if dim % heads:
            raise ValueError(f"head count {heads} does not divide width {dim}")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.drop = drop
        self.drop_rng = drop_rng

    def _qkv(self, x):
        b, n, d = x.shape
        hd = d // self.heads
        t = F.reshape(self.qkv(x), (b, n, 3, self.heads, hd))
        t = F.transpose(t, (2, 0, 3, 1, 4))
        q, k, v = (F.reshape(F.slice_axis(t, i, i + 1, axis=0), (b, self.heads, n, hd))
                   for i in range(3))
        return q, k, v

    def _probs(self, q, k):
        scale = q.shape[-1] ** -0.5
        return F.softmax(F.matmul(q, F.transpose(k, (0, 1, 3, 2))) * scale, axis=-1)

    def weights(self, x):
        """Attention probabilities ``(B, heads, L, L)`` for tokens ``(B, L, D)``."""
        q, k, _ = self._qkv(x)
        return self._probs(q, k)

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self._qkv(x)
        attn = self._probs(q, k)
        out = F.reshape(F.transpose(F.matmul(attn, v), (0, 2, 1, 3)), (b, n, d))
        return F.dropout(self.proj(out), self.drop, self.drop_rng, self.training)


class GlobalBlock(Module):
    """Pre-norm self-attention and MLP, each wrapped in a residual."""

    def __init__(self, dim, heads, rng, mlp_ratio=4.0, drop=0.0, drop_rng=None):
        self.norm1 = LayerNorm(dim, rng)
        self.attn = Attention(dim, heads, rng, drop, drop_rng)
        self.norm2 = LayerNorm(dim, rng)
        self.mlp = Mlp(dim, mlp_ratio, rng, drop, drop_rng)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def global_attend(x, blocks):
    """Apply global blocks over every token of an ``(N, H, W, D)`` map."""
    n, h, w, d = x.shape
    t = F.reshape(x, (n, h * w, d))
    for blk in blocks:
        t = blk(t)
    return F.reshape(t, (n, h, w, d))


class Downsample(Module):
    """Stride-2 3x3 convolution; output extent is ceil(H/2) x ceil(W/2)."""

    def __init__(self, dim, out_dim, rng):
        self.conv = Conv2d(dim, out_dim, 3, rng, stride=2, padding=1, bias=False)

    def forward(self, x):
        return self.conv(x)


class FinalPool(Module):
    """Batch norm followed by global average pooling to ``1 x 1``."""

    def __init__(self, dim, rng, eps=1e-5, momentum=0.1):
        self.norm = BatchNorm(dim, rng, eps, momentum)

    def forward(self, x):
        return F.avg_pool(self.norm(x))


def stage_window(window, height, width):
    """Window extents used on a ``height x width`` map (clipped to the map)."""
    return min(window, height), min(window, width)


class LGFIStage(Module):
    def __init__(self, dim, out_dim, depth, rng, *, window=7, heads=1, global_blocks=2,
                 mlp_ratio=4.0, drop=0.0, drop_rng=None, final=False, mixer_cfg=MixerConfig(),
                 directions=("a", "b", "c", "d"), prenorm=True, residual=True,
                 per_direction_params=False, bn_eps=1e-5, bn_momentum=0.1):
        self.window = window
        self.final = final
        self.extractors = [
            LocalExtractor(dim, rng, directions=directions, mixer_cfg=mixer_cfg,
                           mlp_ratio=mlp_ratio, drop=drop, drop_rng=drop_rng, prenorm=prenorm,
                           residual=residual, per_direction_params=per_direction_params)
            for _ in range(depth)]
        self.globals = [GlobalBlock(dim, heads, rng, mlp_ratio, drop, drop_rng)
                        for _ in range(global_blocks)]
        if final:
            self.down = FinalPool(dim, rng, bn_eps, bn_momentum)
        else:
            self.down = Downsample(dim, out_dim, rng)

    def forward(self, x, trace=None):
        n, h, w, d = x.shape
        wh, ww = stage_window(self.window, h, w)
        grid = partition(x, wh, ww)
        win = grid.windows
        for blk in self.extractors:
            win = blk(win)
        local = merge(win, grid)
        glob = global_attend(local, self.globals)
        out = self.down(glob)
        if trace is not None:
            trace.update(windows=grid.count, window=(wh, ww), pre_pool=glob)
        return out
