"""Full network: flow input, patch embedding, conv stage, three LGFI stages, head."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import config as cfgmod
from .dgcm import DgcmHead, LabelSpace, SingleHead
from .lgfi import LGFIStage, stage_window, window_count
from .mixer import MixerConfig
from .nn import BatchNorm, Conv2d, Module
from .tensor import Tensor, meta_mode, mert
from .tensor import functional as F


@dataclass
class FlowTriplet:
    u: np.ndarray
    v: np.ndarray
    m: np.ndarray

    def stack(self):
        """``H x W x 3`` array in channel order (u, v, m)."""
        return np.stack([self.u, self.v, self.m], axis=-1)

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr)
        return cls(arr[..., 0], arr[..., 1], arr[..., 2])


def make_triplet(u, v):
    u = np.asarray(u.numpy() if isinstance(u, Tensor) else u)
    v = np.asarray(v.numpy() if isinstance(v, Tensor) else v)
    if u.shape != v.shape:
        raise ValueError(f"flow components differ in extent: {u.shape} vs {v.shape}")
    return FlowTriplet(u, v, np.hypot(u, v))


def flip_augment(x, rng, p=0.5, negate_u=True, force=None):
    """Mirror the flow field about the vertical axis with probability ``p``.

    Mirroring reverses horizontal motion, so ``u`` changes sign unless
    ``negate_u`` is off.  ``force`` overrides the coin flip.
    """
    do = force if force is not None else rng.random() < p
    if not do:
        return x
    u = x.u[..., ::-1]
    return FlowTriplet(-u if negate_u else u.copy(), x.v[..., ::-1].copy(), x.m[..., ::-1].copy())


class PatchEmbed(Module):
    """Two stride-2 3x3 convs, each followed by batch norm and ReLU (4x reduction)."""

    def __init__(self, in_ch, hidden, dim, rng, eps=1e-5, momentum=0.1):
        self.conv1 = Conv2d(in_ch, hidden, 3, rng, stride=2, padding=1, bias=False)
        self.bn1 = BatchNorm(hidden, rng, eps, momentum)
        self.conv2 = Conv2d(hidden, dim, 3, rng, stride=2, padding=1, bias=False)
        self.bn2 = BatchNorm(dim, rng, eps, momentum)

    def forward(self, x):
        if x.shape[1] % 4 or x.shape[2] % 4:
            raise ValueError(f"input extent {x.shape[1]}x{x.shape[2]} is not divisible by 4")
        x = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(x)))


class ConvBlock(Module):
    """conv3x3 -> BN -> GELU -> conv3x3 -> BN, plus identity shortcut."""

    def __init__(self, dim, rng, eps=1e-5, momentum=0.1):
        self.conv1 = Conv2d(dim, dim, 3, rng, padding=1)
        self.bn1 = BatchNorm(dim, rng, eps, momentum)
        self.conv2 = Conv2d(dim, dim, 3, rng, padding=1)
        self.bn2 = BatchNorm(dim, rng, eps, momentum)

    def forward(self, x):
        h = F.gelu(self.bn1(self.conv1(x)))
        return x + self.bn2(self.conv2(h))


class ConvStage(Module):
    def __init__(self, dim, out_dim, depth, rng, eps=1e-5, momentum=0.1):
        self.blocks = [ConvBlock(dim, rng, eps, momentum) for _ in range(depth)]
        self.down = Conv2d(dim, out_dim, 3, rng, stride=2, padding=1, bias=False)

    def forward(self, x):
        for blk in self.blocks:
            x = blk(x)
        return self.down(x)


class MERba(Module):
    """Backbone producing one ``dims[3]``-wide feature vector per sample."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.drop_rng = np.random.default_rng(rng.integers(2**63))
        d = cfg.dims
        bn = dict(eps=cfg.bn_eps, momentum=cfg.bn_momentum)
        self.patch_embed = PatchEmbed(cfg.in_chans, cfg.hidden, d[0], rng, **bn)
        self.stage1 = ConvStage(d[0], d[1], cfg.depths[0], rng, **bn)
        mixer_cfg = MixerConfig(state_dim=cfg.state_dim, conv_kernel=cfg.conv_kernel,
                                exact_zoh=cfg.exact_zoh)
        self.stages = [
            LGFIStage(d[k], d[k + 1] if k < 3 else d[k], cfg.depths[k], rng,
                      window=cfg.window, heads=cfg.heads(d[k]),
                      global_blocks=cfg.global_blocks, mlp_ratio=cfg.mlp_ratio,
                      drop=cfg.dropout, drop_rng=self.drop_rng, final=(k == 3),
                      mixer_cfg=mixer_cfg, directions=cfg.directions,
                      prenorm=cfg.mixer_prenorm, residual=cfg.extractor_residual,
                      per_direction_params=cfg.per_direction_params,
                      bn_eps=cfg.bn_eps, bn_momentum=cfg.bn_momentum)
            for k in (1, 2, 3)]

    def forward(self, x, trace=None, keep=None):
        """``(N, H, W, 3)`` -> ``(N, dims[3])``.

        ``trace`` (a list) receives ``(name, in_shape, out_shape, windows)``
        rows; ``keep`` (a dict) receives the last stage's pre-pool map.
        """
        if x.shape[1:3] != (self.cfg.input_size, self.cfg.input_size):
            raise ValueError(f"input {x.shape[1]}x{x.shape[2]} does not match configured "
                             f"extent {self.cfg.input_size}")

        def log(name, a, b, windows=None):
            if trace is not None:
                trace.append((name, tuple(a.shape[1:]), tuple(b.shape[1:]), windows))

        h = self.patch_embed(x)
        log("patch_embed", x, h)
        o = self.stage1(h)
        log("stage1", h, o)
        for k, stage in enumerate(self.stages, start=2):
            info = {}
            nxt = stage(o, trace=info)
            log(f"stage{k}", o, nxt, info["windows"])
            if k == 4 and keep is not None:
                keep["pre_pool"] = info["pre_pool"]
            o = nxt
        return F.reshape(o, (o.shape[0], o.shape[-1]))


class Classifier(Module):
    def __init__(self, cfg, space, rng, head="dgcm"):
        if head == "dgcm" and not space.fine:
            raise ValueError("the dgcm head needs fine labels; set dgcm.head to single")
        self.backbone = MERba(cfg, rng)
        self.head_kind = head
        head_cls = DgcmHead if head == "dgcm" else SingleHead
        self.head = head_cls(cfg.dims[3], space, rng)
        self.space = space

    def forward(self, x, keep=None):
        return self.head(self.backbone(x, keep=keep))


def build_classifier(exp, seed=0, head=None):
    space = LabelSpace.from_config(exp.labels)
    return Classifier(exp.model, space, np.random.default_rng(seed), head or exp.train.head)


def shape_trace(cfg, batch=1):
    """Walk the network on meta tensors; no weights are allocated."""
    with meta_mode():
        net = MERba(cfg, np.random.default_rng(0))
        x = Tensor.meta((batch, cfg.input_size, cfg.input_size, cfg.in_chans))
        rows = []
        net.eval()
        feat = net(x, trace=rows)
    return rows, feat.shape


def format_trace(rows):
    def dims(s):
        return "x".join(str(n) for n in s)
    out = []
    for name, a, b, windows in rows:
        line = f"{name}: {dims(a)} -> {dims(b)}"
        if windows is not None:
            line += f"  (windows={windows})"
        out.append(line)
    return out


# ---- parameter accounting -------------------------------------------------

def _conv(cin, cout, k=3, bias=False):
    return k * k * cin * cout + (cout if bias else 0)


def _mixer(d, cfg):
    e, n, k = d // 2, cfg.state_dim, cfg.conv_kernel
    return 2 * d * e + 2 * (k * e + e) + (e * e + e) + 2 * e * n + e * n + e


def _mlp(d, ratio):
    h = int(d * ratio)
    return d * h + h + h * d + d


def _extractor(d, cfg):
    n_mixers = len(cfg.directions) if cfg.per_direction_params else 1
    norms = (2 * d if cfg.mixer_prenorm else 0) + 2 * d
    return n_mixers * _mixer(d, cfg) + (d * d + d) + norms + _mlp(d, cfg.mlp_ratio)


def _global_block(d, cfg):
    return 4 * d + (3 * d * d + 3 * d) + (d * d + d) + _mlp(d, cfg.mlp_ratio)


def param_breakdown(cfg, n_coarse=4, n_fine=4, n_full=7, head="dgcm"):
    """Closed-form per-module parameter counts; no weights are built."""
    d = cfg.dims
    rows = {
        "patch_embed": _conv(cfg.in_chans, cfg.hidden) + 2 * cfg.hidden + _conv(cfg.hidden, d[0]) + 2 * d[0],
        "stage1.blocks": cfg.depths[0] * 2 * (_conv(d[0], d[0], bias=True) + 2 * d[0]),
        "stage1.downsample": _conv(d[0], d[1]),
    }
    for k in (1, 2, 3):
        name = f"stage{k + 1}"
        rows[f"{name}.extractors"] = cfg.depths[k] * _extractor(d[k], cfg)
        rows[f"{name}.attention"] = cfg.global_blocks * _global_block(d[k], cfg)
        rows[f"{name}.downsample" if k < 3 else f"{name}.norm"] = (
            _conv(d[k], d[k + 1]) if k < 3 else 2 * d[k])
    if head == "dgcm":
        rows["head"] = d[3] * (n_coarse + n_fine) + n_coarse + n_fine
    else:
        rows["head"] = d[3] * n_full + n_full
    return rows


def mixer_breakdown(cfg):
    """Mixer-only share of each LGFI stage, the part whose internals are unpublished."""
    n_mixers = len(cfg.directions) if cfg.per_direction_params else 1
    return {f"stage{k + 1}.mixers": cfg.depths[k] * n_mixers * _mixer(cfg.dims[k], cfg)
            for k in (1, 2, 3)}


def count_params(cfg, **head):
    return sum(param_breakdown(cfg, **head).values())


def allocated_breakdown(model):
    """Per-module counts read off an instantiated (or meta) classifier."""
    rows = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        if parts[0] == "head":
            key = "head"
        elif parts[1] == "patch_embed":
            key = "patch_embed"
        elif parts[1] == "stage1":
            key = "stage1.blocks" if parts[2] == "blocks" else "stage1.downsample"
        else:
            stage = f"stage{int(parts[2]) + 2}"
            key = {"extractors": f"{stage}.extractors", "globals": f"{stage}.attention"}.get(
                parts[3], f"{stage}.downsample" if stage != "stage4" else f"{stage}.norm")
        rows[key] = rows.get(key, 0) + p.size
    return rows


# ---- checkpoints ----------------------------------------------------------

def save_checkpoint(path, model, exp, extra=None):
    """Directory of MERT tensors plus ``manifest.json``."""
    os.makedirs(path, exist_ok=True)
    files = {}
    for i, (name, arr) in enumerate(sorted(model.state_dict().items())):
        fname = f"t{i:04d}.mert"
        mert.save(os.path.join(path, fname), np.asarray(arr))
        files[name] = fname
    manifest = {"config": cfgmod.to_flat(exp), "head": model.head_kind, "tensors": files,
                "extra": extra or {}}
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(path):
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    exp = cfgmod.from_flat(manifest["config"])
    space = LabelSpace.from_config(exp.labels)
    state = {name: mert.load(os.path.join(path, f)) for name, f in manifest["tensors"].items()}
    dtype = next(iter(state.values())).dtype
    from .tensor import default_dtype
    with default_dtype(dtype):
        model = Classifier(exp.model, space, np.random.default_rng(0), manifest["head"])
    model.load_state_dict(state)
    return model, exp, manifest.get("extra", {})


# published total for the default configuration
REFERENCE_PARAMS = 101_210_000


def param_report(exp):
    """CSV-ready rows: per-module counts, per-stage mixer shares, and the gap to the reference."""
    from .dgcm import LabelSpace
    space = LabelSpace.from_config(exp.labels)
    rows = param_breakdown(exp.model, n_coarse=len(space.coarse), n_fine=len(space.fine),
                           n_full=len(space.full), head=exp.train.head)
    total = sum(rows.values())
    lines = [("module", "params", "share")]
    lines += [(k, str(v), f"{v / total:.4f}") for k, v in rows.items()]
    lines.append(("total", str(total), "1.0000"))
    lines += [(k, str(v), f"{v / total:.4f}") for k, v in mixer_breakdown(exp.model).items()]
    dev = total - REFERENCE_PARAMS
    lines.append(("reference", str(REFERENCE_PARAMS), ""))
    lines.append(("deviation", str(dev), f"{dev / REFERENCE_PARAMS:+.4f}"))
    return lines


def window_counts(cfg):
    """Windows per stage for stages 2-4 from the shape trace."""
    rows, _ = shape_trace(cfg)
    return {name: w for name, _, _, w in rows if w is not None}


__all__ = [
    "Classifier", "FlowTriplet", "MERba", "allocated_breakdown", "build_classifier",
    "count_params", "flip_augment", "format_trace", "load_checkpoint", "make_triplet",
    "REFERENCE_PARAMS", "mixer_breakdown", "param_breakdown", "param_report", "save_checkpoint", "shape_trace", "stage_window", "window_count",
    "window_counts",
]
