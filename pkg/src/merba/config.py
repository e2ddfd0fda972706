"""Model and training configuration, serialized as flat dotted-key JSON."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 224
    in_chans: int = 3
    patch_hidden: int | None = None          # None -> dims[0] // 2
    dims: tuple = (128, 256, 512, 1024)
    depths: tuple = (3, 2, 6, 4)
    window: int = 7
    global_blocks: int = 2
    head_dim: int = 64                       # heads = max(1, D // head_dim)
    mlp_ratio: float = 4.0
    dropout: float = 0.1
    state_dim: int = 8
    conv_kernel: int = 3
    exact_zoh: bool = False
    mixer_prenorm: bool = True
    extractor_residual: bool = True
    per_direction_params: bool = False
    directions: tuple = ("a", "b", "c", "d")
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if len(self.dims) != 4 or len(self.depths) != 4:
            raise ValueError("dims and depths need one entry per stage (4)")
        if self.input_size % 4:
            raise ValueError(f"input size {self.input_size} is not divisible by 4")
        for d in self.dims[1:]:
            if d % 2:
                raise ValueError(f"stage width {d} must be even for the two mixer branches")

    @property
    def embed_dim(self):
        return self.dims[0]

    @property
    def hidden(self):
        return self.patch_hidden or self.dims[0] // 2

    def heads(self, dim):
        return max(1, dim // self.head_dim)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    warmup_epochs: int = 5
    cooldown_epochs: int = 10
    peak_lr: float = 5e-4
    floor_ratio: float = 1e-2
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 32
    seed: int = 0
    patience: int = 20
    val_fraction: float = 0.1
    head: str = "dgcm"                       # dgcm | single
    flip: bool = True
    negate_u: bool = True
    fine_mean_over_negatives: bool = True

    def __post_init__(self):
        if self.warmup_epochs + self.cooldown_epochs > self.epochs:
            raise ValueError("warmup + cooldown epochs exceed total epochs")
        if self.head not in ("dgcm", "single"):
            raise ValueError(f"unknown head {self.head!r}")


DFME_LABELS = {
    "full": ["anger", "contempt", "disgust", "fear", "happiness", "sadness", "surprise"],
    "coarse_map": {"anger": "negative", "disgust": "negative", "fear": "negative",
                   "sadness": "negative", "happiness": "positive", "surprise": "surprise",
                   "contempt": "contempt"},
    "fine": ["anger", "disgust", "fear", "sadness"],
}

MMEW_LABELS = {
    "full": ["anger", "disgust", "fear", "happiness", "sadness", "surprise"],
    "coarse_map": {"anger": "negative", "disgust": "negative", "fear": "negative",
                   "sadness": "negative", "happiness": "positive", "surprise": "surprise"},
    "fine": ["anger", "disgust", "fear", "sadness"],
}


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    labels: dict = field(default_factory=lambda: json.loads(json.dumps(DFME_LABELS)))


# dotted key -> (section, field)
_KEYS = {
    "model.input_size": ("model", "input_size"),
    "model.in_chans": ("model", "in_chans"),
    "model.patch_hidden": ("model", "patch_hidden"),
    "model.dims": ("model", "dims"),
    "model.depths": ("model", "depths"),
    "model.window": ("model", "window"),
    "model.mlp_ratio": ("model", "mlp_ratio"),
    "model.dropout": ("model", "dropout"),
    "attention.global_blocks": ("model", "global_blocks"),
    "attention.head_dim": ("model", "head_dim"),
    "mixer.state_dim": ("model", "state_dim"),
    "mixer.conv_kernel": ("model", "conv_kernel"),
    "mixer.exact_zoh": ("model", "exact_zoh"),
    "mixer.prenorm": ("model", "mixer_prenorm"),
    "extractor.residual": ("model", "extractor_residual"),
    "extractor.per_direction_params": ("model", "per_direction_params"),
    "extractor.directions": ("model", "directions"),
    "batchnorm.eps": ("model", "bn_eps"),
    "batchnorm.momentum": ("model", "bn_momentum"),
    "train.epochs": ("train", "epochs"),
    "train.warmup_epochs": ("train", "warmup_epochs"),
    "train.cooldown_epochs": ("train", "cooldown_epochs"),
    "train.peak_lr": ("train", "peak_lr"),
    "train.floor_ratio": ("train", "floor_ratio"),
    "train.weight_decay": ("train", "weight_decay"),
    "train.betas": ("train", "betas"),
    "train.adam_eps": ("train", "adam_eps"),
    "train.batch_size": ("train", "batch_size"),
    "train.seed": ("train", "seed"),
    "train.patience": ("train", "patience"),
    "train.val_fraction": ("train", "val_fraction"),
    "dgcm.head": ("train", "head"),
    "dgcm.fine_mean_over_negatives": ("train", "fine_mean_over_negatives"),
    "augment.flip": ("train", "flip"),
    "augment.negate_u": ("train", "negate_u"),
    "labels.full": ("labels", "full"),
    "labels.coarse_map": ("labels", "coarse_map"),
    "labels.fine": ("labels", "fine"),
}

THREE_LABELS = {
    "full": ["negative", "positive", "surprise"],
    "coarse_map": {"negative": "negative", "positive": "positive", "surprise": "surprise"},
    "fine": [],
}

MINI_MODEL = {"model.input_size": 56, "model.dims": [16, 32, 64, 64],
              "model.depths": [1, 1, 1, 1]}
TINY_MODEL = {"model.input_size": 28, "model.dims": [8, 8, 8, 8],
              "model.depths": [1, 1, 1, 1], "attention.global_blocks": 1,
              "mixer.state_dim": 2}

PRESETS = {"default": {}, "mini": MINI_MODEL, "tiny": TINY_MODEL,
           "mmew": {"labels.full": MMEW_LABELS["full"],
                    "labels.coarse_map": MMEW_LABELS["coarse_map"],
                    "labels.fine": MMEW_LABELS["fine"]},
           "three": {"labels.full": THREE_LABELS["full"],
                     "labels.coarse_map": THREE_LABELS["coarse_map"],
                     "labels.fine": THREE_LABELS["fine"], "dgcm.head": "single"}}


def to_flat(cfg):
    flat = {}
    for key, (section, name) in _KEYS.items():
        value = getattr(cfg, section)
        value = value[name] if isinstance(value, dict) else getattr(value, name)
        flat[key] = list(value) if isinstance(value, tuple) else value
    return flat


def from_flat(flat, base=None):
    base = base or ExperimentConfig()
    unknown = sorted(set(flat) - set(_KEYS))
    if unknown:
        raise KeyError(f"unknown config key(s): {', '.join(unknown)}")
    updates = {"model": {}, "train": {}}
    labels = dict(base.labels)
    for key, value in flat.items():
        section, name = _KEYS[key]
        if isinstance(value, list) and section != "labels":
            value = tuple(value)
        if section == "labels":
            labels[name] = value
        else:
            updates[section][name] = value
    return ExperimentConfig(model=dataclasses.replace(base.model, **updates["model"]),
                            train=dataclasses.replace(base.train, **updates["train"]),
                            labels=labels)


def _preset(names):
    flat = {}
    for name in names.split("+"):
        if name not in PRESETS:
            raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
        flat.update(PRESETS[name])
    return flat


def load_config(spec):
    """``spec`` is a preset name, presets joined by ``+`` (``mini+three``),
    a JSON file path, or ``None`` for defaults.

    A JSON file may name a base with a ``"preset"`` key.
    """
    if spec is None:
        return ExperimentConfig()
    if spec.endswith(".json") or "/" in spec:
        with open(spec) as fh:
            flat = json.load(fh)
        preset = flat.pop("preset", None)
        base = from_flat(_preset(preset)) if preset else None
        return from_flat(flat, base)
    return from_flat(_preset(spec))


def dump_config(cfg, path=None):
    text = json.dumps(to_flat(cfg), indent=2, sort_keys=True)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    return text
