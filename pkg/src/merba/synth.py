"""Synthetic optical-flow samples standing in for licensed micro-expression data.

Every class is a Gaussian-windowed motion blob with its own (region, angle)
signature.  Negative subclasses can share a region and differ only by a small
angle gap, which makes them deliberately confusable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import make_triplet


@dataclass(frozen=True)
class ClassSignature:
    label: str
    center: tuple            # (row, col) as fractions of the extent
    angle: float             # motion direction, radians
    amplitude: float = 1.0


@dataclass(frozen=True)
class SyntheticSpec:
    extent: int
    classes: tuple
    sigma: float = 0.08      # blob width as a fraction of the extent
    noise: float = 0.0       # std of additive noise on u and v
    jitter: float = 0.0      # std of blob-centre jitter, in pixels
    amplitude_jitter: float = 0.0

    def __post_init__(self):
        sigs = [(c.center, round(c.angle, 12)) for c in self.classes]
        if len(set(sigs)) != len(sigs):
            raise ValueError("classes must have distinct (region, angle) signatures")
        if len({c.label for c in self.classes}) != len(self.classes):
            raise ValueError("duplicate class label")

    @property
    def labels(self):
        return tuple(c.label for c in self.classes)


def three_class_spec(extent=56, noise=0.0, jitter=0.0):
    # mirror images (flip augmentation) must not coincide with another class
    return SyntheticSpec(extent, (
        ClassSignature("negative", (0.3, 0.3), 0.0),
        ClassSignature("positive", (0.7, 0.5), -math.pi / 2),
        ClassSignature("surprise", (0.25, 0.5), math.pi / 2),
    ), noise=noise, jitter=jitter)


def seven_class_spec(extent=56, angle_gap=math.radians(25), noise=0.3, jitter=1.0,
                     amplitude_jitter=0.2):
    """DFME-style 7 classes; the four negatives share one region."""
    neg_center = (0.35, 0.5)
    negatives = [ClassSignature(name, neg_center, k * angle_gap)
                 for k, name in enumerate(("anger", "disgust", "fear", "sadness"))]
    return SyntheticSpec(extent, (
        negatives[0],
        ClassSignature("contempt", (0.65, 0.25), math.pi / 3),
        negatives[1], negatives[2],
        ClassSignature("happiness", (0.7, 0.5), -math.pi / 2),
        negatives[3],
        ClassSignature("surprise", (0.2, 0.75), math.pi),
    ), noise=noise, jitter=jitter, amplitude_jitter=amplitude_jitter)


def render(sig, spec, rng):
    n = spec.extent
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    cy, cx = sig.center[0] * (n - 1), sig.center[1] * (n - 1)
    if spec.jitter:
        cy += rng.normal(0, spec.jitter)
        cx += rng.normal(0, spec.jitter)
    s = spec.sigma * n
    g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    amp = sig.amplitude * (1 + rng.normal(0, spec.amplitude_jitter) if spec.amplitude_jitter else 1)
    u = amp * math.cos(sig.angle) * g
    v = amp * math.sin(sig.angle) * g
    if spec.noise:
        u = u + rng.normal(0, spec.noise, u.shape)
        v = v + rng.normal(0, spec.noise, v.shape)
    return make_triplet(u, v)


@dataclass
class Sample:
    triplet: object
    label: str
    subject: str


def synth_dataset(spec, n_per_class, rng, n_subjects=None):
    """``n_per_class`` samples per class; subjects are dealt round-robin.

    The class offset spreads small per-class counts over every subject while each
    class still cycles through all of them.
    """
    out = []
    for i in range(n_per_class):
        for c, sig in enumerate(spec.classes):
            subj = f"s{((i + c) % n_subjects) if n_subjects else i:02d}"
            out.append(Sample(render(sig, spec, rng), sig.label, subj))
    return out


def region_probe(samples, spec):
    """Predict each sample's class from motion energy inside each class region."""
    n = spec.extent
    yy, xx = np.mgrid[0:n, 0:n]
    masks = []
    r = spec.sigma * n * 1.5
    for sig in spec.classes:
        cy, cx = sig.center[0] * (n - 1), sig.center[1] * (n - 1)
        masks.append(((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(float))
    masks = np.stack(masks)
    feats = np.einsum("khw,nhw->nk", masks, np.stack([s.triplet.m for s in samples]))
    return feats.argmax(axis=1)
