"""Coarse-to-fine classification: label spaces, heads, loss and prediction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Linear, Module
from .tensor import functional as F

NEGATIVE = "negative"


@dataclass(frozen=True)
class LabelSpace:
    full: tuple
    coarse: tuple
    coarse_of: dict          # full label -> coarse label
    fine: tuple              # fine-negative labels, a subset of ``full``

    @classmethod
    def from_config(cls, labels):
        full = tuple(labels["full"])
        cmap = dict(labels["coarse_map"])
        coarse = []
        for name in full:
            c = cmap.get(name)
            if c is not None and c not in coarse:
                coarse.append(c)
        return cls(full, tuple(coarse), cmap, tuple(labels.get("fine", ())))

    def __post_init__(self):
        missing = [f for f in self.full if f not in self.coarse_of]
        if missing:
            raise ValueError(f"coarse map is not total; unmapped: {missing}")
        stray = set(self.coarse_of) - set(self.full)
        if stray:
            raise ValueError(f"coarse map names unknown labels {sorted(stray)}")
        if len(set(self.fine)) != len(self.fine) or not set(self.fine) <= set(self.full):
            raise ValueError("fine labels must be distinct members of the full label set")
        if self.fine:
            negatives = {f for f in self.full if self.coarse_of[f] == NEGATIVE}
            if negatives != set(self.fine):
                raise ValueError(
                    f"labels mapped to {NEGATIVE!r} {sorted(negatives)} must equal the fine set "
                    f"{sorted(self.fine)}")
        for c in self.coarse:
            if c == NEGATIVE and self.fine:
                continue
            members = [f for f in self.full if self.coarse_of[f] == c]
            if len(members) != 1:
                raise ValueError(f"coarse class {c!r} maps to {members}; only {NEGATIVE!r} may "
                                 "group several labels")

    @property
    def negative_index(self):
        return self.coarse.index(NEGATIVE) if NEGATIVE in self.coarse else -1

    def index(self, label):
        if isinstance(label, (int, np.integer)):
            if not 0 <= label < len(self.full):
                raise ValueError(f"label index {label} outside 0..{len(self.full) - 1}")
            return int(label)
        try:
            return self.full.index(label)
        except ValueError:
            raise ValueError(f"label {label!r} is not in the label space") from None

    def coarse_index(self, full_idx):
        return self.coarse.index(self.coarse_of[self.full[full_idx]])

    def fine_index(self, full_idx):
        name = self.full[full_idx]
        return self.fine.index(name) if name in self.fine else -1

    def full_of_coarse(self, coarse_idx):
        c = self.coarse[coarse_idx]
        return next(i for i, f in enumerate(self.full) if self.coarse_of[f] == c)

    def full_of_fine(self, fine_idx):
        return self.full.index(self.fine[fine_idx])


def alpha(epoch, total_epochs):
    """Fine-branch weight: ``min(0.5 + 2 * epoch / total, 2.0)``."""
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return min(0.5 + 2.0 * epoch / total_epochs, 2.0)


def combine(l_coarse, l_fine, a):
    return 0.5 * (l_coarse + a * l_fine)


@dataclass
class LossBreakdown:
    total: object
    coarse: object
    fine: object
    alpha: float


class DgcmHead(Module):
    def __init__(self, dim, space, rng):
        self.space = space
        self.coarse = Linear(dim, len(space.coarse), rng)
        self.fine = Linear(dim, len(space.fine), rng)

    def forward(self, feat):
        return DgcmOutputs(self.coarse(feat), self.fine(feat))


class SingleHead(Module):
    def __init__(self, dim, space, rng):
        self.space = space
        self.fc = Linear(dim, len(space.full), rng)

    def forward(self, feat):
        return self.fc(feat)


@dataclass
class DgcmOutputs:
    coarse: object        # Tensor (B, |coarse|)
    fine: object          # Tensor (B, |fine|)


def dgcm_loss(out, labels, space, epoch, total_epochs, fine_mean_over_negatives=True):
    """Batch loss; the fine term only sees samples whose truth is negative.

    ``labels`` are full-label names or indices.  The coarse term is the mean
    over the batch.  The fine term is averaged over the negative samples
    (or over the whole batch when ``fine_mean_over_negatives`` is off) and is
    exactly zero, with no graph link to the fine head, when there are none.
    """
    idx = [space.index(y) for y in np.atleast_1d(np.asarray(labels, dtype=object))]
    a = alpha(epoch, total_epochs)
    coarse_t = [space.coarse_index(i) for i in idx]
    l_coarse = F.cross_entropy(out.coarse, coarse_t).mean()
    neg_rows = [r for r, i in enumerate(idx) if space.fine_index(i) >= 0]
    if neg_rows:
        fine_logits = F.take(out.fine, neg_rows, axis=0)
        per = F.cross_entropy(fine_logits, [space.fine_index(idx[r]) for r in neg_rows])
        l_fine = per.mean() if fine_mean_over_negatives else per.sum() * (1.0 / len(idx))
        total = combine(l_coarse, l_fine, a)
    else:
        l_fine = 0.0
        total = l_coarse * 0.5
    return LossBreakdown(total, l_coarse, l_fine, a)


def single_loss(logits, labels, space):
    idx = [space.index(y) for y in np.atleast_1d(np.asarray(labels, dtype=object))]
    return F.cross_entropy(logits, idx).mean()


def _argmax(row):
    # ties -> lowest index
    return int(np.argmax(row))


def dgcm_predict(coarse_logits, fine_logits, space):
    """Full-label indices from coarse/fine logits (1-D for one sample, 2-D for a batch)."""
    c = np.atleast_2d(np.asarray(coarse_logits))
    f = np.atleast_2d(np.asarray(fine_logits))
    neg = space.negative_index
    preds = []
    for crow, frow in zip(c, f):
        k = _argmax(crow)
        if k == neg:
            preds.append(space.full_of_fine(_argmax(frow)))
        else:
            preds.append(space.full_of_coarse(k))
    return preds[0] if np.ndim(coarse_logits) == 1 else np.asarray(preds)


def single_head_predict(logits):
    z = np.asarray(logits)
    if z.ndim == 1:
        return _argmax(z)
    return np.asarray([_argmax(r) for r in z])
