"""Learning-rate schedule: linear warmup, cosine decay, constant cooldown floor."""
from __future__ import annotations

import math


def lr_at(epoch, cfg):
    """Learning rate at (possibly fractional) ``epoch``.

    ``[0, warmup)`` rises linearly from 0 to ``peak_lr``; the span up to
    ``epochs - cooldown`` follows a half cosine from peak to
    ``peak_lr * floor_ratio``; the cooldown holds the floor.
    """
    peak = cfg.peak_lr
    floor = peak * cfg.floor_ratio
    warm = cfg.warmup_epochs
    cool_start = cfg.epochs - cfg.cooldown_epochs
    if epoch < warm:
        return peak * epoch / warm
    if epoch >= cool_start:
        return floor
    span = cool_start - warm
    frac = (epoch - warm) / span
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))
