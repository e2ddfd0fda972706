"""Gradient-weighted activation maps over the last feature-extractor stage."""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .dgcm import DgcmOutputs
from .model import FlowTriplet
from .tensor import DiffRecord, Tensor, get_default_dtype
from .tensor import functional as F


@dataclass
class CamResult:
    cam: np.ndarray          # (H4, W4), min-max normalized to [0, 1]
    degenerate: bool         # True when the raw map was flat (returned as zeros)
    raw: np.ndarray


def cam_from_activation(act, grad):
    """Combine an activation map ``(h, w, C)`` with its gradient of the score."""
    weights = grad.mean(axis=(0, 1))
    raw = np.maximum((act * weights).sum(axis=-1), 0.0)
    lo, hi = raw.min(), raw.max()
    if not np.isfinite(hi - lo) or hi - lo <= 0:
        return CamResult(np.zeros_like(raw), True, raw)
    return CamResult((raw - lo) / (hi - lo), False, raw)


def class_score(out, target, space):
    """Scalar score of full label ``target`` for the first sample."""
    if isinstance(out, DgcmOutputs):
        c = space.coarse_index(target)
        score = F.slice_axis(F.slice_axis(out.coarse, 0, 1, 0), c, c + 1, 1)
        k = space.fine_index(target)
        if k >= 0:
            score = score + F.slice_axis(F.slice_axis(out.fine, 0, 1, 0), k, k + 1, 1)
        return score.sum()
    return F.slice_axis(F.slice_axis(out, 0, 1, 0), target, target + 1, 1).sum()


def grad_cam(model, x, target):
    """Activation map for full-label index ``target`` on one flow triplet."""
    arr = x.stack() if isinstance(x, FlowTriplet) else np.asarray(x)
    inp = Tensor(arr[None].astype(get_default_dtype()))
    was_training = model.training
    model.eval()
    try:
        keep = {}
        with DiffRecord() as rec:
            out = model(inp, keep=keep)
            score = class_score(out, model.space.index(target), model.space)
        grads = rec.backward(score)
    finally:
        model.train(was_training)
    act = keep["pre_pool"]
    return cam_from_activation(act.numpy()[0], grads.of(act)[0])


def upsample_nearest(cam, extent):
    h, w = cam.shape
    rows = np.arange(extent) * h // extent
    cols = np.arange(extent) * w // extent
    return cam[rows][:, cols]


def write_pgm(path, image):
    """Binary (P5) 8-bit greyscale; input values are clipped to [0, 1]."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    data = np.round(img * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w) / maxval
