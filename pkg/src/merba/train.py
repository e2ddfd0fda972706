"""Datasets, AdamW, the training loop and evaluation."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .dgcm import DgcmOutputs, dgcm_loss, dgcm_predict, single_head_predict, single_loss
from .metrics import EvalReport
from .model import FlowTriplet
from .schedule import lr_at
from .tensor import DiffRecord, Tensor, get_default_dtype, mert

log = logging.getLogger(__name__)

LOG_FIELDS = ["epoch", "lr", "loss_total", "loss_coarse", "loss_fine", "alpha",
              "train_uf1", "val_uf1"]


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


@dataclass
class Dataset:
    x: np.ndarray                 # (N, H, W, 3) flow triplets
    labels: np.ndarray            # full-label indices
    subjects: np.ndarray
    label_names: tuple

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.labels[idx], self.subjects[idx], self.label_names)

    @classmethod
    def from_samples(cls, samples, space):
        x = np.stack([s.triplet.stack() for s in samples]).astype(np.float32)
        labels = np.array([space.index(s.label) for s in samples], dtype=np.int64)
        subjects = np.array([s.subject for s in samples])
        return cls(x, labels, subjects, tuple(space.full))


def save_dataset(path, ds):
    """Directory of MERT flow tensors plus ``index.json``."""
    os.makedirs(path, exist_ok=True)
    index = []
    for i in range(len(ds)):
        name = f"sample_{i:05d}.mert"
        mert.save(os.path.join(path, name), ds.x[i].astype(np.float32))
        index.append({"path": name, "label": ds.label_names[ds.labels[i]],
                      "subject": str(ds.subjects[i])})
    with open(os.path.join(path, "index.json"), "w") as fh:
        json.dump(index, fh, indent=1)


def load_dataset(path, space):
    with open(os.path.join(path, "index.json")) as fh:
        index = json.load(fh)
    x = np.stack([mert.load(os.path.join(path, e["path"])) for e in index]).astype(np.float32)
    labels = np.array([space.index(e["label"]) for e in index], dtype=np.int64)
    subjects = np.array([e["subject"] for e in index])
    return Dataset(x, labels, subjects, tuple(space.full))


def flip_batch(x, rng, p=0.5, negate_u=True):
    """Per-sample random horizontal flip of an ``(N, H, W, 3)`` batch."""
    out = x.copy()
    for i in np.flatnonzero(rng.random(len(x)) < p):
        t = FlowTriplet.from_array(x[i])
        u = t.u[:, ::-1]
        out[i, ..., 0] = -u if negate_u else u
        out[i, ..., 1] = t.v[:, ::-1]
        out[i, ..., 2] = t.m[:, ::-1]
    return out


class AdamW:
    """Adam with decoupled weight decay; decay skips 1-D parameters (norms, biases)."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads, lr):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = grads.get(p)
            if g is None:
                continue
            if self.wd and p.ndim >= 2:
                p.data -= lr * self.wd * p.data
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        return {"t": self.t, "m": self.m, "v": self.v}


def _loss(model, out, labels, epoch, cfg):
    if isinstance(out, DgcmOutputs):
        return dgcm_loss(out, labels, model.space, epoch, cfg.epochs,
                         cfg.fine_mean_over_negatives)
    total = single_loss(out, labels, model.space)
    return _Single(total)


@dataclass
class _Single:
    total: object

    @property
    def coarse(self):
        return self.total

    fine = 0.0
    alpha = float("nan")


def predict(model, x, batch_size=64):
    """Full-label predictions, eval mode, no differentiation record."""
    was_training = model.training
    model.eval()
    preds = []
    try:
        for s in range(0, len(x), batch_size):
            out = model(Tensor(x[s:s + batch_size]))
            if isinstance(out, DgcmOutputs):
                preds.append(dgcm_predict(out.coarse.numpy(), out.fine.numpy(), model.space))
            else:
                preds.append(single_head_predict(out.numpy()))
    finally:
        model.train(was_training)
    return np.concatenate([np.atleast_1d(p) for p in preds])


def evaluate(model, data, batch_size=64):
    pred = predict(model, data.x, batch_size)
    return EvalReport.from_predictions(data.labels, pred, len(model.space.full),
                                       model.space.full)


@dataclass
class TrainResult:
    log: list = field(default_factory=list)
    best_state: dict | None = None
    best_epoch: int = -1
    stop_reason: str = "completed"
    optimizer: AdamW | None = None


def _value(x):
    return x.item() if isinstance(x, Tensor) else float(x)


def train(model, data, cfg, val=None, stop_at_train_acc=None, eval_train=True, max_epochs=None):
    """Train ``model`` in place.

    Each epoch shuffles, optionally flips, and takes one AdamW step per
    mini-batch with the learning rate evaluated at the fractional epoch.
    With ``val`` the run early-stops after ``cfg.patience`` epochs without a
    better validation UF1 and keeps the best state.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.parameters(), cfg.betas, cfg.adam_eps, cfg.weight_decay)
    n = len(data)
    steps = math.ceil(n / cfg.batch_size)
    result = TrainResult(optimizer=opt)
    best_uf1, since_best = -1.0, 0
    dtype = get_default_dtype()
    epochs = cfg.epochs if max_epochs is None else min(cfg.epochs, max_epochs)

    for epoch in range(epochs):
        model.train()
        order = rng.permutation(n)
        sums = np.zeros(3)
        alpha = float("nan")
        for b in range(steps):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            xb = data.x[idx]
            if cfg.flip:
                xb = flip_batch(xb, rng, negate_u=cfg.negate_u)
            lr = lr_at(epoch + b / steps, cfg)
            with DiffRecord() as rec:
                out = model(Tensor(xb.astype(dtype)))
                loss = _loss(model, out, data.labels[idx], epoch, cfg)
            value = loss.total.item()
            if not math.isfinite(value):
                raise TrainingDiverged(epoch)
            opt.step(rec.backward(loss.total), lr)
            sums += [value, _value(loss.coarse), _value(loss.fine)]
            alpha = loss.alpha
        row = {"epoch": epoch, "lr": lr_at(epoch, cfg), "loss_total": sums[0] / steps,
               "loss_coarse": sums[1] / steps, "loss_fine": sums[2] / steps, "alpha": alpha,
               "train_uf1": float("nan"), "val_uf1": float("nan")}
        if eval_train or stop_at_train_acc is not None:
            rep = evaluate(model, data)
            row["train_uf1"], row["train_acc"] = rep.uf1, rep.acc
        if val is not None and len(val):
            vrep = evaluate(model, val)
            row["val_uf1"], row["val_acc"] = vrep.uf1, vrep.acc
        result.log.append(row)
        log.info("epoch %d loss %.4f train_uf1 %.3f val_uf1 %.3f", epoch, row["loss_total"],
                 row["train_uf1"], row["val_uf1"])

        if val is not None and len(val):
            if row["val_uf1"] > best_uf1:
                best_uf1, since_best = row["val_uf1"], 0
                result.best_state = {k: v.copy() for k, v in model.state_dict().items()}
                result.best_epoch = epoch
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    result.stop_reason = f"early stop at epoch {epoch}"
                    break
        if stop_at_train_acc is not None and row.get("train_acc", 0.0) >= stop_at_train_acc:
            result.stop_reason = f"train accuracy target reached at epoch {epoch}"
            break
    if result.best_state is not None:
        model.load_state_dict(result.best_state)
    return result


def write_log_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6g}" if isinstance(r[k], float) else r[k])
                        for k in LOG_FIELDS})
