"""Subject-grouped cross-validation splits."""
from __future__ import annotations

import numpy as np


def group_splits(subject_ids, mode="loso", k=5, seed=None):
    """List of ``(train_idx, test_idx)`` index arrays; subjects never straddle.

    ``mode="loso"`` gives one split per distinct subject (in sorted order).
    ``mode="kfold"`` deals the distinct subjects into ``k`` folds round-robin,
    after an optional seeded shuffle.
    """
    ids = np.asarray(subject_ids)
    if ids.size == 0:
        raise ValueError("no samples to split")
    subjects = sorted(set(ids.tolist()))
    if mode == "loso":
        folds = [[s] for s in subjects]
    elif mode == "kfold":
        if k < 2 or k > len(subjects):
            raise ValueError(f"k={k} folds need between 2 and {len(subjects)} distinct subjects")
        order = list(subjects)
        if seed is not None:
            np.random.default_rng(seed).shuffle(order)
        folds = [order[i::k] for i in range(k)]
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    out = []
    for fold in folds:
        test = np.isin(ids, fold)
        out.append((np.flatnonzero(~test), np.flatnonzero(test)))
    return out


def holdout_subjects(subject_ids, fraction, seed=0):
    """Subject-disjoint (train_idx, val_idx) with about ``fraction`` of subjects held out."""
    ids = np.asarray(subject_ids)
    subjects = sorted(set(ids.tolist()))
    n_val = int(round(fraction * len(subjects)))
    if n_val == 0 or n_val >= len(subjects):
        return np.arange(len(ids)), np.array([], dtype=np.int64)
    rng = np.random.default_rng(seed)
    val = set(rng.choice(np.array(subjects, dtype=object), size=n_val, replace=False).tolist())
    mask = np.array([s in val for s in ids.tolist()])
    return np.flatnonzero(~mask), np.flatnonzero(mask)
