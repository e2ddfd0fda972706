"""Independent reference implementations shared by the test modules.

Nothing here calls into the code under test except to read parameter
payloads; every oracle is written from the defining formula with plain loops.
"""
import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))


def scan_oracle(u, delta, A, B, C, skip, zoh=False):
    """Step-by-step selective scan with explicit loops over batch, time, channel, state."""
    nb, T, E = u.shape
    N = A.shape[1]
    y = np.zeros((nb, T, E))
    for b in range(nb):
        for e in range(E):
            h = [0.0] * N
            for t in range(T):
                acc = 0.0
                for n in range(N):
                    da = delta[b, t, e] * A[e, n]
                    decay = math.exp(da)
                    if zoh:
                        bbar = (decay - 1.0) / A[e, n] * B[b, t, n]
                    else:
                        bbar = delta[b, t, e] * B[b, t, n]
                    h[n] = decay * h[n] + bbar * u[b, t, e]
                    acc += C[b, t, n] * h[n]
                y[b, t, e] = acc + skip[e] * u[b, t, e]
    return y


def metrics_oracle(cm):
    """Per-class loop: (uf1, uar, acc) with the same exclusion conventions."""
    k = len(cm)
    f1s, recalls = [], []
    total = correct = 0
    for c in range(k):
        tp = cm[c][c]
        fn = sum(cm[c][j] for j in range(k) if j != c)
        fp = sum(cm[i][c] for i in range(k) if i != c)
        if 2 * tp + fp + fn > 0:
            f1s.append(2 * tp / (2 * tp + fp + fn))
        if tp + fn > 0:
            recalls.append(tp / (tp + fn))
        correct += tp
        total += sum(cm[c])
    return (sum(f1s) / len(f1s) if f1s else 0.0,
            sum(recalls) / len(recalls) if recalls else 0.0,
            correct / total if total else 0.0)


@pytest.fixture
def f64():
    from merba.tensor import default_dtype
    with default_dtype(np.float64):
        yield
