"""Float64 finite-difference checks of whole blocks and a miniature model."""
from __future__ import annotations

import numpy as np

from .config import from_flat, TINY_MODEL
from .dgcm import dgcm_loss
from .lgfi import Attention, LocalExtractor
from .mixer import Mixer, MixerConfig
from .model import build_classifier
from .tensor import Tensor, default_dtype, grad_check


def _projected(out, rng):
    # a fixed random projection turns any output into a scalar with dense gradients
    w = Tensor(rng.standard_normal(out.shape))
    return (out * w).sum()


def _block_case(block, x, rng):
    seed = int(rng.integers(1 << 31))

    def fn():
        return _projected(block(x), np.random.default_rng(seed))
    params = dict(block.named_parameters())
    params["input"] = x
    return fn, params


def check_cases(seed=0):
    """Yield ``(name, fn, params)`` for every block in the suite."""
    rng = np.random.default_rng(seed)
    mixer = Mixer(8, rng, MixerConfig(state_dim=3))
    yield ("mixer",) + _block_case(mixer, Tensor(rng.standard_normal((2, 5, 8)), requires_grad=True), rng)

    zoh = Mixer(8, rng, MixerConfig(state_dim=3, exact_zoh=True))
    yield ("mixer_exact_zoh",) + _block_case(zoh, Tensor(rng.standard_normal((2, 5, 8)), requires_grad=True), rng)

    attn = Attention(8, 2, rng)
    yield ("attention",) + _block_case(attn, Tensor(rng.standard_normal((2, 6, 8)), requires_grad=True), rng)

    ext = LocalExtractor(8, rng, mixer_cfg=MixerConfig(state_dim=3))
    yield ("extractor",) + _block_case(ext, Tensor(rng.standard_normal((2, 3, 3, 8)), requires_grad=True), rng)

    exp = from_flat(dict(TINY_MODEL, **{"model.dropout": 0.0}))
    model = build_classifier(exp, seed=seed)
    space = model.space
    x = Tensor(rng.standard_normal((2, exp.model.input_size, exp.model.input_size, 3)),
               requires_grad=True)
    # one negative and one non-negative sample so both heads receive gradient
    labels = [space.fine[0], space.full[space.full_of_coarse(
        next(i for i, c in enumerate(space.coarse) if i != space.negative_index))]]

    def model_fn():
        return dgcm_loss(model(x), labels, space, 0, exp.train.epochs).total
    params = dict(model.named_parameters())
    params["input"] = x
    yield "model_tiny", model_fn, params


def run_suite(seed=0, tolerance=1e-4, max_entries=8):
    """Run every case in float64; returns ``[(name, GradCheckReport), ...]``."""
    out = []
    with default_dtype(np.float64):
        for name, fn, params in check_cases(seed):
            rep = grad_check(fn, params, tolerance=tolerance, max_entries=max_entries,
                             rng=np.random.default_rng(seed))
            out.append((name, rep))
    return out


__all__ = ["check_cases", "run_suite"]
