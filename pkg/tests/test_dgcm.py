import itertools
import math

import numpy as np
import pytest

from merba.config import DFME_LABELS, MMEW_LABELS
from merba.dgcm import (
    DgcmHead, DgcmOutputs, LabelSpace, alpha, combine, dgcm_loss, dgcm_predict,
    single_head_predict,
)
from merba.tensor import DiffRecord, Tensor

SPACE = LabelSpace.from_config(DFME_LABELS)


def outputs(coarse, fine):
    return DgcmOutputs(Tensor(np.atleast_2d(coarse)), Tensor(np.atleast_2d(fine)))


# ---- label spaces -------------------------------------------------------------------

def test_dfme_space():
    assert SPACE.coarse == ("negative", "contempt", "positive", "surprise")
    assert SPACE.fine == ("anger", "disgust", "fear", "sadness")
    assert [SPACE.full_of_fine(i) for i in range(4)] == [0, 2, 3, 5]


def test_mmew_space():
    s = LabelSpace.from_config(MMEW_LABELS)
    assert set(s.coarse) == {"negative", "positive", "surprise"}


def test_partial_coarse_map_rejected():
    bad = dict(DFME_LABELS, coarse_map={k: v for k, v in DFME_LABELS["coarse_map"].items()
                                        if k != "contempt"})
    with pytest.raises(ValueError, match="not total"):
        LabelSpace.from_config(bad)


def test_fine_set_must_match_negatives():
    bad = dict(DFME_LABELS, fine=["anger", "disgust", "fear"])
    with pytest.raises(ValueError):
        LabelSpace.from_config(bad)


def test_grouped_non_negative_class_rejected():
    cmap = dict(DFME_LABELS["coarse_map"], contempt="positive")
    with pytest.raises(ValueError, match="only 'negative'"):
        LabelSpace.from_config(dict(DFME_LABELS, coarse_map=cmap))


def test_unknown_label_rejected():
    with pytest.raises(ValueError):
        SPACE.index("joy")
    with pytest.raises(ValueError):
        dgcm_loss(outputs(np.zeros(4), np.zeros(4)), ["joy"], SPACE, 0, 10)


# ---- alpha ------------------------------------------------------------------------------

def test_alpha_values():
    assert alpha(0, 100) == 0.5
    assert alpha(75, 100) == 2.0
    assert alpha(100, 100) == 2.0
    assert alpha(40, 100) == pytest.approx(1.3)


def test_alpha_rejects_zero_total():
    with pytest.raises(ValueError):
        alpha(0, 0)


def test_alpha_sweep():
    for total in (1, 2, 3, 7, 10, 199, 200, 1000, 10_000):
        prev = 0.0
        for e in range(total + 1):
            a = alpha(e, total)
            assert 0.5 <= a <= 2.0 and a >= prev
            prev = a
        assert alpha(0, total) == 0.5 and alpha(total, total) == 2.0


# ---- loss -----------------------------------------------------------------------------------

def test_combine_arithmetic():
    assert combine(1.0, 2.0, 0.5) == 1.0


def test_uniform_coarse_logits_give_log_k():
    b = dgcm_loss(outputs(np.zeros(4), np.zeros(4)), ["happiness"], SPACE, 0, 10)
    assert b.coarse.item() == pytest.approx(math.log(4))


def test_non_negative_label_has_no_fine_term():
    rng = np.random.default_rng(0)
    b = dgcm_loss(outputs(rng.standard_normal(4), rng.standard_normal(4)), ["happiness"],
                  SPACE, 3, 10)
    assert b.fine == 0.0
    assert b.total.item() == pytest.approx(0.5 * b.coarse.item())


def test_negative_label_combines_both_terms(f64):
    rng = np.random.default_rng(1)
    c, f = rng.standard_normal(4), rng.standard_normal(4)
    b = dgcm_loss(outputs(c, f), ["fear"], SPACE, 20, 100)
    lc = -c[0] + np.log(np.exp(c).sum())        # coarse "negative" is index 0
    lf = -f[2] + np.log(np.exp(f).sum())        # fear is fine index 2
    assert b.total.item() == pytest.approx(0.5 * (lc + 0.9 * lf), abs=1e-12)


def test_fine_term_averages_over_negatives_only(f64):
    rng = np.random.default_rng(2)
    c, f = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    labels = ["anger", "happiness", "sadness"]
    b = dgcm_loss(outputs(c, f), labels, SPACE, 0, 10)
    per = [-f[0, 0] + np.log(np.exp(f[0]).sum()), -f[2, 3] + np.log(np.exp(f[2]).sum())]
    assert b.fine.item() == pytest.approx(np.mean(per), abs=1e-12)
    b2 = dgcm_loss(outputs(c, f), labels, SPACE, 0, 10, fine_mean_over_negatives=False)
    assert b2.fine.item() == pytest.approx(np.sum(per) / 3, abs=1e-12)


def test_fine_head_gets_exactly_zero_gradient_without_negatives():
    rng = np.random.default_rng(3)
    head = DgcmHead(8, SPACE, rng)
    feat = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
    with DiffRecord() as rec:
        b = dgcm_loss(head(feat), ["happiness", "surprise", "contempt", "happiness"], SPACE, 5, 10)
    grads = rec.backward(b.total)
    assert np.array_equal(grads.of(head.fine.weight), np.zeros((8, 4)))
    assert np.array_equal(grads.of(head.fine.bias), np.zeros(4))
    assert np.abs(grads.of(head.coarse.weight)).max() > 0


# ---- prediction -------------------------------------------------------------------------------

def test_bypass_rule():
    c = np.array([0.0, 0.0, 0.0, 5.0])          # surprise
    assert SPACE.full[dgcm_predict(c, np.array([9.0, 0, 0, 0]), SPACE)] == "surprise"


def test_negative_routes_through_fine():
    c = np.array([5.0, 0.0, 0.0, 0.0])
    assert SPACE.full[dgcm_predict(c, np.array([0, 0, 3.0, 0]), SPACE)] == "fear"


def test_batch_prediction():
    c = np.array([[5.0, 0, 0, 0], [0, 0, 5.0, 0]])
    f = np.array([[0, 1.0, 0, 0], [9.0, 0, 0, 0]])
    assert [SPACE.full[i] for i in dgcm_predict(c, f, SPACE)] == ["disgust", "happiness"]


def test_tie_table():
    # every 4-logit vector over {0, 1}: prediction is the lowest index holding the max
    for bits in itertools.product([0.0, 1.0], repeat=4):
        v = np.array(bits)
        lowest = int(np.flatnonzero(v == v.max())[0])
        assert single_head_predict(v) == lowest
        assert dgcm_predict(np.array([9.0, 0, 0, 0]), v, SPACE) == SPACE.full_of_fine(lowest)
        assert dgcm_predict(v, np.zeros(4), SPACE) == (
            SPACE.full_of_fine(0) if lowest == 0 else SPACE.full_of_coarse(lowest))


def test_tie_rule_under_relabeling():
    # permuting logits together with the labels keeps the winner when there is no tie
    rng = np.random.default_rng(4)
    for _ in range(50):
        v = rng.standard_normal(4)
        perm = rng.permutation(4)
        assert perm[single_head_predict(v[perm])] == single_head_predict(v)


def test_shift_invariance_and_counterfactual_fine():
    rng = np.random.default_rng(5)
    for _ in range(200):
        c, f = rng.standard_normal(4), rng.standard_normal(4)
        p = dgcm_predict(c, f, SPACE)
        assert dgcm_predict(c + rng.normal() * 10, f, SPACE) == p
        assert dgcm_predict(c, f + rng.normal() * 10, SPACE) == p
        if int(np.argmax(c)) != SPACE.negative_index:
            assert dgcm_predict(c, rng.standard_normal(4) * 100, SPACE) == p


def test_single_head_matches_max_scan():
    rng = np.random.default_rng(6)
    for _ in range(100):
        v = rng.standard_normal(7)
        best = 0
        for i in range(1, 7):
            if v[i] > v[best]:
                best = i
        assert single_head_predict(v) == best
    assert single_head_predict(np.zeros(7)) == 0
    assert single_head_predict(np.eye(7)[3]) == 3
