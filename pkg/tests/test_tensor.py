import numpy as np
import pytest

from merba.tensor import (
    PRIMITIVES, BatchNormState, DiffRecord, ShapeError, Tensor, apply_primitive, backward,
    grad_check, meta_mode, mert, output_shape,
)
from merba.tensor import functional as F


def rnd(rng, *shape, requires_grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad)


# ---- forward examples --------------------------------------------------------

def test_matmul_identity():
    x = np.arange(12.0).reshape(3, 4)
    out = F.matmul(Tensor(np.eye(3)), Tensor(x))
    assert np.array_equal(out.numpy(), x.astype(np.float32))


def test_softmax_uniform():
    out = F.softmax(Tensor(np.zeros(4)))
    assert np.allclose(out.numpy(), 0.25)


def test_conv2d_center_of_ones():
    x = Tensor(np.ones((1, 4, 4, 1)))
    w = Tensor(np.ones((3, 3, 1, 1)))
    out = F.conv2d(x, w, padding=1).numpy()
    assert out.shape == (1, 4, 4, 1)
    assert out[0, 1, 1, 0] == 9.0
    assert out[0, 0, 0, 0] == 4.0


def test_conv2d_matches_loop_oracle(f64):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 5, 6, 3))
    w = rng.standard_normal((3, 3, 3, 4))
    b = rng.standard_normal(4)
    out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).numpy()
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((2, 3, 3, 4))
    for n in range(2):
        for i in range(3):
            for j in range(3):
                patch = xp[n, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
                for o in range(4):
                    ref[n, i, j, o] = (patch * w[..., o]).sum() + b[o]
    assert np.allclose(out, ref, atol=1e-12)


def test_silu_gelu_softplus_values(f64):
    x = Tensor(np.array([-2.0, 0.0, 1.5]))
    assert np.allclose(F.silu(x).numpy(), x.data / (1 + np.exp(-x.data)))
    assert np.allclose(F.softplus(x).numpy(), np.log1p(np.exp(x.data)))
    assert np.allclose(F.gelu(Tensor(np.array([0.0]))).numpy(), 0.0)


def test_forward_stays_finite_on_extreme_input():
    x = Tensor(np.array([-1e4, -50.0, 0.0, 50.0, 1e4]))
    for fn in (F.silu, F.gelu, F.softplus, F.softmax, F.relu):
        assert np.isfinite(fn(x).numpy()).all(), fn.__name__
    ce = F.cross_entropy(Tensor(np.array([[1e4, -1e4, 0.0]])), [1])
    assert np.isfinite(ce.numpy()).all()


# ---- shape rules ---------------------------------------------------------------

def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        F.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_unknown_attribute_rejected():
    with pytest.raises(ValueError, match="unknown attribute"):
        apply_primitive("softmax", (Tensor(np.ones(3)),), axis=0, temperature=2)


def test_missing_attribute_rejected():
    with pytest.raises(ValueError, match="missing"):
        apply_primitive("reshape", (Tensor(np.ones(3)),))


def test_zero_extent_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.ones((0, 3)))


CASES = {
    "add": lambda r: ((rnd(r, 2, 3), rnd(r, 3)), {}),
    "sub": lambda r: ((rnd(r, 2, 3), rnd(r, 2, 1)), {}),
    "mul": lambda r: ((rnd(r, 2, 3), rnd(r, 1, 3)), {}),
    "div": lambda r: ((rnd(r, 2, 3), Tensor(r.uniform(1, 2, (2, 3)), requires_grad=True)), {}),
    "neg": lambda r: ((rnd(r, 4),), {}),
    "exp": lambda r: ((rnd(r, 2, 2),), {}),
    "log": lambda r: ((Tensor(r.uniform(0.5, 2, (3,)), requires_grad=True),), {}),
    "relu": lambda r: ((Tensor(r.choice([-1, 1], 6) * r.uniform(0.1, 1, 6), requires_grad=True),), {}),
    "silu": lambda r: ((rnd(r, 5),), {}),
    "gelu": lambda r: ((rnd(r, 5),), {}),
    "softplus": lambda r: ((rnd(r, 5),), {}),
    "sum": lambda r: ((rnd(r, 2, 3, 4),), {"axis": 1, "keepdims": True}),
    "mean": lambda r: ((rnd(r, 2, 3, 4),), {"axis": (0, 2)}),
    "reshape": lambda r: ((rnd(r, 2, 6),), {"shape": (3, -1)}),
    "transpose": lambda r: ((rnd(r, 2, 3, 4),), {"axes": (2, 0, 1)}),
    "concat": lambda r: ((rnd(r, 2, 3), rnd(r, 2, 2)), {"axis": 1}),
    "slice": lambda r: ((rnd(r, 4, 3),), {"axis": 0, "start": 1, "stop": 3}),
    "take": lambda r: ((rnd(r, 4, 3),), {"indices": np.array([3, 0, 0, 2]), "axis": 0}),
    "matmul": lambda r: ((rnd(r, 2, 3, 4), rnd(r, 4, 5)), {}),
    "softmax": lambda r: ((rnd(r, 3, 4),), {"axis": -1}),
    "cross_entropy": lambda r: ((rnd(r, 3, 4),), {"targets": np.array([0, 3, 1])}),
    "layer_norm": lambda r: ((rnd(r, 2, 3, 5), rnd(r, 5), rnd(r, 5)), {"eps": 1e-5}),
    "batch_norm": lambda r: ((rnd(r, 4, 2, 2, 3), rnd(r, 3), rnd(r, 3)),
                             {"training": True, "state": BatchNormState(3, np.float64)}),
    "conv2d": lambda r: ((rnd(r, 2, 5, 5, 2), rnd(r, 3, 3, 2, 3), rnd(r, 3)),
                         {"stride": 2, "padding": 1}),
    "conv1d_depthwise": lambda r: ((rnd(r, 2, 6, 3), rnd(r, 3, 3), rnd(r, 3)), {}),
    "avg_pool": lambda r: ((rnd(r, 2, 3, 4, 5),), {}),
    "dropout": lambda r: ((rnd(r, 4, 4),), {"p": 0.3, "rng": 5}),
    "selective_scan": lambda r: ((
        rnd(r, 2, 5, 3), Tensor(r.uniform(0.1, 0.8, (2, 5, 3)), requires_grad=True),
        Tensor(-r.uniform(0.5, 2, (3, 2)), requires_grad=True),
        rnd(r, 2, 5, 2), rnd(r, 2, 5, 2), rnd(r, 3)), {"zoh": False}),
}


def _apply(kind, inputs, attrs):
    attrs = dict(attrs)
    if kind == "dropout":
        attrs["rng"] = np.random.default_rng(attrs["rng"])       # same mask every call
    if kind == "batch_norm":
        attrs["state"] = BatchNormState(inputs[0].shape[-1], inputs[0].dtype)
    return apply_primitive(kind, inputs, **attrs)


def test_every_primitive_has_a_case():
    assert set(CASES) == set(PRIMITIVES)


@pytest.mark.parametrize("kind", sorted(CASES))
def test_shape_rule_matches_forward(kind):
    inputs, attrs = CASES[kind](np.random.default_rng(0))
    out = _apply(kind, inputs, attrs)
    attrs = {k: v for k, v in attrs.items() if k not in ("rng", "state")}
    extra = {"dropout": {"rng": None}, "batch_norm": {"state": None}}.get(kind, {})
    assert output_shape(kind, [t.shape for t in inputs], **attrs, **extra) == out.shape
    with meta_mode():
        metas = [Tensor.meta(t.shape) for t in inputs]
        assert _apply(kind, metas, CASES[kind](np.random.default_rng(0))[1]).shape == out.shape


@pytest.mark.parametrize("kind", sorted(CASES))
def test_primitive_gradients(kind, f64):
    rng = np.random.default_rng(42)
    inputs, attrs = CASES[kind](rng)
    proj = rng.standard_normal(_apply(kind, inputs, attrs).shape)

    def fn():
        return (_apply(kind, inputs, attrs) * Tensor(proj)).sum()
    params = {f"in{i}": t for i, t in enumerate(inputs) if t.requires_grad}
    rep = grad_check(fn, params)
    assert rep.passed, list(rep.lines())


def test_zoh_scan_gradient(f64):
    rng = np.random.default_rng(3)
    inputs, _ = CASES["selective_scan"](rng)
    proj = rng.standard_normal(inputs[0].shape)

    def fn():
        return (F.selective_scan(*inputs, zoh=True) * Tensor(proj)).sum()
    assert grad_check(fn, dict(enumerate(inputs))).passed


# ---- backward examples -----------------------------------------------------------

def test_quadratic_gradient():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    with DiffRecord() as rec:
        f = (x * x).sum()
    assert np.allclose(rec.backward(f).of(x), [2, 4, 6])


def test_silu_gradient_at_zero():
    x = Tensor(np.zeros(4), requires_grad=True)
    with DiffRecord() as rec:
        f = F.silu(x).sum()
    assert np.allclose(rec.backward(f).of(x), 0.5)


def test_non_scalar_seed_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with DiffRecord() as rec:
        y = x * 2.0
    with pytest.raises(ShapeError, match="scalar"):
        backward(rec, y)


def test_gradient_shapes_match_values():
    rng = np.random.default_rng(0)
    a, b = rnd(rng, 3, 4), rnd(rng, 4)
    with DiffRecord() as rec:
        loss = F.softmax(a + b).sum() * 0.0 + F.silu(F.matmul(a, Tensor(np.ones((4, 2))))).sum()
    grads = rec.backward(loss)
    for node in rec.nodes:
        if node.out in grads:
            assert grads[node.out].shape == node.out.shape
    assert grads.of(a).shape == a.shape and grads.of(b).shape == b.shape


def test_record_is_topologically_ordered():
    rng = np.random.default_rng(0)
    x = rnd(rng, 3)
    with DiffRecord() as rec:
        y = F.exp(x) * F.silu(x)
        (y + x).sum()
    seen = set()
    for node in rec.nodes:
        for t in node.inputs:
            assert t is x or not t.requires_grad or id(t) in seen
        seen.add(id(node.out))


def test_non_ancestors_get_no_gradient():
    rng = np.random.default_rng(0)
    x, z = rnd(rng, 3), rnd(rng, 3)
    with DiffRecord() as rec:
        f = (x * 2.0).sum()
        F.exp(z).sum()
    grads = rec.backward(f)
    assert z not in grads
    assert np.array_equal(grads.of(z), np.zeros(3))


# ---- grad_check itself -----------------------------------------------------------

def test_linear_layer_ten_params(f64):
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((4, 3)))
    w, b = rnd(rng, 3, 2), rnd(rng, 2)
    w2 = rnd(rng, 2, 1)

    def fn():
        return F.silu(F.matmul(F.linear(x, w, b), w2)).sum()
    rep = grad_check(fn, {"w": w, "b": b, "w2": w2})
    assert w.size + b.size + w2.size == 10
    assert rep.passed and rep.max_error <= 1e-4


def test_constant_graph_has_zero_error(f64):
    p = Tensor(np.ones(3), requires_grad=True)

    def fn():
        return Tensor(np.array(5.0)) * 1.0
    rep = grad_check(fn, {"p": p})
    assert rep.max_error == 0.0 and rep.passed


def test_corrupted_backward_is_caught(f64, monkeypatch):
    prim = PRIMITIVES["silu"]
    good = prim.backward
    monkeypatch.setattr(prim, "backward", lambda ctx, g, **a: tuple(0.9 * x for x in good(ctx, g, **a)))
    x = Tensor(np.random.default_rng(0).standard_normal(5), requires_grad=True)
    rep = grad_check(lambda: F.silu(x).sum(), {"x": x})
    assert not rep.passed


def test_grad_check_requires_f64():
    x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        grad_check(lambda: x.sum(), {"x": x})


# ---- properties --------------------------------------------------------------------

def test_matmul_and_conv_are_additive(f64):
    rng = np.random.default_rng(7)
    w = Tensor(rng.standard_normal((3, 3, 2, 4)))
    m = Tensor(rng.standard_normal((2, 5)))
    x, y = rng.standard_normal((2, 6, 6, 2)), rng.standard_normal((2, 6, 6, 2))
    lhs = F.conv2d(Tensor(x + y), w, padding=1).numpy()
    rhs = F.conv2d(Tensor(x), w, padding=1).numpy() + F.conv2d(Tensor(y), w, padding=1).numpy()
    assert np.allclose(lhs, rhs, rtol=1e-6, atol=1e-12)
    a, b = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    assert np.allclose(F.matmul(Tensor(a + b), m).numpy(),
                       F.matmul(Tensor(a), m).numpy() + F.matmul(Tensor(b), m).numpy(), rtol=1e-6)


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.standard_normal((2, 8, 8, 3)))
        w = Tensor(rng.standard_normal((3, 3, 3, 4)))
        h = F.gelu(F.conv2d(x, w, padding=1))
        return F.dropout(h, 0.1, np.random.default_rng(2)).numpy()
    assert np.array_equal(run(), run())


def test_dropout_is_inverted_and_off_in_eval():
    x = Tensor(np.ones((200, 200)))
    out = F.dropout(x, 0.1, np.random.default_rng(0)).numpy()
    kept = out[out > 0]
    assert np.allclose(kept, 1 / 0.9)
    assert abs(out.mean() - 1.0) < 0.01
    assert F.dropout(x, 0.1, np.random.default_rng(0), training=False) is x


def test_batch_norm_running_stats():
    state = BatchNormState(2, np.float32)
    x = np.random.default_rng(0).standard_normal((5, 3, 3, 2)) * 3 + 1
    F.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, training=True)
    flat = x.reshape(-1, 2)
    assert np.allclose(state.mean, 0.1 * flat.mean(0), atol=1e-6)
    assert np.allclose(state.var, 0.9 + 0.1 * flat.var(0, ddof=1), atol=1e-5)
    y = F.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, training=False)
    ref = (x - state.mean) / np.sqrt(state.var + 1e-5)
    assert np.allclose(y.numpy(), ref, atol=1e-5)


def test_avg_pool_of_constant_map():
    out = F.avg_pool(Tensor(np.full((1, 3, 3, 2), 2.5))).numpy()
    assert out.shape == (1, 1, 1, 2) and np.allclose(out, 2.5)


# ---- MERT ------------------------------------------------------------------------------

@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_mert_round_trip(tmp_path, dtype):
    arr = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(dtype)
    path = tmp_path / "x.mert"
    mert.save(path, arr)
    back = mert.load(path)
    assert back.dtype == dtype and np.array_equal(back, arr)


def test_mert_layout():
    buf = mert.dumps(np.array([[1.0, 2.0]], dtype=np.float32))
    assert buf[:4] == b"MERT" and buf[4] == 1 and buf[5] == 0 and buf[6] == 2
    assert int.from_bytes(buf[7:15], "little") == 1 and int.from_bytes(buf[15:23], "little") == 2
    assert np.frombuffer(buf[23:], "<f4").tolist() == [1.0, 2.0]


def test_mert_rejects_corruption():
    buf = mert.dumps(np.ones(3))
    with pytest.raises(mert.MertError):
        mert.loads(b"XXXX" + buf[4:])
    with pytest.raises(mert.MertError):
        mert.loads(buf[:-1])
    with pytest.raises(mert.MertError):
        mert.dumps(np.ones(3, dtype=np.int32))
