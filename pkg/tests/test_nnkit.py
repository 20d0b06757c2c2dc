import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hisr import nnkit as nk


def check_grad(build, shapes, seed=0, tol=1e-4, scale=1.0):
    rng = np.random.default_rng(seed)
    params = {k: rng.normal(0, scale, size=s) for k, s in shapes.items()}

    def f(p):
        return float(build({k: nk.Tensor(v) for k, v in p.items()}).value)

    leaves = {k: nk.leaf(v, k) for k, v in params.items()}
    analytic = nk.grad(build(leaves), leaves)
    numeric = nk.finite_difference(f, params)
    for k in params:
        assert nk.relative_error(analytic[k], numeric[k], floor=1e-6) <= tol, k


UNARY = {
    "exp": lambda x: nk.sum(nk.exp(x)),
    "log": lambda x: nk.sum(nk.log(nk.add(nk.square(x), 1.0))),
    "sigmoid": lambda x: nk.sum(nk.sigmoid(x)),
    "tanh": lambda x: nk.sum(nk.tanh(x)),
    "silu": lambda x: nk.sum(nk.silu(x)),
    "square": lambda x: nk.mean(nk.square(x)),
    "clip": lambda x: nk.sum(nk.mul(nk.clip(x, -0.5, 0.5), x)),
    "log_softmax": lambda x: nk.sum(nk.mul(nk.log_softmax(x), np.arange(12.0).reshape(3, 4))),
    "softmax_xent": lambda x: nk.mean(nk.softmax_xent(x, np.array([0, 3, 1]))),
    "masked_xent": lambda x: nk.mean(nk.softmax_xent(x, np.array([0, 2, 3]), np.array([[1, 0, 1, 1]] * 3, bool))),
    "transpose": lambda x: nk.sum(nk.mul(nk.transpose(x), np.arange(12.0).reshape(4, 3))),
    "getitem": lambda x: nk.sum(nk.square(nk.getitem(x, (np.array([0, 0, 2]), np.array([1, 1, 3]))))),
    "reshape": lambda x: nk.sum(nk.mul(nk.reshape(x, (2, 6)), np.arange(12.0).reshape(2, 6))),
    "stack_concat": lambda x: nk.sum(nk.square(nk.concat([nk.stack([x, x]), nk.stack([x, nk.neg(x)])], axis=-1))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    check_grad(lambda p: UNARY[name](p["x"]), {"x": (3, 4)}, seed=len(name))


def test_binary_gradients_with_broadcast():
    def build(p):
        y = nk.matmul(p["a"], p["w"]) + p["b"]
        z = nk.minimum(y, nk.sub(p["b"], y))
        return nk.mean(nk.mul(z, y))

    check_grad(build, {"a": (5, 3), "w": (3, 4), "b": (4,)})


def test_kl_rows_gradient_with_masked_entries():
    mask = np.array([[1, 1, 0, 1], [1, 1, 1, 1], [0, 1, 1, 0]], bool)
    ref = nk.log_softmax(nk.Tensor(np.random.default_rng(3).normal(size=(3, 4))), mask).value
    check_grad(lambda p: nk.sum(nk.kl_rows(nk.log_softmax(p["x"], mask), ref)), {"x": (3, 4)})
    same = nk.kl_rows(nk.Tensor(ref), ref).value
    assert np.allclose(same, 0.0)


def test_gated_scan_gradients_and_stepwise_agreement():
    rng = np.random.default_rng(5)
    V, E, H, B, T = 7, 3, 4, 2, 5
    tokens = rng.integers(0, V, size=(B, T))
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], float)

    def build(p):
        s = nk.gated_scan(p["emb"], p["wx"], p["wh"], p["b"], tokens, mask)
        return nk.sum(nk.mul(s, np.linspace(-1, 1, T * B * H).reshape(T, B, H)))

    check_grad(build, {"emb": (V, E), "wx": (E, 2 * H), "wh": (H, 2 * H), "b": (2 * H,)})

    from hisr import encoder as enc

    P = {"emb": nk.Tensor(rng.normal(size=(V, E))), "e.wx": nk.Tensor(rng.normal(size=(E, 2 * H))), "e.wh": nk.Tensor(rng.normal(size=(H, 2 * H))), "e.b": nk.Tensor(rng.normal(size=2 * H))}
    fused = enc.run(P, "e", tokens, mask).value
    h = nk.Tensor(np.zeros((B, H)))
    for t in range(T):
        h = enc.cell(P, "e", h, tokens[:, t], mask[:, t])
        assert np.array_equal(h.value, fused[t])


def test_quadratic_and_constant():
    w = nk.leaf(np.array([1.0, 2.0]), "w")
    assert np.array_equal(nk.grad(nk.sum(nk.square(w)), {"w": w})["w"], [2.0, 4.0])
    c = nk.Tensor(3.0)
    assert nk.grad(c, {"w": w})["w"].tolist() == [0.0, 0.0]


def test_unsupported_primitive_is_rejected():
    w = nk.leaf(np.ones(3), "w")
    bad = nk.Tensor(np.sin(w.value).sum(), op="sin", parents=(w,), backward=lambda g: (g * np.cos(w.value),), requires_grad=True)
    with pytest.raises(nk.UnsupportedPrimitiveError):
        nk.grad(bad, {"w": w})
    with pytest.raises(TypeError):
        np.sin(w)


def test_mlp_head_examples():
    assert float(nk.mlp_head(np.zeros(3), np.ones((2, 3)), np.ones((1, 2))).value) == 0.0
    assert float(nk.mlp_head(np.array([1.0]), [[1.0]], [[1.0]]).value) == pytest.approx(0.7310585786, abs=1e-9)
    h = np.random.default_rng(0).normal(size=(4, 3))
    assert np.all(nk.mlp_head(h, np.ones((2, 3)), np.zeros((1, 2))).value == 0.0)
    with pytest.raises(ValueError):
        nk.mlp_head(np.ones(3), np.ones((2, 4)), np.ones((1, 2)))
    with pytest.raises(ValueError):
        nk.mlp_head(np.ones(3), np.ones((2, 3)), np.ones((2, 2)))


def test_mlp_head_gradient():
    check_grad(lambda p: nk.sum(nk.square(nk.mlp_head(p["h"], p["w1"], p["w2"]))), {"h": (5, 3), "w1": (4, 3), "w2": (1, 4)})


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 4))
def test_random_graph_gradients(seed, n, k):
    def build(p):
        hidden = nk.silu(nk.matmul(p["x"], p["w"]))
        logits = nk.add(hidden, nk.clip(p["x"] @ p["w"], -0.7, 0.7))
        nll = nk.mean(nk.softmax_xent(logits, np.arange(n) % k))
        return nk.add(nll, nk.mean(nk.exp(nk.neg(nk.square(hidden)))))

    check_grad(build, {"x": (n, 3), "w": (3, k)}, seed=seed)


def test_adam_examples():
    ps = nk.ParamSet({"w": np.array([1.0])})
    st_ = nk.OptimState(lr=0.1)
    nk.adam_step(ps, {"w": np.zeros(1)}, st_)
    assert ps["w"][0] == 1.0
    nk.adam_step(ps, {"w": 2 * ps["w"]}, st_)
    assert abs(ps["w"][0]) < 1.0
    a, b = nk.ParamSet({"w": np.array([0.5, -1.0])}), nk.ParamSet({"w": np.array([0.5, -1.0])})
    sa, sb = nk.OptimState(lr=0.01), nk.OptimState(lr=0.01)
    for _ in range(5):
        nk.adam_step(a, {"w": np.array([0.3, 0.1])}, sa)
        nk.adam_step(b, {"w": np.array([0.3, 0.1])}, sb)
    assert a.equal(b)
    with pytest.raises(ValueError):
        nk.adam_step(a, {"w": np.zeros(3)}, sa)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    ps = nk.ParamSet({"a": rng.normal(size=(3, 4)), "b.c": rng.normal(size=7), "s": np.array(np.pi)}, version="x/1")
    ps.arrays["b.c"][0] = np.nextafter(0.0, 1.0)
    p = tmp_path / "m.ckpt"
    nk.save_params(ps, p)
    raw = p.read_bytes()
    assert raw[:4] == b"HISR"
    back = nk.load_params(p)
    assert back.equal(ps) and back.version == "x/1"
    nk.save_params(back, tmp_path / "n.ckpt")
    assert (tmp_path / "n.ckpt").read_bytes() == raw
    (tmp_path / "bad").write_bytes(b"NOPE")
    with pytest.raises(ValueError):
        nk.load_params(tmp_path / "bad")


def test_paramset_names_unique():
    ps = nk.ParamSet()
    ps.add("w", np.zeros(2))
    with pytest.raises(KeyError):
        ps.add("w", np.zeros(2))
