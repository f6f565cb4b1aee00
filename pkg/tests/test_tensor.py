import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradcases as G
from dccl import tensor as T
from dccl.tensor import Tensor


# ---------------------------------------------------------------- forward examples

def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.eye(2))).data, [[1, 2], [3, 4]])


def test_sigmoid_symmetry_point():
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor([[1.0, 1.0, 1.0]])).data, [[1 / 3] * 3], rtol=0, atol=1e-15)


def test_sigmoid_extremes_are_finite():
    out = T.sigmoid(Tensor([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0


def test_softmax_fully_masked_row_is_zero():
    out = T.softmax(Tensor([[1.0, 2.0], [3.0, 4.0]]), mask=np.array([[True, False], [False, False]])).data
    np.testing.assert_array_equal(out, [[1.0, 0.0], [0.0, 0.0]])


def test_shape_errors():
    with pytest.raises(T.ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(T.ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(IndexError):
        T.gather(Tensor(np.ones((3, 2))), [0, 3])
    with pytest.raises(ValueError):
        T.forward_op("no-such-op", [])


# ---------------------------------------------------------------- backward examples

def test_quadratic_gradient():
    w = T.param([3.0], "w")
    assert T.backward(T.sum_(T.mul(w, w)))["w"][0] == 6.0


def test_sigmoid_xent_gradient_at_zero():
    z = T.param([0.0], "z")
    g = T.backward(T.sum_(T.sigmoid_xent(z, [1.0])))["z"][0]
    assert g == -0.5


def test_untrainable_gets_no_entry():
    w = T.param([1.0, 2.0], "w")
    c = Tensor([3.0, 4.0], name="c")
    grads = T.backward(T.sum_(T.mul(w, c)))
    assert set(grads) == {"w"}


def test_small_mlp_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 2))
    params = {"w1": rng.normal(size=(2, 1)), "b1": rng.normal(size=(1,)), "w2": rng.normal(size=(1, 1)),
              "b2": rng.normal(size=(1,))}   # 5 parameters

    def loss(p):
        h = T.tanh(T.bias_add(T.matmul(Tensor(x), p["w1"]), p["b1"]))
        return T.mean(T.sigmoid_xent(T.bias_add(T.matmul(h, p["w2"]), p["b2"]), np.ones((3, 1))))

    assert T.grad_check(loss, params).max_rel_error < 1e-4


def test_linear_layer_grad_check():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 3))
    params = {"w": rng.normal(size=(3, 2)), "b": rng.normal(size=(2,))}
    r = rng.normal(size=(4, 2))
    report = T.grad_check(lambda p: T.sum_(T.mul(T.bias_add(T.matmul(Tensor(x), p["w"]), p["b"]), Tensor(r))), params)
    assert report.max_rel_error < 1e-6


@pytest.mark.parametrize("kind", T.OP_KINDS)
def test_every_op_matches_finite_differences(kind):
    for seed in range(20):
        loss_fn, params = G.op_case(kind, seed)
        assert T.grad_check(loss_fn, params, h=1e-5).max_rel_error <= 1e-4, (kind, seed)


@pytest.mark.parametrize("name", sorted(G.COMPOSITES))
def test_composites_match_finite_differences(name):
    for seed in range(20):
        loss_fn, params = G.COMPOSITES[name](seed)
        assert T.grad_check(loss_fn, params, h=1e-5).max_rel_error <= 1e-4, (name, seed)


def test_grad_check_refuses_large_problems():
    with pytest.raises(ValueError):
        T.grad_check(lambda p: T.sum_(p["w"]), {"w": np.zeros(20_001)})


# ---------------------------------------------------------------- properties

def _two_losses(x, y):
    def loss_a(w):
        return T.sum_(T.tanh(T.matmul(Tensor(x), w)))

    def loss_b(w):
        return T.mean(T.mul(w, Tensor(y)))

    return loss_a, loss_b


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_backward_is_linear_in_the_loss(seed):
    # each loss reaches w along one path, so no re-association can occur
    rng = np.random.default_rng(seed)
    x, y, wv = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    loss_a, loss_b = _two_losses(x, y)
    ga = T.backward(loss_a(T.param(wv, "w")))["w"]
    gb = T.backward(loss_b(T.param(wv, "w")))["w"]
    w = T.param(wv, "w")
    np.testing.assert_array_equal(T.backward(T.add(loss_a(w), loss_b(w)))["w"], ga + gb)


def test_backward_linearity_with_shared_paths_is_within_rounding():
    rng = np.random.default_rng(3)
    x, wv = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))

    def loss_a(w):
        return T.sum_(T.tanh(T.matmul(Tensor(x), w)))

    def loss_b(w):
        return T.mean(T.mul(w, w))   # two contributions to w

    ga = T.backward(loss_a(T.param(wv, "w")))["w"]
    gb = T.backward(loss_b(T.param(wv, "w")))["w"]
    w = T.param(wv, "w")
    gab = T.backward(T.add(loss_a(w), loss_b(w)))["w"]
    np.testing.assert_allclose(gab, ga + gb, rtol=4 * np.finfo(float).eps, atol=0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=30), st.integers(0, 2**31 - 1))
def test_gather_scatter_adds(idx, seed):
    rng = np.random.default_rng(seed)
    table = T.param(rng.normal(size=(5, 3)), "t")
    up = rng.normal(size=(len(idx), 3))
    grad = T.backward(T.sum_(T.mul(T.gather(table, idx), Tensor(up))))["t"]
    expect = np.zeros((5, 3))
    for r, i in enumerate(idx):
        expect[i] += up[r]
    np.testing.assert_array_equal(grad, expect)


def test_forward_and_backward_are_deterministic():
    runs = []
    for _ in range(2):
        loss_fn, params = G.attention_case(7)
        leaves = {k: T.param(v, k) for k, v in params.items()}
        loss = loss_fn(leaves)
        runs.append((float(loss.data), T.backward(loss)))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        np.testing.assert_array_equal(runs[0][1][k], runs[1][1][k])


def test_no_grad_records_nothing():
    w = T.param([1.0], "w")
    with T.no_grad():
        out = T.mul(w, w)
    assert not out.requires_grad and out._parents == ()


# ---------------------------------------------------------------- Adam

def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    T.adam_step(p, {"w": np.zeros(2)}, T.AdamState())
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step():
    p = {"w": np.array([0.5])}
    T.adam_step(p, {"w": np.array([1.0])}, T.AdamState(lr=1e-3))
    # bias-corrected moments after one step are g and g^2
    assert p["w"][0] == 0.5 - 1e-3 * 1.0 / (1.0 + 1e-8)


def test_adam_state_shapes_and_counter():
    st_ = T.AdamState()
    p = {"a": np.zeros((2, 3)), "b": np.zeros(4)}
    for step in range(1, 4):
        T.adam_step(p, {"a": np.ones((2, 3)), "b": np.ones(4)}, st_)
        assert st_.t == step
    assert all(st_.m[k].shape == p[k].shape and st_.v[k].shape == p[k].shape for k in p)


def test_adam_is_deterministic():
    out = []
    for _ in range(2):
        rng = np.random.default_rng(11)
        p = {"w": rng.normal(size=5)}
        s = T.AdamState(lr=0.01)
        for _ in range(10):
            T.adam_step(p, {"w": rng.normal(size=5)}, s)
        out.append(p["w"])
    np.testing.assert_array_equal(out[0], out[1])


def test_adam_rejects_mismatched_gradients():
    with pytest.raises(KeyError):
        T.adam_step({"w": np.zeros(2)}, {"v": np.zeros(2)}, T.AdamState())
    with pytest.raises(T.ShapeError):
        T.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, T.AdamState())


def test_tensor_hash_detects_changes():
    a = {"x": np.arange(4.0)}
    h = T.tensor_hash(a)
    assert T.tensor_hash({"x": np.arange(4.0)}) == h
    assert T.tensor_hash({"x": np.arange(4.0).reshape(2, 2)}) != h
    b = {"x": np.arange(4.0)}
    b["x"][0] = np.nextafter(0.0, 1.0)
    assert T.tensor_hash(b) != h
