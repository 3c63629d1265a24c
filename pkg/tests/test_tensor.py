import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smae import _kernels as K
from smae import tensor as T
from smae.layers import Attention, Block, FeedForward, LayerNorm, Linear
from smae.tensor import Tensor


def _rng(seed=0):
    return np.random.default_rng(seed)


# --------------------------------------------------------------------------
# forward values


def test_add_broadcast_and_backward():
    a = T.parameter(np.ones((2, 3)))
    b = T.parameter(np.arange(3.0))
    T.backward(T.sum_all(a + b))
    np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
    np.testing.assert_array_equal(b.grad, np.full(3, 2.0))


def test_matmul_batched_values():
    r = _rng()
    a, b = r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, a @ b)


def test_softmax_rows_sum_to_one_and_shift_invariant():
    x = _rng(1).normal(size=(4, 7)) * 30
    y = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(T.softmax(Tensor(x + 1000.0)).data, y, atol=1e-12)


def test_layer_norm_statistics():
    x = _rng(2).normal(3.0, 5.0, size=(6, 16))
    y = T.layer_norm(Tensor(x)).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)


def test_gelu_known_values():
    y = T.gelu(Tensor(np.array([[0.0, 1.0, -1.0, 10.0]]))).data[0]
    assert y[0] == 0.0
    assert abs(y[1] - 0.8411919906) < 1e-9
    assert abs(y[2] + 0.1588080094) < 1e-9
    assert abs(y[3] - 10.0) < 1e-12


def test_gather_backward_accumulates_repeats():
    a = T.parameter(np.arange(12.0).reshape(1, 4, 3))
    out = T.gather(a, np.array([[0, 0, 2]]))
    np.testing.assert_array_equal(out.data[0], a.data[0, [0, 0, 2]])
    T.backward(T.sum_all(out))
    np.testing.assert_array_equal(a.grad[0, :, 0], [2.0, 0.0, 1.0, 0.0])


def test_masked_mse_values():
    pred = Tensor(np.zeros((1, 3, 2)))
    target = np.array([[[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]])
    mask = np.array([[True, False, True]])
    assert T.masked_mse(pred, target, mask).item() == pytest.approx((1 + 9) / 2)
    assert T.masked_mse(pred, target, None).item() == pytest.approx((1 + 4 + 9) / 3)


# --------------------------------------------------------------------------
# tape semantics


def test_backward_twice_raises():
    a = T.parameter(np.ones(3))
    loss = T.sum_all(T.mul(a, a))
    T.backward(loss)
    with pytest.raises(RuntimeError):
        T.backward(loss)


def test_backward_needs_scalar():
    a = T.parameter(np.ones(3))
    with pytest.raises(ValueError):
        T.backward(T.mul(a, a))


def test_no_grad_builds_no_graph():
    a = T.parameter(np.ones(3))
    with T.no_grad():
        out = T.sum_all(T.mul(a, a))
    assert not out.requires_grad
    with pytest.raises((RuntimeError, ValueError)):
        T.backward(out)


def test_diamond_graph_accumulates():
    a = T.parameter(np.array([2.0]))
    b = T.mul(a, a)
    c = T.add(b, b)
    T.backward(T.sum_all(c))
    np.testing.assert_allclose(a.grad, [8.0])


# --------------------------------------------------------------------------
# gradient checks


@pytest.mark.parametrize("seed", range(5))
def test_grad_check_primitives(seed):
    r = _rng(seed)
    x = r.normal(size=(3, 5))
    w = r.normal(size=(5, 4))
    assert T.grad_check(lambda t: T.sum_all(T.mul(T.matmul(t[0], t[1]), T.matmul(t[0], t[1]))), [x, w]) < 1e-6
    c = Tensor(r.normal(size=(3, 5)))
    assert T.grad_check(lambda t: T.sum_all(T.mul(T.softmax(t[0]), c)), [x]) < 1e-6
    g, b = r.normal(size=5), r.normal(size=5)
    assert T.grad_check(lambda t: T.sum_all(T.mul(T.layer_norm(t[0], t[1], t[2]), c)), [x, g, b]) < 1e-6
    assert T.grad_check(lambda t: T.sum_all(T.mul(T.gelu(t[0]), c)), [x]) < 1e-6


def test_grad_check_gather_concat_split():
    r = _rng(3)
    x = r.normal(size=(2, 5, 3))
    idx = np.array([[4, 0, 0, 2], [1, 1, 3, 3]])
    w = Tensor(r.normal(size=(2, 6, 3)))

    def f(t):
        g = T.gather(t[0], idx)
        head, tail = T.split(t[0], [1, 4], axis=1)
        return T.sum_all(T.mul(T.concat([g, head, T.take_slice(tail, (slice(None), slice(0, 1)))], axis=1), w))

    assert T.grad_check(f, [x]) < 1e-6


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("kind", ["linear", "layernorm", "attention", "ffn", "block"])
def test_grad_check_layers(seed, kind):
    r = _rng(seed)
    D = 8
    layer = {
        "linear": lambda: Linear(D, 5, r),
        "layernorm": lambda: LayerNorm(D),
        "attention": lambda: Attention(D, 2, r),
        "ffn": lambda: FeedForward(D, 16, r),
        "block": lambda: Block(D, 2, 2, r),
    }[kind]()
    for p in layer.parameters():
        p.data += r.normal(0, 0.1, p.shape)
    x = T.parameter(r.normal(size=(2, 4, D)))
    out_shape = layer(Tensor(x.data)).shape
    c = r.normal(size=out_shape)
    err = T.grad_check_params(lambda: T.sum_all(T.mul(layer(x), c)), layer.parameters() + [x])
    assert err < 1e-4


def test_grad_check_params_rejects_float32():
    p = T.parameter(np.ones(2), dtype=np.float32)
    with pytest.raises(TypeError):
        T.grad_check_params(lambda: T.sum_all(p), [p])


@settings(max_examples=25, deadline=None)
@given(
    rows=st.integers(1, 4),
    cols=st.integers(1, 4),
    bshape=st.sampled_from(["full", "row", "col", "scalar"]),
    seed=st.integers(0, 2**16),
)
def test_broadcast_gradients_property(rows, cols, bshape, seed):
    r = _rng(seed)
    shape = {"full": (rows, cols), "row": (cols,), "col": (rows, 1), "scalar": ()}[bshape]
    a, b = r.normal(size=(rows, cols)), r.normal(size=shape)
    assert T.grad_check(lambda t: T.sum_all(T.mul(T.sub(t[0], t[1]), T.add(t[0], t[1]))), [a, b]) < 1e-6


# --------------------------------------------------------------------------
# kernel backends agree


@pytest.mark.parametrize("name", K.KERNELS)
def test_numba_and_numpy_kernels_agree(name):
    if not K.HAVE_NUMBA:
        pytest.skip("numba unavailable")
    r = _rng(7)
    x = r.normal(size=(33, 17))
    g = r.normal(size=(33, 17))
    nb, ref = K.implementation(name, "numba"), K.implementation(name, "numpy")
    if name == "layernorm_fwd":
        a, b = nb(x, 1e-5), ref(x, 1e-5)
    elif name == "layernorm_bwd":
        xhat, rstd = K.np_layernorm_fwd(x, 1e-5)
        a, b = nb(g, xhat, rstd), ref(g, xhat, rstd)
    elif name == "softmax_bwd":
        y = K.np_softmax_fwd(x)
        a, b = nb(y, g), ref(y, g)
    elif name == "scatter_add_rows":
        idx = r.integers(0, 5, 33)
        a, b = nb(np.zeros((5, 17)), idx, g), ref(np.zeros((5, 17)), idx, g)
    elif name.endswith("_bwd"):
        a, b = nb(x, g), ref(x, g)
    else:
        a, b = nb(x), ref(x)
    for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
        np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-12)


def test_backend_selection():
    assert set(K._select("numpy").values()) == {"numpy"}
    if K.HAVE_NUMBA:
        assert set(K._select("numba").values()) == {"numba"}
        auto = K._select("auto")
        assert auto["layernorm_fwd"] == "numba" and auto["gelu_fwd"] == "numpy"


# --------------------------------------------------------------------------
# SGD


def test_sgd_single_step():
    p = T.parameter(np.array([1.0, -2.0]))
    state = T.SgdState(lr=0.1, momentum=0.9)
    assert T.sgd_step([p], [np.array([0.5, 1.0])], state)
    np.testing.assert_allclose(p.data, [0.95, -2.1])


def test_sgd_plain_step():
    p = T.parameter(np.array([1.0]))
    T.sgd_step([p], [np.array([2.0])], T.SgdState(lr=0.1, momentum=0.0))
    np.testing.assert_allclose(p.data, [0.8])


def test_sgd_momentum_recurrence():
    p = T.parameter(np.array([0.0]))
    state = T.SgdState(lr=1.0, momentum=0.9)
    T.sgd_step([p], [np.array([1.0])], state)
    np.testing.assert_allclose(p.data, [-1.0])
    T.sgd_step([p], [np.array([1.0])], state)
    np.testing.assert_allclose(state.velocity[0], [1.9])
    np.testing.assert_allclose(p.data, [-2.9])


def test_sgd_momentum_two_steps():
    p = T.parameter(np.array([0.0]))
    state = T.SgdState(lr=1.0, momentum=0.5)
    T.sgd_step([p], [np.array([1.0])], state)
    T.sgd_step([p], [np.array([1.0])], state)
    # v1 = 1, v2 = 0.5 + 1 = 1.5
    np.testing.assert_allclose(p.data, [-2.5])


def test_sgd_skips_nonfinite():
    p = T.parameter(np.array([1.0, 2.0]))
    state = T.SgdState(lr=0.1)
    assert not T.sgd_step([p], [np.array([np.nan, 1.0])], state)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    assert state.skipped == 1 and not state.velocity


def test_sgd_shape_mismatch():
    p = T.parameter(np.zeros(3))
    with pytest.raises(ValueError):
        T.sgd_step([p], [np.zeros(2)], T.SgdState())


def test_sgd_reduces_quadratic():
    p = T.parameter(np.array([3.0, -4.0]))
    opt = T.SGD([p], lr=0.05, momentum=0.9)
    for _ in range(200):
        opt.zero_grad()
        T.backward(T.sum_all(T.mul(p, p)))
        opt.step()
    assert np.abs(p.data).max() < 1e-3
