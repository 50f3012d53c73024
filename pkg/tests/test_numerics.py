import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capcomp import numerics as nx
from capcomp.numerics import ShapeError, Tape, TapeError, Tensor, backward, grad_check


def _t(a, grad=False):
    return Tensor(np.asarray(a, dtype=float), requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        a = np.random.default_rng(0).normal(size=(3, 3))
        np.testing.assert_array_equal(nx.matmul(_t(np.eye(3)), _t(a)).data, a)

    def test_hand_product(self):
        out = nx.matmul(_t([[1, 2], [3, 4]]), _t([[0], [1]]))
        np.testing.assert_array_equal(out.data, [[2], [4]])

    def test_gradient_of_sum(self):
        rng = np.random.default_rng(1)
        a, b = _t(rng.normal(size=(2, 3)), grad=True), _t(rng.normal(size=(3, 4)))
        with Tape() as tape:
            loss = nx.tsum(nx.matmul(a, b))
        backward(loss, tape)
        np.testing.assert_allclose(a.grad, np.ones((2, 4)) @ b.data.T, atol=1e-14)

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            nx.matmul(_t(np.ones((2, 3))), _t(np.ones((2, 3))))

    def test_associativity(self):
        rng = np.random.default_rng(2)
        a, b, c = (_t(rng.normal(size=s)) for s in [(3, 4), (4, 5), (5, 2)])
        np.testing.assert_allclose(((a @ b) @ c).data, (a @ (b @ c)).data, atol=1e-9)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nx.softmax(_t([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)

    def test_log_weights(self):
        out = nx.softmax(_t([math.log(1), math.log(2), math.log(3)])).data
        np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)

    def test_extreme_magnitudes(self):
        out = nx.softmax(_t([1000.0, 0.0])).data
        assert out[0] == 1.0 and out[1] == 0.0
        assert np.isfinite(out).all()

    def test_empty_axis(self):
        with pytest.raises(ShapeError):
            nx.softmax(_t(np.zeros((2, 0))))

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12))
    def test_simplex(self, xs):
        p = nx.softmax(_t(xs)).data
        assert (p >= 0).all()
        assert abs(p.sum() - 1.0) <= 1e-12


class TestLogSoftmax:
    def test_zeros(self):
        np.testing.assert_allclose(nx.log_softmax(_t([0.0, 0.0])).data, [-math.log(2)] * 2)

    def test_closed_form(self):
        c = math.log(1 + math.exp(-1))
        np.testing.assert_allclose(nx.log_softmax(_t([1.0, 0.0])).data, [-c, -1 - c], atol=1e-15)

    def test_matches_log_of_softmax(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            x = _t(rng.uniform(-5, 5, size=rng.integers(1, 9)))
            ls = nx.log_softmax(x).data
            np.testing.assert_allclose(ls, np.log(nx.softmax(x).data), atol=1e-10)
            np.testing.assert_allclose(np.exp(ls), nx.softmax(x).data, atol=1e-10)
            assert abs(np.exp(ls).sum() - 1) < 1e-12


class TestLayerNorm:
    def test_constant_row(self):
        out = nx.layer_norm(_t([[3.0, 3.0, 3.0]]), _t(np.ones(3)), _t(np.zeros(3)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_population_variance(self):
        out = nx.layer_norm(_t([1.0, 3.0]), _t(np.ones(2)), _t(np.zeros(2)))
        expected = np.array([-1.0, 1.0]) / math.sqrt(1.0 + 1e-5)
        np.testing.assert_allclose(out.data, expected, atol=1e-15)

    def test_zero_mean(self):
        x = np.random.default_rng(4).normal(size=(6, 7))
        out = nx.layer_norm(_t(x), _t(np.ones(7)), _t(np.zeros(7))).data
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-9)

    def test_empty_row(self):
        with pytest.raises(ShapeError):
            nx.layer_norm(_t(np.zeros((2, 0))), _t(np.ones(0)), _t(np.zeros(0)))


class TestAttention:
    def test_single_position(self):
        rng = np.random.default_rng(5)
        q, k, v = (_t(rng.normal(size=(1, 4))) for _ in range(3))
        np.testing.assert_array_equal(nx.attention(q, k, v).data, v.data)

    def test_identical_keys_average_values(self):
        rng = np.random.default_rng(6)
        q = _t(rng.normal(size=(3, 4)))
        k = _t(np.tile(rng.normal(size=(1, 4)), (5, 1)))
        v = _t(rng.normal(size=(5, 2)))
        out = nx.attention(q, k, v).data
        np.testing.assert_allclose(out, np.tile(v.data.mean(axis=0), (3, 1)), atol=1e-14)

    def test_causal_first_position_ignores_future(self):
        rng = np.random.default_rng(7)
        q, k, v = (rng.normal(size=(4, 3)) for _ in range(3))
        base = nx.attention(_t(q), _t(k), _t(v), causal_mask=True).data
        k2, v2 = k.copy(), v.copy()
        k2[1:] += 10.0
        v2[1:] -= 3.0
        pert = nx.attention(_t(q), _t(k2), _t(v2), causal_mask=True).data
        np.testing.assert_array_equal(base[0], pert[0])
        np.testing.assert_array_equal(base[0], v[0])

    def test_key_mask(self):
        rng = np.random.default_rng(8)
        q, k, v = (rng.normal(size=(1, 3, 2)) for _ in range(3))
        mask = np.array([[True, True, False]])
        out = nx.attention(_t(q), _t(k), _t(v), key_mask=mask).data
        ref = nx.attention(_t(q), _t(k[:, :2]), _t(v[:, :2])).data
        np.testing.assert_allclose(out, ref, atol=1e-14)

    def test_head_dim_mismatch(self):
        with pytest.raises(ShapeError):
            nx.attention(_t(np.ones((2, 3))), _t(np.ones((2, 4))), _t(np.ones((2, 4))))


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = _t(np.arange(6.0).reshape(2, 3), grad=True)
        with Tape() as tape:
            loss = nx.tsum(x)
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_grad(self):
        x = _t(np.random.default_rng(9).normal(size=(4,)), grad=True)
        with Tape() as tape:
            loss = nx.tsum(x * x)
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-15)

    def test_non_scalar_loss(self):
        x = _t(np.ones(3), grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ShapeError):
            backward(y, tape)

    def test_tape_single_use(self):
        x = _t(np.ones(3), grad=True)
        with Tape() as tape:
            loss = nx.tsum(x)
        backward(loss, tape)
        with pytest.raises(TapeError):
            backward(loss, tape)

    def test_non_participating_leaf_gets_zero(self):
        x, unused = _t(np.ones(3), grad=True), _t(np.ones(2), grad=True)
        with Tape() as tape:
            loss = nx.tsum(x)
        backward(loss, tape, params=[x, unused])
        np.testing.assert_array_equal(unused.grad, np.zeros(2))

    def test_no_tape_records_nothing(self):
        x = _t(np.ones(3), grad=True)
        y = nx.tsum(x * x)
        assert not y.requires_grad

    def test_reused_intermediate(self):
        x = _t([1.0, 2.0], grad=True)
        with Tape() as tape:
            y = x * 3.0
            loss = nx.tsum(y * y + y)
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, 3 * (2 * 3 * x.data + 1))

    def test_nonfinite_surfaces(self):
        with pytest.raises(FloatingPointError):
            nx.log(_t([0.0, 1.0]))
        with pytest.raises(FloatingPointError):
            nx.exp(_t([1e4]))


class TestGradCheck:
    def test_sum_is_exact(self):
        x = _t(np.random.default_rng(10).normal(size=(3, 3)))
        rep = grad_check(lambda: nx.tsum(x), x)
        assert rep.max_rel_error < 1e-9

    def test_quadratic_truncation_bound(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(4, 4))
        x = _t(rng.normal(size=(4, 1)))
        rep = grad_check(lambda: nx.tsum(x * nx.matmul(_t(a), x)), x, h=1e-5)
        assert rep.max_rel_error < 1e-7


def _random_case(rng, op):
    m, n = rng.integers(1, 9, size=2)
    x = _t(rng.normal(size=(m, n)))
    w = _t(rng.normal(size=(m, n)))
    if op == "matmul":
        b = _t(rng.normal(size=(n, rng.integers(1, 9))))
        return [x, b], lambda: nx.tsum(nx.tanh(nx.matmul(x, b)))
    if op == "softmax":
        return [x], lambda: nx.tsum(nx.mul(nx.softmax(x, axis=-1), w))
    if op == "log_softmax":
        return [x], lambda: nx.tsum(nx.mul(nx.log_softmax(x, axis=-1), w))
    if op == "layer_norm":
        g, b = _t(rng.normal(size=(n,))), _t(rng.normal(size=(n,)))
        return [x, g, b], lambda: nx.tsum(nx.mul(nx.layer_norm(x, g, b), w))
    if op == "attention":
        k, v = _t(rng.normal(size=(m, n))), _t(rng.normal(size=(m, n)))
        return [x, k, v], lambda: nx.tsum(nx.mul(nx.attention(x, k, v, causal_mask=True), w))
    if op == "gelu":
        return [x], lambda: nx.tsum(nx.mul(nx.gelu(x), w))
    if op == "sigmoid":
        return [x], lambda: nx.tsum(nx.mul(nx.sigmoid(x), w)) + nx.tsum(nx.log_sigmoid(x))
    if op == "exp_log":
        return [x], lambda: nx.tsum(nx.log(nx.exp(nx.mul(x, 0.3)) + 1.0))
    if op == "shape":
        return [x], lambda: nx.tsum(nx.mul(nx.reshape(nx.transpose(x, (1, 0)), (-1,)),
                                           nx.reshape(nx.transpose(w, (1, 0)), (-1,))))
    if op == "gather":
        idx = rng.integers(0, m, size=(3, 2))
        return [x], lambda: nx.tsum(nx.tanh(nx.take(x, idx, axis=0)))
    if op == "pick":
        idx = rng.integers(0, n, size=(m,))
        return [x], lambda: nx.tsum(nx.pick(nx.log_softmax(x), idx))
    if op == "concat_mean":
        return [x, w], lambda: nx.mean(nx.tanh(nx.concat([x, w], axis=1)))
    raise KeyError(op)


OPS = ["matmul", "softmax", "log_softmax", "layer_norm", "attention", "gelu", "sigmoid",
       "exp_log", "shape", "gather", "pick", "concat_mean"]


@pytest.mark.parametrize("op", OPS)
def test_gradients_match_finite_differences(op):
    rng = np.random.default_rng(100 + OPS.index(op))
    for _ in range(5):
        xs, f = _random_case(rng, op)
        rep = grad_check(f, xs, h=1e-5)
        assert rep.max_rel_error < 1e-4, (op, rep)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_determinism(seed):
    rng = np.random.default_rng(seed)
    x = _t(rng.normal(size=(5, 4)))
    k = _t(rng.normal(size=(5, 4)))
    a = nx.attention(x, k, k, causal_mask=True).data
    b = nx.attention(x, k, k, causal_mask=True).data
    assert a.tobytes() == b.tobytes()
