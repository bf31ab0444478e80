import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icegraph import tensor as T
from icegraph.errors import ConfigError, ContractError, ShapeError


def matmul_oracle(a, b):
    """Brute-force triple loop, independent of numpy's matmul path."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for l in range(k):
                acc += a[i, l] * b[l, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        x = np.arange(9.0).reshape(3, 3)
        out = T.matmul(T.Tensor(np.eye(3)), T.Tensor(x))
        np.testing.assert_array_equal(out.data, x)

    def test_one_by_one(self):
        out = T.matmul(T.Tensor([[2.0]]), T.Tensor([[3.0]]))
        assert out.item() == 6.0

    def test_against_triple_loop(self):
        rng = np.random.default_rng(42)
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(5, 3))
        out = T.matmul(T.Tensor(a), T.Tensor(b))
        np.testing.assert_allclose(out.data, matmul_oracle(a, b), rtol=0, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


class TestActivations:
    def test_hardswish_anchor_points(self):
        x = T.Tensor([0.0, 3.0, -3.0, 6.0, -5.0])
        out = T.hardswish(x)
        np.testing.assert_array_equal(out.data, [0.0, 3.0, 0.0, 6.0, 0.0])

    def test_hardswish_midpoint(self):
        # x * (x + 3) / 6 inside the transition band
        out = T.hardswish(T.Tensor([1.0]))
        np.testing.assert_allclose(out.data, [1.0 * 4.0 / 6.0], atol=1e-15)

    def test_leaky_relu(self):
        out = T.leaky_relu(T.Tensor([-1.0, 2.0]), slope=0.2)
        np.testing.assert_allclose(out.data, [-0.2, 2.0], atol=1e-15)

    def test_sigmoid_tanh_zero(self):
        assert T.sigmoid(T.Tensor([0.0])).data[0] == 0.5
        assert T.tanh(T.Tensor([0.0])).data[0] == 0.0

    def test_relu6(self):
        out = T.relu6(T.Tensor([-1.0, 3.0, 7.0]))
        np.testing.assert_array_equal(out.data, [0.0, 3.0, 6.0])

    def test_dispatcher(self):
        out = T.activation("hardswish", T.Tensor([3.0]))
        assert out.data[0] == 3.0
        out = T.activation("leaky_relu", T.Tensor([-1.0]), slope=0.2)
        assert out.data[0] == pytest.approx(-0.2)

    def test_dispatcher_unknown_kind(self):
        with pytest.raises(ConfigError):
            T.activation("selu", T.Tensor([1.0]))

    def test_dispatcher_missing_slope(self):
        with pytest.raises(ConfigError):
            T.activation("leaky_relu", T.Tensor([1.0]))

    @given(st.floats(min_value=3.0, max_value=1e6))
    def test_hardswish_identity_above_three(self, x):
        assert T.hardswish(T.Tensor([x])).data[0] == x

    @given(st.floats(min_value=-1e6, max_value=-3.0))
    def test_hardswish_zero_below_minus_three(self, x):
        assert T.hardswish(T.Tensor([x])).data[0] == 0.0


class TestSoftmaxRows:
    def test_uniform(self):
        out = T.softmax_rows(T.Tensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)

    def test_large_values_do_not_overflow(self):
        out = T.softmax_rows(T.Tensor([[1000.0, 1000.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-15)

    def test_analytic_ratio(self):
        out = T.softmax_rows(T.Tensor([[0.0, math.log(3.0)]]))
        np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-12)

    @given(
        st.lists(
            st.lists(st.floats(min_value=-50, max_value=50), min_size=2, max_size=6),
            min_size=1,
            max_size=5,
        ).filter(lambda rows: len({len(r) for r in rows}) == 1)
    )
    @settings(max_examples=50)
    def test_rows_sum_to_one(self, rows):
        out = T.softmax_rows(T.Tensor(rows))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)
        assert (out.data >= 0).all()


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = T.Tensor([1.0, 2.0, 3.0])
        assert T.dropout(x, 0.5, training=False) is x

    def test_p_zero_is_identity(self):
        x = T.Tensor([1.0, 2.0])
        assert T.dropout(x, 0.0, training=True) is x

    def test_monte_carlo_mean(self):
        rng = np.random.default_rng(7)
        x = T.Tensor(np.ones(100_000))
        out = T.dropout(x, 0.2, training=True, rng=rng)
        assert abs(out.data.mean() - 1.0) < 0.01

    def test_bad_probability(self):
        with pytest.raises(ConfigError):
            T.dropout(T.Tensor([1.0]), 1.0, training=True)
        with pytest.raises(ConfigError):
            T.dropout(T.Tensor([1.0]), -0.1, training=False)


class TestBackward:
    def test_square_gradient(self):
        x = T.Parameter(np.array([3.0]), "x")
        tape = T.Tape()
        with tape:
            loss = T.sum_all(T.mul(x.value, x.value))
        T.backward(loss, tape)
        np.testing.assert_allclose(x.grad, [6.0], atol=1e-14)

    def test_linear_gradient_is_column_sums(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(4, 3))
        x = T.Parameter(rng.normal(size=(3, 2)), "x")
        tape = T.Tape()
        with tape:
            loss = T.sum_all(T.matmul(T.Tensor(a), x.value))
        T.backward(loss, tape)
        expected = np.repeat(a.sum(axis=0)[:, None], 2, axis=1)
        np.testing.assert_allclose(x.grad, expected, atol=1e-12)

    def test_two_backwards_accumulate(self):
        x = T.Parameter(np.array([2.0]), "x")
        for _ in range(2):
            tape = T.Tape()
            with tape:
                loss = T.sum_all(T.mul(x.value, x.value))
            T.backward(loss, tape)
        np.testing.assert_allclose(x.grad, [8.0], atol=1e-14)

    def test_tape_single_use(self):
        x = T.Parameter(np.array([1.0]), "x")
        tape = T.Tape()
        with tape:
            loss = T.sum_all(x.value)
        T.backward(loss, tape)
        with pytest.raises(ContractError):
            T.backward(loss, tape)

    def test_non_scalar_loss_rejected(self):
        x = T.Parameter(np.array([1.0, 2.0]), "x")
        tape = T.Tape()
        with tape:
            out = T.mul(x.value, x.value)
        with pytest.raises(ContractError):
            T.backward(out, tape)

    def test_reused_operand(self):
        # x appears in both slots of mul: both partials must accumulate
        x = T.Parameter(np.array([5.0]), "x")
        tape = T.Tape()
        with tape:
            loss = T.sum_all(T.mul(x.value, T.mul(x.value, x.value)))
        T.backward(loss, tape)
        np.testing.assert_allclose(x.grad, [75.0], atol=1e-12)

    def test_grad_reset(self):
        x = T.Parameter(np.array([1.0]), "x")
        x.grad[:] = 9.0
        x.reset_grad()
        np.testing.assert_array_equal(x.grad, [0.0])


class TestGradientCheck:
    def test_quadratic_is_nearly_exact(self):
        x = T.Parameter(np.array([1.5, -0.5]), "x")
        err = T.gradient_check(lambda: T.sum_all(T.mul(x.value, x.value)), [x])
        assert err < 1e-9

    def test_detects_corrupt_derivative(self, monkeypatch):
        monkeypatch.setattr(T, "_tanh_grad", lambda y: 1.0 - 0.5 * y * y)
        x = T.Parameter(np.array([0.7, -0.3]), "x")
        err = T.gradient_check(lambda: T.sum_all(T.tanh(x.value)), [x])
        assert err > 1e-3

    def test_rejects_nondeterministic_function(self):
        rng = np.random.default_rng(3)
        x = T.Parameter(np.ones(4), "x")

        def noisy():
            return T.sum_all(T.dropout(x.value, 0.5, training=True, rng=rng))

        with pytest.raises(ContractError):
            T.gradient_check(noisy, [x])

    @pytest.mark.parametrize(
        "name,build",
        [
            ("matmul", lambda v, c: T.matmul(c, v)),
            ("add", lambda v, c: T.add(v, c)),
            ("mul", lambda v, c: T.mul(v, c)),
            ("sub", lambda v, c: T.sub(c, v)),
            ("hardswish", lambda v, c: T.hardswish(v)),
            ("leaky_relu", lambda v, c: T.leaky_relu(v, 0.2)),
            ("sigmoid", lambda v, c: T.sigmoid(v)),
            ("tanh", lambda v, c: T.tanh(v)),
            ("relu6", lambda v, c: T.relu6(v)),
            ("softmax_rows", lambda v, c: T.softmax_rows(v)),
            ("transpose", lambda v, c: T.matmul(c, T.transpose(v))),
            ("concat_cols", lambda v, c: T.concat_cols(v, c)),
            ("slice_rows", lambda v, c: T.slice_rows(v, 1, 3)),
        ],
    )
    def test_each_op(self, name, build):
        rng = np.random.default_rng(11)
        p = T.Parameter(rng.normal(size=(4, 4)) * 0.9, name)
        const = T.Tensor(rng.normal(size=(4, 4)))

        def f():
            out = build(p.value, const)
            return T.mean_all(T.mul(out, out))

        assert T.gradient_check(f, [p]) < 1e-5

    def test_dropout_grad_with_frozen_mask(self):
        # same seed every call makes the masked function deterministic
        p = T.Parameter(np.linspace(-1, 1, 8).reshape(2, 4), "p")

        def f():
            rng = np.random.default_rng(5)
            out = T.dropout(p.value, 0.25, training=True, rng=rng)
            return T.mean_all(T.mul(out, out))

        assert T.gradient_check(f, [p]) < 1e-5


class TestDeterminism:
    def test_forward_is_bitwise_reproducible(self):
        rng1 = np.random.default_rng(123)
        rng2 = np.random.default_rng(123)

        def run(rng):
            x = T.Tensor(rng.normal(size=(5, 5)))
            w = T.Tensor(rng.normal(size=(5, 3)))
            out = T.softmax_rows(T.hardswish(T.matmul(x, w)))
            return out.data.tobytes()

        assert run(rng1) == run(rng2)

    def test_forward_outputs_finite(self):
        rng = np.random.default_rng(99)
        x = T.Tensor(rng.normal(size=(6, 6)) * 100)
        out = T.softmax_rows(T.sigmoid(T.hardswish(x)))
        assert np.isfinite(out.data).all()
