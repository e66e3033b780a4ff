import unittest

import numpy as np

from physio_mae.autodiff import Adam, Tensor, grad_check, ops, parameter
from physio_mae.errors import DimensionError, InternalError


def check(fn, x):
    return grad_check(fn, x, tol=1e-5)


def random_tensor(shape, seed=0, positive=False):
    data = np.random.default_rng(seed).normal(size=shape)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True)


class TestTensor(unittest.TestCase):
    def test_leaf_accumulates_until_zero_grad(self):
        x = parameter(np.array([1.0, 2.0]))

        ops.sum(x * 3.0).backward()
        ops.sum(x * 3.0).backward()

        np.testing.assert_array_equal(x.grad, [6.0, 6.0])
        x.zero_grad()
        assert x.grad is None

    def test_shared_subexpression_gradients_are_summed(self):
        x = parameter(np.array([2.0]))
        y = x * x
        z = ops.sum(y + y)

        z.backward()

        np.testing.assert_allclose(x.grad, [8.0])

    def test_record_is_topological(self):
        x = parameter(np.ones((2, 2)))
        out = ops.sum(ops.tanh(x @ x))

        record = out.backward()

        assert record.operations == ["matmul", "tanh", "sum"]
        assert record.nodes[0] is x

    def test_backward_of_sum_is_sum_of_backwards(self):
        x = parameter(np.random.default_rng(3).normal(size=(3, 4)))
        a = np.random.default_rng(4).normal(size=(3, 4))
        b = np.random.default_rng(5).normal(size=(3, 4))

        def first():
            return ops.sum(ops.tanh(x) * a)

        def second():
            return ops.sum(x * x * b)

        separate = []
        for fn in (first, second):
            x.zero_grad()
            fn().backward()
            separate.append(x.grad.copy())
        x.zero_grad()
        ops.add(first(), second()).backward()

        np.testing.assert_allclose(
            x.grad, separate[0] + separate[1], rtol=1e-12, atol=1e-14
        )

    def test_constants_do_not_record(self):
        out = ops.add(np.ones(2), np.ones(2))
        assert not out.requires_grad
        assert out.is_leaf

    def test_backward_on_constant_fails(self):
        with self.assertRaises(InternalError):
            Tensor(np.ones(1)).backward()

    def test_implicit_gradient_needs_scalar(self):
        x = parameter(np.ones(3))
        with self.assertRaises(InternalError):
            (x * 2.0).backward()

    def test_item(self):
        assert Tensor([[3.5]]).item() == 3.5
        with self.assertRaises(InternalError):
            Tensor([1.0, 2.0]).item()

    def test_float64_default(self):
        assert Tensor([1, 2]).dtype == np.float64
        assert Tensor([1, 2], dtype=np.float32).dtype == np.float32


class TestOps(unittest.TestCase):
    def test_unary_gradients(self):
        cases = {
            "exp": (ops.exp, False),
            "log": (ops.log, True),
            "sqrt": (ops.sqrt, True),
            "tanh": (ops.tanh, False),
            "gelu": (ops.gelu, False),
            "softplus": (ops.softplus, False),
            "square": (ops.square, False),
            "neg": (ops.neg, False),
        }
        for name, (fn, positive) in cases.items():
            with self.subTest(op=name):
                x = random_tensor((3, 4), seed=1, positive=positive)
                report = check(lambda t: ops.sum(fn(t)), x)
                assert report.passed, report.message

    def test_binary_broadcast_gradients(self):
        b = Tensor(np.random.default_rng(2).normal(size=(4,)) + 3.0)
        for name, fn in {
            "add": ops.add,
            "sub": ops.sub,
            "mul": ops.mul,
            "div": ops.div,
        }.items():
            with self.subTest(op=name):
                x = random_tensor((2, 3, 4), seed=3)
                report = check(lambda t: ops.sum(fn(t, b) * t), x)
                assert report.passed, report.message

    def test_broadcast_operand_gradient_shape(self):
        x = parameter(np.ones((2, 3)))
        b = parameter(np.ones((3,)))

        ops.sum(x * b).backward()

        assert b.grad.shape == (3,)
        np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])

    def test_matmul_batched(self):
        w = Tensor(np.random.default_rng(4).normal(size=(4, 5)))
        x = random_tensor((2, 3, 4), seed=5)
        report = check(lambda t: ops.sum(ops.tanh(t @ w)), x)
        assert report.passed, report.message

    def test_matmul_shape_mismatch(self):
        with self.assertRaises(DimensionError):
            ops.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_softmax_rows_sum_to_one(self):
        x = random_tensor((3, 5), seed=6)
        out = ops.softmax(x)
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(3))
        weights = Tensor(np.arange(15.0).reshape(3, 5))
        report = check(lambda t: ops.sum(ops.softmax(t) * weights), x)
        assert report.passed, report.message

    def test_softmax_saturates_without_overflow(self):
        x = random_tensor((3,))
        x.data[:] = [1000.0, 0.0, 0.0]

        out = ops.softmax(x)
        ops.sum(out * np.array([1.0, 2.0, 3.0])).backward()

        np.testing.assert_array_equal(out.data, [1.0, 0.0, 0.0])
        assert np.isfinite(x.grad).all()

    def test_gradients_across_random_shapes(self):
        rng = np.random.default_rng(21)
        for case in range(12):
            shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
            x = random_tensor(shape, seed=100 + case)
            weights = Tensor(rng.normal(size=shape))

            def fn(t):
                mixed = ops.tanh(t) * weights + ops.softmax(t) * weights
                return ops.sum(mixed * t)

            with self.subTest(shape=shape):
                report = check(fn, x)
                assert report.passed, report.message

    def test_layer_norm(self):
        gain = parameter(np.linspace(0.5, 1.5, 6))
        bias = parameter(np.linspace(-1, 1, 6))
        x = random_tensor((2, 4, 6), seed=7)
        weights = Tensor(np.random.default_rng(8).normal(size=(2, 4, 6)))

        out = ops.layer_norm(x, np.ones(6), np.zeros(6))
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)

        report = check(
            lambda t: ops.sum(ops.layer_norm(t, gain, bias) * weights), x
        )
        assert report.passed, report.message

    def test_layer_norm_gain_shape(self):
        with self.assertRaises(DimensionError):
            ops.layer_norm(np.ones((2, 4)), np.ones(3), np.zeros(4))

    def test_shape_ops(self):
        weights = Tensor(np.arange(24.0).reshape(2, 3, 4))
        cases = {
            "transpose": lambda t: ops.transpose(t, (0, 2, 1)),
            "swapaxes": lambda t: ops.swapaxes(t, 0, 1),
            "reshape": lambda t: ops.reshape(t, (4, 6)),
            "slice": lambda t: t[:, 1:],
        }
        for name, fn in cases.items():
            with self.subTest(op=name):
                x = random_tensor((2, 4, 3), seed=9)
                report = check(
                    lambda t: ops.sum(ops.tanh(fn(t))) * 1.5, x
                )
                assert report.passed, report.message
        x = random_tensor((2, 3, 4), seed=9)
        report = check(lambda t: ops.sum(t * weights), x)
        assert report.passed, report.message

    def test_reshape_mismatch(self):
        with self.assertRaises(DimensionError):
            ops.reshape(np.ones(6), (4, 2))

    def test_concat_splits_gradient(self):
        a = parameter(np.ones((2, 1, 3)))
        b = parameter(np.ones((2, 2, 3)))
        weights = np.arange(18.0).reshape(2, 3, 3)

        ops.sum(ops.concat([a, b], axis=1) * weights).backward()

        np.testing.assert_array_equal(a.grad, weights[:, :1])
        np.testing.assert_array_equal(b.grad, weights[:, 1:])

    def test_concat_mismatch(self):
        with self.assertRaises(DimensionError):
            ops.concat([np.ones((2, 3)), np.ones((3, 2))], axis=0)
        with self.assertRaises(DimensionError):
            ops.concat([])

    def test_take_rows_scatters_duplicates(self):
        a = parameter(np.arange(12.0).reshape(2, 3, 2))
        index = np.array([[2, 2], [0, 1]])

        out = ops.take_rows(a, index)
        ops.sum(out).backward()

        np.testing.assert_array_equal(out.data[0], [[4.0, 5.0], [4.0, 5.0]])
        np.testing.assert_array_equal(a.grad[0], [[0, 0], [0, 0], [2, 2]])
        np.testing.assert_array_equal(a.grad[1], [[1, 1], [1, 1], [0, 0]])

    def test_take_rows_rejects_bad_shapes(self):
        with self.assertRaises(DimensionError):
            ops.take_rows(np.ones((2, 3)), np.zeros((2, 1)))

    def test_reductions(self):
        x = random_tensor((2, 3, 4), seed=10)
        weights = Tensor(np.arange(8.0).reshape(2, 4))
        for axis in (None, 0, 1, (1, 2)):
            with self.subTest(axis=axis):
                report = check(
                    lambda t: ops.sum(ops.square(ops.mean(t, axis=axis))), x
                )
                assert report.passed, report.message
        report = check(lambda t: ops.sum(ops.sum(t, axis=1) * weights), x)
        assert report.passed, report.message

    def test_sqrt_gradient_at_zero_is_zero(self):
        x = parameter(np.zeros(3))
        ops.sum(ops.sqrt(x)).backward()
        np.testing.assert_array_equal(x.grad, np.zeros(3))

    def test_embedding_add_checks_table(self):
        with self.assertRaises(DimensionError):
            ops.embedding_add(np.ones((2, 4, 3)), np.ones((5, 3)))
        out = ops.embedding_add(np.zeros((2, 4, 3)), np.ones((4, 3)))
        assert out.shape == (2, 4, 3)


class TestAdam(unittest.TestCase):
    def test_minimizes_quadratic(self):
        x = parameter(np.array([3.0, -2.0]))
        optimizer = Adam([x], lr=0.1)
        for _ in range(500):
            optimizer.zero_grad()
            ops.sum(ops.square(x - 1.0)).backward()
            optimizer.step()
        np.testing.assert_allclose(x.data, [1.0, 1.0], atol=0.1)

    def test_first_step_moves_by_lr(self):
        x = parameter(np.array([0.0]))
        optimizer = Adam([x], lr=0.01)
        ops.sum(x * 5.0).backward()
        optimizer.step()
        np.testing.assert_allclose(x.data, [-0.01], rtol=1e-6)

    def test_skips_parameters_without_gradient(self):
        x = parameter(np.array([1.0]))
        Adam([x]).step()
        assert x.data[0] == 1.0
