import math

import numpy as np
import pytest

from camero.errors import ContractError, NumericError, OracleError, ShapeError
from camero.tensor import (
    Tensor,
    add_bias,
    finite_diff_gradient,
    log_softmax,
    no_grad,
    softmax,
)

from conftest import assert_grad_close


class TestForwardValues:
    def test_matmul_identity(self):
        a = Tensor([[1.5, -2.0], [0.25, 7.0]])
        eye = Tensor(np.eye(2))
        np.testing.assert_array_equal((eye @ a).data, a.data)

    def test_matmul_hand_computed(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[5.0], [6.0]])
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_relu_sign_boundaries(self):
        out = Tensor([-1.0, 0.0, 2.0]).relu()
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_elementwise_and_reductions(self):
        a = Tensor([1.0, 2.0, 3.0])
        b = Tensor([4.0, 5.0, 6.0])
        np.testing.assert_array_equal((a + b).data, [5.0, 7.0, 9.0])
        np.testing.assert_array_equal((a - b).data, [-3.0, -3.0, -3.0])
        np.testing.assert_array_equal((a * b).data, [4.0, 10.0, 18.0])
        np.testing.assert_array_equal((a * 2.0).data, [2.0, 4.0, 6.0])
        assert (a.sum()).item() == 6.0
        assert (a.mean()).item() == 2.0
        np.testing.assert_allclose(a.log().data, np.log([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(a.exp().data, np.exp([1.0, 2.0, 3.0]))

    def test_scalar_broadcast(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal((a + 1.0).data, [[2.0, 3.0], [4.0, 5.0]])
        np.testing.assert_array_equal((3.0 * a).data, [[3.0, 6.0], [9.0, 12.0]])
        s = Tensor(2.0)
        np.testing.assert_array_equal((a * s).data, [[2.0, 4.0], [6.0, 8.0]])

    def test_determinism_bit_identical(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 5))
        w = rng.normal(size=(5, 3))
        first = (Tensor(x) @ Tensor(w)).data
        second = (Tensor(x) @ Tensor(w)).data
        assert np.array_equal(first, second)


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_array_equal(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_log2_case(self):
        out = softmax(Tensor([math.log(2.0), 0.0]))
        np.testing.assert_allclose(out.data, [2.0 / 3.0, 1.0 / 3.0], rtol=1e-12)

    def test_large_inputs_no_overflow(self):
        out = softmax(Tensor([1000.0, 1000.0]))
        np.testing.assert_array_equal(out.data, [0.5, 0.5])

    def test_simplex_property(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            logits = rng.normal(scale=10.0, size=(3, 7))
            p = softmax(Tensor(logits), axis=-1).data
            assert np.all(p >= 0.0)
            np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)

    def test_non_finite_input_rejected(self):
        with pytest.raises(NumericError):
            softmax(Tensor([1.0, np.nan]))
        with pytest.raises(NumericError):
            log_softmax(Tensor([np.inf, 0.0]))

    def test_log_softmax_matches_log_of_softmax(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(4, 5))
        np.testing.assert_allclose(
            log_softmax(Tensor(logits)).data,
            np.log(softmax(Tensor(logits)).data),
            atol=1e-12,
        )


class TestShapeErrors:
    def test_elementwise_mismatch_names_op_and_shapes(self):
        with pytest.raises(ShapeError, match=r"add.*\(2,\).*\(3,\)"):
            Tensor([1.0, 2.0]) + Tensor([1.0, 2.0, 3.0])

    def test_matmul_inner_mismatch(self):
        with pytest.raises(ShapeError, match=r"matmul"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_add_bias_shape(self):
        with pytest.raises(ShapeError, match="add_bias"):
            add_bias(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))

    def test_softmax_bad_axis(self):
        with pytest.raises(ShapeError, match="softmax"):
            softmax(Tensor([1.0, 2.0]), axis=2)


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor([3.0], requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_sum_gives_ones(self):
        x = Tensor(np.zeros((3, 4)), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ContractError):
            Tensor([1.0, 2.0], requires_grad=True).backward()

    def test_fanout_accumulates_both_paths(self):
        # y = x*x + 3x uses x twice; compare against the single-use
        # re-parameterization y = u*v + 3w evaluated at u=v=w=x.
        val = 1.7
        x = Tensor([val], requires_grad=True)
        ((x * x) + (x * 3.0)).sum().backward()
        u = Tensor([val], requires_grad=True)
        v = Tensor([val], requires_grad=True)
        w = Tensor([val], requires_grad=True)
        ((u * v) + (w * 3.0)).sum().backward()
        np.testing.assert_array_equal(x.grad, u.grad + v.grad + w.grad)

    def test_constant_branches_get_no_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        c = Tensor([5.0, 5.0])
        (x * c).sum().backward()
        assert c.grad is None
        np.testing.assert_array_equal(x.grad, [5.0, 5.0])

    def test_detach_blocks_gradient(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * 3.0
        (y.detach() * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [6.0])  # only the live path

    def test_no_grad_context(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad
        assert y._parents == ()


class TestGradcheck:
    """Reverse-mode gradients vs. the finite-difference oracle."""

    def test_softmax_dot_constant(self, gradcheck):
        rng = np.random.default_rng(3)
        c = rng.normal(size=7)
        for _ in range(20):
            x = rng.normal(scale=2.0, size=7)
            gradcheck(lambda t: (softmax(t) * Tensor(c)).sum(), x,
                      context="softmax-dot")

    @pytest.mark.parametrize("name,builder", [
        ("add", lambda c: lambda t: ((t + Tensor(c)) * Tensor(c)).sum()),
        ("sub", lambda c: lambda t: ((t - Tensor(c)) * Tensor(c)).sum()),
        ("mul", lambda c: lambda t: (t * Tensor(c)).sum()),
        ("scalar_mul", lambda c: lambda t: (t * 1.7).mean()),
        ("exp", lambda c: lambda t: ((t * 0.5).exp() * Tensor(c)).sum()),
        ("tanh", lambda c: lambda t: (t.tanh() * Tensor(c)).sum()),
        ("mean", lambda c: lambda t: (t * Tensor(c)).mean()),
        ("log_softmax", lambda c: lambda t: (log_softmax(t) * Tensor(c)).sum()),
    ])
    def test_elementwise_ops(self, gradcheck, name, builder):
        rng = np.random.default_rng(hash(name) % 2**32)
        for _ in range(20):
            c = rng.normal(size=6)
            x = rng.normal(size=6)
            gradcheck(builder(c), x, context=name)

    def test_log_positive_domain(self, gradcheck):
        rng = np.random.default_rng(4)
        for _ in range(20):
            x = rng.uniform(0.2, 3.0, size=5)
            gradcheck(lambda t: t.log().sum(), x, context="log")

    def test_relu_away_from_kink(self, gradcheck):
        # finite differences are meaningless inside the kink's h-window
        rng = np.random.default_rng(5)
        for _ in range(20):
            x = rng.normal(size=8)
            x[np.abs(x) < 1e-2] = 0.5
            gradcheck(lambda t: (t.relu() * t.relu()).sum(), x, context="relu")

    def test_relu_subgradient_zero_at_zero(self):
        x = Tensor([0.0, -1.0, 1.0], requires_grad=True)
        x.relu().sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_matmul_both_sides(self, gradcheck):
        rng = np.random.default_rng(6)
        right = rng.normal(size=(4, 3))
        left = rng.normal(size=(5, 4))
        for _ in range(20):
            x = rng.normal(size=(5, 4))
            gradcheck(lambda t: (t @ Tensor(right)).sum(), x, context="matmul-left")
        for _ in range(20):
            x = rng.normal(size=(4, 3))
            gradcheck(lambda t: (Tensor(left) @ t).sum(), x, context="matmul-right")

    def test_add_bias_grad(self, gradcheck):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(6, 3))
        for _ in range(20):
            b = rng.normal(size=3)
            gradcheck(lambda t: (add_bias(Tensor(x), t) * add_bias(Tensor(x), t)).sum(),
                      b, context="add_bias")

    def test_two_layer_net_cross_entropy(self, gradcheck):
        # gradients of a small network's loss w.r.t. its first-layer weights
        rng = np.random.default_rng(8)
        x = rng.normal(size=(1, 4))
        w2 = rng.normal(size=(6, 3))
        onehot = np.zeros((1, 3))
        onehot[0, 1] = 1.0

        def loss(w1):
            h = add_bias(Tensor(x) @ w1, Tensor(np.zeros(6))).tanh()
            logits = h @ Tensor(w2)
            return (Tensor(-onehot) * log_softmax(logits)).sum()

        for _ in range(5):
            w1 = rng.normal(size=(4, 6))
            gradcheck(loss, w1, h=1e-5, context="2-layer-ce")


class TestFiniteDifferenceOracle:
    def test_linear_gives_ones(self):
        x = Tensor(np.array([1.0, -2.0, 0.5]))
        g = finite_diff_gradient(lambda t: t.sum(), x)
        np.testing.assert_allclose(g.data, np.ones(3), atol=1e-9)

    def test_square_at_three(self):
        g = finite_diff_gradient(lambda t: (t * t).sum(), Tensor([3.0]), h=1e-5)
        np.testing.assert_allclose(g.data, [6.0], atol=1e-6)

    def test_nondeterministic_f_rejected(self):
        rng = np.random.default_rng(9)

        def noisy(t):
            return t.sum().item() + rng.normal()

        with pytest.raises(OracleError):
            finite_diff_gradient(noisy, Tensor([1.0]))

    def test_bad_step_rejected(self):
        with pytest.raises(ContractError):
            finite_diff_gradient(lambda t: t.sum(), Tensor([1.0]), h=0.0)
