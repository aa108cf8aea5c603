"""Tensor arithmetic, autodiff, and optimizer contracts."""

import math

import numpy as np
import pytest

from loadcast.errors import ContractError, DomainError, PoisonedStateError, ShapeError
from loadcast.numerics import GradientOptimizer, Tensor, matmul, no_grad, stack

TANH_ONE = 0.7615941559557649  # high-precision tanh(1)
SOFTMAX_123 = (0.09003057317038046, 0.24472847105479764, 0.6652409557748219)


def finite_difference(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn(x)
        flat[i] = orig - h
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return g


def rel_err(a, b, floor=1e-6):
    return np.max(np.abs(a - b) / np.maximum.reduce(
        [np.abs(a), np.abs(b), np.full_like(np.asarray(a, dtype=float), floor)]))


class TestMatmul:
    def test_identity(self):
        v = Tensor([1.0, 2.0, 3.0])
        out = matmul(Tensor(np.eye(3)), v)
        assert np.array_equal(out.data, v.data)

    def test_zero_annihilator(self):
        out = matmul(Tensor(np.zeros((2, 3))), Tensor(np.arange(12.0).reshape(3, 4)))
        assert np.array_equal(out.data, np.zeros((2, 4)))

    def test_hand_product(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        assert np.array_equal(out.data, [[17.0], [39.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_gradients_match_finite_differences(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))

        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        loss = (matmul(ta, tb) * matmul(ta, tb)).sum()
        loss.backward()

        def loss_a(x):
            return float(((x @ b) ** 2).sum())

        def loss_b(x):
            return float(((a @ x) ** 2).sum())

        assert rel_err(ta.grad, finite_difference(loss_a, a)) < 1e-4
        assert rel_err(tb.grad, finite_difference(loss_b, b)) < 1e-4

    def test_matvec_gradients(self, rng):
        a = rng.normal(size=(3, 4))
        v = rng.normal(size=4)
        ta, tv = Tensor(a, requires_grad=True), Tensor(v, requires_grad=True)
        loss = (matmul(ta, tv) * matmul(ta, tv)).sum()
        loss.backward()
        assert rel_err(ta.grad, finite_difference(lambda x: float(((x @ v) ** 2).sum()), a)) < 1e-4
        assert rel_err(tv.grad, finite_difference(lambda x: float(((a @ x) ** 2).sum()), v)) < 1e-4


class TestElementwise:
    def test_tanh_odd(self):
        assert Tensor(0.0).tanh().item() == 0.0

    def test_exp_zero(self):
        assert Tensor(0.0).exp().item() == 1.0

    def test_tanh_one_high_precision(self):
        assert abs(Tensor(1.0).tanh().item() - TANH_ONE) < 1e-15

    def test_log_domain_error(self):
        with pytest.raises(DomainError):
            Tensor([1.0, 0.0]).log()

    def test_clamp_values_and_gradient(self):
        x = Tensor([-3.0, 0.5, 3.0], requires_grad=True)
        y = x.clamp(-1.0, 1.0)
        assert np.array_equal(y.data, [-1.0, 0.5, 1.0])
        y.sum().backward()
        assert np.array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_broadcast_add_gradient(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=4)
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        ((ta + tb) * (ta + tb)).sum().backward()
        assert tb.grad.shape == b.shape
        assert rel_err(tb.grad, finite_difference(
            lambda x: float(((a + x) ** 2).sum()), b)) < 1e-4

    def test_sigmoid_extreme_values_finite(self):
        y = Tensor([-1000.0, 0.0, 1000.0]).sigmoid()
        assert np.all(np.isfinite(y.data))
        assert np.allclose(y.data, [0.0, 0.5, 1.0])

    def test_forward_determinism(self, rng):
        x = rng.normal(size=16)
        a = (Tensor(x).tanh().exp() * 0.5).softmax()
        b = (Tensor(x).tanh().exp() * 0.5).softmax()
        assert np.array_equal(a.data, b.data)


class TestSoftmax:
    def test_constant_logits_uniform(self):
        for c in (0.0, 5.5, -17.0):
            out = Tensor([c, c, c, c]).softmax()
            assert np.allclose(out.data, 0.25, atol=1e-15)

    def test_large_logits_no_overflow(self):
        out = Tensor([1000.0, 0.0]).softmax()
        assert np.all(np.isfinite(out.data))
        assert out.data[0] == pytest.approx(1.0)
        assert out.data[1] == pytest.approx(0.0, abs=1e-300)

    def test_hand_values(self):
        out = Tensor([1.0, 2.0, 3.0]).softmax()
        assert np.allclose(out.data, SOFTMAX_123, atol=1e-15)

    def test_sums_to_one_and_shift_invariant(self, rng):
        for _ in range(200):
            logits = rng.normal(scale=5.0, size=rng.integers(1, 9))
            p = Tensor(logits).softmax().data
            q = Tensor(logits + 123.456).softmax().data
            assert abs(p.sum() - 1.0) < 1e-12
            assert np.max(np.abs(p - q)) < 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros(0)).softmax()

    def test_gradient(self, rng):
        x = rng.normal(size=5)
        w = rng.normal(size=5)
        tx = Tensor(x, requires_grad=True)
        (tx.softmax() * Tensor(w)).sum().backward()
        fd = finite_difference(lambda v: float(
            (np.exp(v - v.max()) / np.exp(v - v.max()).sum() * w).sum()), x)
        assert rel_err(tx.grad, fd) < 1e-4


class TestBackward:
    def test_square_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        (x * x).sum().backward()
        assert np.array_equal(x.grad, [2.0, 4.0])

    def test_detached_leaf_gets_no_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = Tensor([3.0, 4.0], requires_grad=True)
        (y * y).sum().backward()
        assert x.grad is None

    def test_accumulation_until_cleared(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        (x * x).sum().backward()
        (x * x).sum().backward()
        assert np.array_equal(x.grad, [4.0, 8.0])
        x.zero_grad()
        (x * x).sum().backward()
        assert np.array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            (x * x).backward()

    def test_fanout_reuse(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * 2.0
        (y * y + y).sum().backward()
        # d/dx (4x^2 + 2x) = 8x + 2
        assert np.allclose(x.grad, [26.0])

    def test_composite_matches_finite_differences(self, rng):
        for _ in range(20):
            x = rng.normal(size=6)

            def f(v):
                t = Tensor(v, requires_grad=isinstance(v, Tensor))
                return t

            tx = Tensor(x, requires_grad=True)
            loss = ((tx.tanh() * tx).exp() * 0.1).sum() + (tx * tx).sum() \
                + tx.softmax().clamp(0.01, 0.9).sum()
            loss.backward()

            def numeric(v):
                s = np.exp(v - v.max())
                p = s / s.sum()
                return float((np.exp(np.tanh(v) * v) * 0.1).sum() + (v * v).sum()
                             + np.clip(p, 0.01, 0.9).sum())

            assert rel_err(tx.grad, finite_difference(numeric, x)) < 1e-4

    def test_no_grad_blocks_graph(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = (x * x).sum()
        assert y._backward is None and not y.requires_grad

    def test_stack_gradient(self, rng):
        rows = [Tensor(rng.normal(size=3), requires_grad=True) for _ in range(4)]
        w = Tensor(rng.normal(size=4))
        (matmul(w, stack(rows)) * 2.0).sum().backward()
        for row in rows:
            assert row.grad is not None and row.grad.shape == (3,)


class TestOptimizer:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        p = Tensor([1.0, -2.0], requires_grad=True)
        opt = GradientOptimizer({"p": p}, learning_rate=0.1)
        p.grad = np.zeros(2)
        opt.step()
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_missing_gradient_skipped(self):
        p = Tensor([1.0], requires_grad=True)
        opt = GradientOptimizer({"p": p}, learning_rate=0.1)
        opt.step()
        assert np.array_equal(p.data, [1.0])

    def test_plain_sgd_single_step(self):
        p = Tensor([1.0], requires_grad=True)
        opt = GradientOptimizer({"p": p}, learning_rate=0.1, mode="sgd")
        p.grad = np.array([1.0])
        opt.step()
        assert np.allclose(p.data, [0.9])

    def test_quadratic_bowl_convergence(self):
        theta = Tensor([5.0], requires_grad=True)
        opt = GradientOptimizer({"theta": theta}, learning_rate=0.1)
        for _ in range(200):
            opt.zero_grad()
            (theta * theta).sum().backward()
            opt.step()
        assert abs(theta.item()) < 1e-2

    def test_nan_gradient_names_parameter(self):
        p = Tensor([1.0], requires_grad=True)
        opt = GradientOptimizer({"bad_param": p}, learning_rate=0.1)
        p.grad = np.array([np.nan])
        with pytest.raises(PoisonedStateError, match="bad_param"):
            opt.step()

    def test_step_count_increments(self):
        p = Tensor([1.0], requires_grad=True)
        opt = GradientOptimizer({"p": p}, learning_rate=0.1)
        for expected in (1, 2, 3):
            opt.step()
            assert opt.step_count == expected

    def test_bad_configuration_rejected(self):
        p = Tensor([1.0], requires_grad=True)
        with pytest.raises(ContractError):
            GradientOptimizer({"p": p}, learning_rate=0.0)
        with pytest.raises(ContractError):
            GradientOptimizer({"p": p}, learning_rate=0.1, mode="momentum")
