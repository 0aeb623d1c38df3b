"""Backward rules vs central finite differences, plus primitive semantics."""

from __future__ import annotations

import numpy as np
import pytest

import shiftrec.autodiff as ad
from shiftrec.autodiff import ShapeMismatch, Tape, Tensor

from conftest import check_gradients, finite_difference, leaf, relative_error

N_INSTANCES = 100


def _project(out, rng):
    """Reduce any tensor to a scalar through a fixed random projection."""
    w = Tensor(rng.uniform(-1, 1, size=out.shape))
    return ad.tsum(ad.mul(out, w))


class TestPrimitiveGradients:
    """Each primitive agrees with finite differences on randomized instances."""

    def _run(self, make, n=N_INSTANCES):
        rng = np.random.default_rng(7)
        for _ in range(n):
            build, tensors = make(rng)
            check_gradients(build, tensors)

    def test_add(self):
        self._run(lambda rng: self._make_binary(rng, ad.add))

    def _make_binary(self, rng, op, positive_b=False):
        a = leaf(rng, 3, 4)
        b = leaf(rng, 3, 4, lo=0.5, hi=1.5) if positive_b else leaf(rng, 3, 4)
        return (lambda: _project(op(a, b), np.random.default_rng(11))), [a, b]

    def test_sub(self):
        self._run(lambda rng: self._make_binary(rng, ad.sub))

    def test_mul(self):
        self._run(lambda rng: self._make_binary(rng, ad.mul))

    def test_div(self):
        self._run(lambda rng: self._make_binary(rng, ad.div, positive_b=True))

    def test_mul_broadcast(self):
        def make(rng):
            a = leaf(rng, 3, 4)
            b = leaf(rng, 4)
            return (lambda: _project(ad.mul(a, b), np.random.default_rng(2))), [a, b]
        self._run(make)

    def test_scale(self):
        def make(rng):
            a = leaf(rng, 2, 5)
            c = float(rng.uniform(-2, 2))
            return (lambda: _project(ad.scale(a, c), np.random.default_rng(3))), [a]
        self._run(make)

    def test_matmul_2d(self):
        def make(rng):
            a = leaf(rng, 3, 4)
            b = leaf(rng, 4, 2)
            return (lambda: _project(ad.matmul(a, b), np.random.default_rng(4))), [a, b]
        self._run(make)

    def test_matmul_batched(self):
        def make(rng):
            a = leaf(rng, 2, 3, 4)
            b = leaf(rng, 2, 4, 2)
            return (lambda: _project(ad.matmul(a, b), np.random.default_rng(5))), [a, b]
        self._run(make)

    def test_matmul_broadcast_rhs(self):
        def make(rng):
            a = leaf(rng, 2, 3, 4)
            b = leaf(rng, 4, 5)
            return (lambda: _project(ad.matmul(a, b), np.random.default_rng(6))), [a, b]
        self._run(make)

    def test_dot(self):
        def make(rng):
            a = leaf(rng, 6)
            b = leaf(rng, 6)
            return (lambda: ad.dot(a, b)), [a, b]
        self._run(make)

    def test_tanh(self):
        self._run(lambda rng: self._make_unary(rng, ad.tanh))

    def _make_unary(self, rng, op, lo=-1.0, hi=1.0):
        a = leaf(rng, 3, 4, lo=lo, hi=hi)
        return (lambda: _project(op(a), np.random.default_rng(8))), [a]

    def test_sigmoid(self):
        self._run(lambda rng: self._make_unary(rng, ad.sigmoid))

    def test_relu(self):
        # keep inputs away from the kink where the derivative jumps
        def make(rng):
            a = Tensor(rng.uniform(0.2, 1.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4)),
                       requires_grad=True)
            return (lambda: _project(ad.relu(a), np.random.default_rng(9))), [a]
        self._run(make)

    def test_sqrt(self):
        self._run(lambda rng: self._make_unary(rng, ad.sqrt, lo=0.3, hi=2.0))

    def test_embedding_lookup(self):
        def make(rng):
            table = leaf(rng, 7, 4)
            idx = rng.integers(0, 7, size=(2, 3))
            return (lambda: _project(ad.embedding_lookup(table, idx),
                                     np.random.default_rng(10))), [table]
        self._run(make)

    def test_softmax(self):
        def make(rng):
            a = leaf(rng, 3, 5, lo=-2, hi=2)
            return (lambda: _project(ad.softmax(a, axis=-1), np.random.default_rng(12))), [a]
        self._run(make)

    def test_log_softmax(self):
        def make(rng):
            a = leaf(rng, 3, 5, lo=-2, hi=2)
            return (lambda: _project(ad.log_softmax(a, axis=-1), np.random.default_rng(13))), [a]
        self._run(make)

    def test_layer_norm(self):
        def make(rng):
            x = leaf(rng, 2, 6)
            gain = leaf(rng, 6, lo=0.5, hi=1.5)
            bias = leaf(rng, 6)
            return (lambda: _project(ad.layer_norm(x, gain, bias),
                                     np.random.default_rng(14))), [x, gain, bias]
        self._run(make)

    def test_dropout(self):
        # a fresh generator with a fixed seed keeps the mask identical across
        # the finite-difference evaluations
        def make(rng):
            x = leaf(rng, 4, 5)
            seed = int(rng.integers(1 << 30))
            return (lambda: _project(
                ad.dropout(x, 0.4, np.random.default_rng(seed), True),
                np.random.default_rng(15))), [x]
        self._run(make)

    def test_sum_and_mean(self):
        def make(rng):
            x = leaf(rng, 3, 4)
            axis = int(rng.integers(0, 2))
            return (lambda: _project(ad.tmean(ad.tsum(x, axis=axis, keepdims=True), axis=None),
                                     np.random.default_rng(16))), [x]
        self._run(make)

    def test_mask_fill(self):
        def make(rng):
            x = leaf(rng, 3, 4)
            mask = rng.random((3, 4)) < 0.3
            return (lambda: _project(ad.mask_fill(x, mask, -5.0),
                                     np.random.default_rng(17))), [x]
        self._run(make)

    def test_concat_stack(self):
        def make(rng):
            a = leaf(rng, 2, 3)
            b = leaf(rng, 2, 3)
            def build():
                c = ad.concat([a, b], axis=1)
                s = ad.stack([a, b], axis=0)
                return ad.add(_project(c, np.random.default_rng(18)),
                              _project(s, np.random.default_rng(19)))
            return build, [a, b]
        self._run(make)

    def test_reshape_transpose(self):
        def make(rng):
            x = leaf(rng, 2, 3, 4)
            def build():
                y = ad.transpose(ad.reshape(x, (6, 4)), (1, 0))
                return _project(y, np.random.default_rng(20))
            return build, [x]
        self._run(make)

    def test_index_select(self):
        def make(rng):
            x = leaf(rng, 5, 3)
            idx = rng.integers(0, 5, size=4)
            return (lambda: _project(ad.index_select(x, idx, axis=0),
                                     np.random.default_rng(21))), [x]
        self._run(make)

    def test_gather(self):
        def make(rng):
            x = leaf(rng, 4, 6)
            idx = rng.integers(0, 6, size=(4, 2))
            return (lambda: _project(ad.gather(x, idx), np.random.default_rng(22))), [x]
        self._run(make)


class TestBackwardSemantics:
    def test_dot_self_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            out = ad.dot(x, x)
            grads = tape.backward(out)
        np.testing.assert_array_equal(grads[x], [2.0, 4.0])

    def test_uniform_cross_entropy_gradient(self):
        # with uniform logits over C classes, the true-class logit gradient is 1/C - 1
        c = 5
        logits = Tensor(np.zeros(c), requires_grad=True)
        with Tape() as tape:
            lp = ad.log_softmax(ad.reshape(logits, (1, c)), axis=1)
            loss = ad.scale(ad.gather(lp, np.array([[2]])), -1.0)
            loss = ad.tsum(loss)
            grads = tape.backward(loss)
        expected = np.full(c, 1.0 / c)
        expected[2] = 1.0 / c - 1.0
        np.testing.assert_allclose(grads[logits], expected, atol=1e-12)

    def test_non_scalar_root_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = ad.scale(x, 2.0)
            with pytest.raises(ValueError, match="scalar"):
                tape.backward(y)

    def test_unrecorded_root_rejected(self):
        x = Tensor(1.0)
        with Tape() as tape:
            with pytest.raises(ValueError, match="not recorded"):
                tape.backward(x)

    def test_gradient_accumulates_across_uses(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            y = ad.add(ad.mul(x, x), ad.scale(x, 4.0))  # x^2 + 4x
            grads = tape.backward(ad.tsum(y))
        np.testing.assert_allclose(grads[x], [10.0])


class TestForwardSemantics:
    def test_softmax_symmetry(self):
        out = ad.softmax(Tensor([0.0, 0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_softmax_sums_to_one(self, rng):
        x = Tensor(rng.normal(size=(50, 9)) * 30)
        total = ad.softmax(x, axis=1).data.sum(axis=1)
        np.testing.assert_allclose(total, 1.0, atol=1e-12)

    def test_softmax_shift_invariance(self, rng):
        x = rng.normal(size=(4, 6))
        a = ad.softmax(Tensor(x), axis=1).data
        b = ad.softmax(Tensor(x + 123.456), axis=1).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_layer_norm_constant_vector(self):
        x = Tensor(np.full((1, 8), 3.7))
        out = ad.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 8)))

    def test_dropout_eval_identity(self, rng):
        x = Tensor(rng.normal(size=(5, 5)))
        assert ad.dropout(x, 0.5, None, False) is x
        assert ad.dropout(x, 0.0, None, True) is x

    def test_dropout_preserves_expectation(self):
        x = Tensor(np.full(100_000, 2.0))
        out = ad.dropout(x, 0.3, np.random.default_rng(0), True)
        assert abs(out.data.mean() - 2.0) / 2.0 < 0.01

    def test_dropout_rate_one_rejected(self):
        with pytest.raises(ValueError):
            ad.dropout(Tensor(np.ones(3)), 1.0, np.random.default_rng(0), True)

    def test_shape_errors_name_operands(self):
        a = Tensor(np.ones((2, 3)))
        b = Tensor(np.ones((4, 5)))
        with pytest.raises(ShapeMismatch, match=r"matmul.*2, 3.*4, 5"):
            ad.matmul(a, b)
        with pytest.raises(ShapeMismatch, match="add"):
            ad.add(a, Tensor(np.ones((3, 2))))
        with pytest.raises(ShapeMismatch, match="dot"):
            ad.dot(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_deterministic_forward_backward(self):
        def run():
            rng = np.random.default_rng(99)
            x = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
            w = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
            with Tape() as tape:
                h = ad.dropout(ad.tanh(ad.matmul(x, w)), 0.2, rng, True)
                loss = ad.tsum(ad.mul(h, h))
                grads = tape.backward(loss)
            return loss.data.copy(), grads[x].copy(), grads[w].copy()

        first = run()
        second = run()
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)
