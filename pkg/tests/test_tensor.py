"""Tensor engine: forward semantics, gradient rules, graph contracts."""

import math

import numpy as np
import pytest

from televit.errors import GraphError, NumericsError, ShapeError
from televit.tensor import (
    Tensor,
    backward,
    computation_graph,
    concat,
    dot,
    gelu,
    getitem,
    layer_norm,
    log_softmax,
    matmul,
    no_grad,
    softmax,
    tensor_mean,
    tensor_sum,
    tile_leading,
    transpose,
)


def triple_loop_matmul(a, b):
    """Independent reference for matrix products."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        m = np.arange(9, dtype=float).reshape(3, 3)
        out = matmul(Tensor(np.eye(3)), Tensor(m))
        np.testing.assert_array_equal(out.data, m)

    def test_hand_checked_2x2(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((5, 4))
        b = rng.standard_normal((4, 3))
        out = matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, triple_loop_matmul(a, b), atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_batched_lhs(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((6, 5, 4))
        b = rng.standard_normal((4, 3))
        out = matmul(Tensor(a), Tensor(b))
        assert out.shape == (6, 5, 3)
        for i in range(6):
            np.testing.assert_allclose(out.data[i], a[i] @ b, atol=1e-12)

    def test_batched_gradient_sums_over_batch(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((3, 2, 4))
        b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        out = matmul(Tensor(a), b)
        backward(tensor_sum(out))
        expected = sum(a[i].T @ np.ones((2, 2)) for i in range(3))
        np.testing.assert_allclose(b.grad, expected, atol=1e-12)

    def test_associativity_random_triples(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            a = Tensor(rng.standard_normal((4, 6)))
            b = Tensor(rng.standard_normal((6, 5)))
            c = Tensor(rng.standard_normal((5, 3)))
            left = matmul(matmul(a, b), c).data
            right = matmul(a, matmul(b, c)).data
            np.testing.assert_allclose(left, right, rtol=1e-9)


class TestSoftmax:
    def test_uniform_input(self):
        out = softmax(Tensor([0.0, 0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_exact_exponential_ratios(self):
        out = softmax(Tensor([math.log(1), math.log(2), math.log(3)]), axis=0)
        np.testing.assert_allclose(out.data, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)

    def test_overflow_free_stability(self):
        # Independent oracle: sigmoid identity, exp of the (small) difference.
        out = softmax(Tensor([1000.0, 1000.5]), axis=0)
        expected_hi = 1.0 / (1.0 + math.exp(-0.5))
        np.testing.assert_allclose(out.data, [1.0 - expected_hi, expected_hi], atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        out = softmax(Tensor(rng.standard_normal((7, 11))), axis=1)
        np.testing.assert_allclose(out.data.sum(axis=1), np.ones(7), atol=1e-12)
        assert ((out.data > 0) & (out.data < 1)).all()

    def test_shift_invariance(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((5, 9))
        for c in (-100.0, -1.0, 0.5, 42.0):
            base = softmax(Tensor(x), axis=1).data
            shifted = softmax(Tensor(x + c), axis=1).data
            np.testing.assert_allclose(shifted, base, atol=1e-12)

    def test_empty_axis_rejected(self):
        with pytest.raises(ShapeError, match="empty axis"):
            softmax(Tensor(np.zeros((3, 0))), axis=1)
        with pytest.raises(ShapeError, match="axis"):
            softmax(Tensor([1.0, 2.0]), axis=2)


class TestLayerNorm:
    def test_constant_row_zero_variance(self):
        x = Tensor(np.full((2, 4), 7.0))
        out = layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=1e-5)
        np.testing.assert_allclose(out.data, np.zeros((2, 4)), atol=1e-12)

    def test_closed_form_two_values(self):
        out = layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-9)

    def test_affine_dominates_with_zero_gamma(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.standard_normal((3, 5)))
        out = layer_norm(x, Tensor(np.zeros(5)), Tensor(np.full(5, 5.0)), eps=1e-5)
        np.testing.assert_array_equal(out.data, np.full((3, 5), 5.0))

    def test_normalizes_mean_and_variance(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((4, 64)) * 3 + 2)
        out = layer_norm(x, Tensor(np.ones(64)), Tensor(np.zeros(64)), eps=1e-12)
        np.testing.assert_allclose(out.data.mean(axis=-1), np.zeros(4), atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=-1), np.ones(4), atol=1e-6)

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            layer_norm(Tensor([[1.0, 2.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)

    def test_gamma_shape_checked(self):
        with pytest.raises(ShapeError):
            layer_norm(Tensor([[1.0, 2.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=1e-5)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6, dtype=float).reshape(2, 3), requires_grad=True)
        backward(tensor_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_dot_gives_2x(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        backward(dot(x, x))
        np.testing.assert_allclose(x.grad, [2.0, -4.0, 6.0], atol=1e-15)

    def test_non_scalar_root_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(GraphError, match="scalar"):
            backward(x * x)

    def test_fanout_sums_both_contributions(self):
        # y = sum(x * x) + sum(3 * x): total grad must be 2x + 3.
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        y = tensor_sum(x * x) + tensor_sum(x * 3.0)
        backward(y)
        np.testing.assert_allclose(x.grad, 2 * x.data + 3.0, atol=1e-15)

    def test_accumulates_across_calls(self):
        x = Tensor([1.0, 1.0], requires_grad=True)
        backward(tensor_sum(x))
        backward(tensor_sum(x))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_two_layer_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        w1 = Tensor(rng.standard_normal((5, 7)) * 0.3, requires_grad=True)
        w2 = Tensor(rng.standard_normal((7, 1)) * 0.3, requires_grad=True)
        x = rng.standard_normal((4, 5))

        def scalar_loss():
            return tensor_sum(matmul(gelu(matmul(Tensor(x), w1)), w2))

        backward(scalar_loss())
        step = 1e-5
        for w in (w1, w2):
            analytic = w.grad.copy()
            numeric = np.zeros_like(analytic)
            for i in range(w.size):
                orig = w.data.flat[i]
                w.data.flat[i] = orig + step
                up = float(scalar_loss().data)
                w.data.flat[i] = orig - step
                down = float(scalar_loss().data)
                w.data.flat[i] = orig
                numeric.flat[i] = (up - down) / (2 * step)
            rel = np.abs(analytic - numeric) / np.maximum(
                np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8
            )
            assert rel.max() < 1e-5


class TestGraph:
    def test_topologically_ordered_and_unique(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = x * x
        z = tensor_sum(y + y)
        nodes = computation_graph(z)
        ids = [n.node_id for n in nodes]
        assert len(ids) == len(set(ids))
        seen = set()
        for node in nodes:
            assert all(i in seen for i in node.input_ids if i in ids)
            seen.add(node.node_id)
        assert nodes[-1].tensor is z

    def test_no_grad_builds_no_graph(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with no_grad():
            y = tensor_sum(x * x)
        assert y._vjp is None and not y.requires_grad

    def test_nonfinite_forward_raises(self):
        with pytest.raises(NumericsError):
            Tensor([1.0, 0.0]) / Tensor([1.0, 0.0])


class TestStructuralOps:
    def test_reshape_transpose_roundtrip_gradient(self):
        x = Tensor(np.arange(24, dtype=float).reshape(2, 3, 4), requires_grad=True)
        y = transpose(x.reshape((6, 4)), (1, 0))
        backward(tensor_sum(y * 2.0))
        np.testing.assert_array_equal(x.grad, np.full((2, 3, 4), 2.0))

    def test_getitem_scatters_gradient(self):
        x = Tensor(np.arange(12, dtype=float).reshape(3, 4), requires_grad=True)
        backward(tensor_sum(getitem(x, (slice(None), 1))))
        expected = np.zeros((3, 4))
        expected[:, 1] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_concat_splits_gradient(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones((4, 3)), requires_grad=True)
        out = concat([a, b], axis=0)
        backward(tensor_sum(out * Tensor(np.arange(18, dtype=float).reshape(6, 3))))
        np.testing.assert_array_equal(a.grad, np.arange(6, dtype=float).reshape(2, 3))
        np.testing.assert_array_equal(b.grad, np.arange(6, 18, dtype=float).reshape(4, 3))

    def test_tile_leading_sums_gradient(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        out = tile_leading(x, 5)
        assert out.shape == (5, 2)
        backward(tensor_sum(out))
        np.testing.assert_array_equal(x.grad, [5.0, 5.0])

    def test_suffix_broadcast_add(self):
        x = Tensor(np.ones((4, 3, 2)), requires_grad=True)
        b = Tensor(np.array([10.0, 20.0]), requires_grad=True)
        backward(tensor_sum(x + b))
        np.testing.assert_array_equal(b.grad, [12.0, 12.0])
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 3)))

    def test_mean_gradient(self):
        x = Tensor(np.ones((2, 8)), requires_grad=True)
        backward(tensor_mean(x))
        np.testing.assert_allclose(x.grad, np.full((2, 8), 1 / 16), atol=1e-15)

    def test_log_softmax_matches_log_of_softmax(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((3, 6))
        np.testing.assert_allclose(
            log_softmax(Tensor(x), axis=1).data,
            np.log(softmax(Tensor(x), axis=1).data),
            atol=1e-12,
        )
