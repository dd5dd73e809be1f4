"""Tensor arithmetic and reverse-mode gradient checks.

Every differentiable primitive is checked against the central
finite-difference oracle from conftest at 64-bit precision.
"""

import numpy as np
import pytest

from certsr import tensor as T
from certsr.rng import RngStream
from conftest import numeric_gradient, rel_err


def grad_of(fn, x0: np.ndarray) -> np.ndarray:
    """Autodiff gradient of scalar fn(x) built from recorded primitives."""
    g = T.DiffGraph()
    x = g.leaf(x0)
    loss = fn(x)
    return g.backward(loss)[x]


class TestConstruction:
    def test_copies_and_freezes(self):
        src = np.ones((2, 2))
        t = T.Tensor(src)
        src[0, 0] = 5.0
        assert t.data[0, 0] == 1.0
        with pytest.raises(ValueError):
            t.data[0, 0] = 2.0

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            T.Tensor([1.0, np.inf])

    def test_shape_mismatch_rejected_before_compute(self):
        a = T.Tensor(np.zeros((2, 3)))
        b = T.Tensor(np.zeros((3, 2)))
        for op in (T.add, T.sub, T.mul):
            with pytest.raises(T.ShapeError):
                op(a, b)

    def test_mixed_graphs_rejected(self):
        g1, g2 = T.DiffGraph(), T.DiffGraph()
        a = g1.leaf(np.zeros(3))
        b = g2.leaf(np.zeros(3))
        with pytest.raises(T.GraphError):
            T.add(a, b)


class TestElementwise:
    def test_clamp_values(self):
        out = T.clamp(T.Tensor([-0.2, 0.5, 1.3]), 0.0, 1.0)
        np.testing.assert_array_equal(out.data, [0.0, 0.5, 1.0])

    def test_tanh_zero(self):
        g = T.DiffGraph()
        x = g.leaf(np.zeros(()))
        y = T.tanh(x)
        assert y.item() == 0.0
        assert g.backward(y)[x] == 1.0

    def test_leaky_relu_negative_slope_matches_fd(self, rng):
        x0 = -np.abs(rng.normal((4, 4))) - 0.5  # keep well below the kink
        slope = 0.2
        g_ad = grad_of(lambda x: T.tsum(T.leaky_relu(x, slope)), x0)
        np.testing.assert_allclose(g_ad, np.full_like(x0, slope))
        g_fd = numeric_gradient(lambda v: np.sum(np.where(v >= 0, v, slope * v)), x0)
        assert rel_err(g_ad, g_fd) < 1e-6

    def test_abs_subgradient_zero_at_ties(self):
        g_ad = grad_of(lambda x: T.tsum(T.absolute(x)), np.array([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(g_ad, [-1.0, 0.0, 1.0])

    def test_sqrt_eps_differentiable_at_zero(self):
        g_ad = grad_of(lambda x: T.sqrt_eps(T.tsum(T.mul(x, x)), 1e-12), np.zeros(3))
        assert np.all(np.isfinite(g_ad))

    def test_clamp_zero_gradient_outside(self):
        x0 = np.array([-0.5, 0.25, 1.5])
        g_ad = grad_of(lambda x: T.tsum(T.clamp(x, 0.0, 1.0)), x0)
        np.testing.assert_array_equal(g_ad, [0.0, 1.0, 0.0])


class TestReductions:
    def test_sum_gradient_all_ones(self, rng):
        x0 = rng.normal((3, 5))
        np.testing.assert_array_equal(grad_of(T.tsum, x0), np.ones_like(x0))

    def test_mean_square_analytic(self):
        # d/dx mean(x^2) = 2x/n on x = [1, 2, 3]
        g_ad = grad_of(lambda x: T.tmean(T.mul(x, x)), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(g_ad, [2.0 / 3.0, 4.0 / 3.0, 2.0], rtol=1e-14)

    def test_backward_requires_scalar(self):
        g = T.DiffGraph()
        x = g.leaf(np.ones(3))
        with pytest.raises(T.GraphError):
            g.backward(T.mul(x, x))

    def test_backward_idempotent(self, rng):
        g = T.DiffGraph()
        x = g.leaf(rng.normal((4,)))
        loss = T.tsum(T.mul(x, x))
        first = g.backward(loss)[x].copy()
        second = g.backward(loss)[x]
        np.testing.assert_array_equal(first, second)


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = T.Tensor(rng.uniform(0, 1, (1, 3, 3)))
        k = T.Tensor(np.ones((1, 1, 1, 1)))
        out = T.conv2d(x, k, T.Tensor(np.zeros(1)), padding=0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_hand_arithmetic(self):
        x = T.Tensor([[[1.0, 2.0], [3.0, 4.0]]])
        k = T.Tensor([[[[1.0, 0.0], [0.0, 1.0]]]])
        out = T.conv2d(x, k, T.Tensor(np.zeros(1)), padding=0)
        assert out.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == 5.0

    def test_output_shape_with_padding(self, rng):
        x = T.Tensor(rng.normal((2, 5, 6)))
        k = T.Tensor(rng.normal((3, 2, 3, 3)))
        out = T.conv2d(x, k, T.Tensor(np.zeros(3)), padding=1)
        assert out.shape == (3, 5, 6)

    def test_channel_mismatch(self, rng):
        x = T.Tensor(rng.normal((2, 5, 5)))
        k = T.Tensor(rng.normal((3, 4, 3, 3)))
        with pytest.raises(T.ShapeError):
            T.conv2d(x, k, T.Tensor(np.zeros(3)))

    def test_gradients_match_finite_differences(self, rng):
        x0 = rng.normal((2, 5, 5))
        k0 = rng.normal((3, 2, 3, 3)) * 0.5
        b0 = rng.normal((3,))

        def run(xv, kv, bv):
            g = T.DiffGraph()
            x, k, b = g.leaf(xv), g.leaf(kv), g.leaf(bv)
            loss = T.tsum(T.conv2d(x, k, b, padding=1))
            return g, (x, k, b), loss

        g, (x, k, b), loss = run(x0, k0, b0)
        grads = g.backward(loss)
        fd_x = numeric_gradient(
            lambda v: T.conv2d(T.Tensor(v), T.Tensor(k0), T.Tensor(b0), 1).data.sum(), x0)
        fd_k = numeric_gradient(
            lambda v: T.conv2d(T.Tensor(x0), T.Tensor(v), T.Tensor(b0), 1).data.sum(), k0)
        fd_b = numeric_gradient(
            lambda v: T.conv2d(T.Tensor(x0), T.Tensor(k0), T.Tensor(v), 1).data.sum(), b0)
        assert rel_err(grads[x], fd_x) < 1e-6
        assert rel_err(grads[k], fd_k) < 1e-6
        assert rel_err(grads[b], fd_b) < 1e-6

    def test_batched_matches_single(self, rng):
        xs = rng.uniform(0, 1, (4, 3, 6, 6))
        k = rng.normal((5, 3, 3, 3))
        b = rng.normal((5,))
        batched = T.conv2d_many(xs, k, b, padding=1)
        for i in range(4):
            single = T.conv2d(T.Tensor(xs[i]), T.Tensor(k), T.Tensor(b), 1).data
            np.testing.assert_allclose(batched[i], single, rtol=1e-12, atol=1e-13)


class TestPixelShuffle:
    def test_shape(self, rng):
        out = T.pixel_shuffle(T.Tensor(rng.normal((4, 3, 3))), 2)
        assert out.shape == (1, 6, 6)

    def test_round_trip(self, rng):
        x = T.Tensor(rng.normal((8, 3, 5)))
        back = T.pixel_unshuffle(T.pixel_shuffle(x, 2), 2)
        np.testing.assert_array_equal(back.data, x.data)

    def test_index_map_enumeration(self):
        # Distinct values let us verify the documented index map exactly.
        x = np.arange(16.0).reshape(4, 2, 2)
        out = T.pixel_shuffle(T.Tensor(x), 2).data
        r = 2
        for i in range(4):
            for j in range(4):
                src_c = (i % r) * r + (j % r)
                assert out[0, i, j] == x[src_c, i // r, j // r]

    def test_divisibility_error(self, rng):
        with pytest.raises(T.ShapeError):
            T.pixel_shuffle(T.Tensor(rng.normal((3, 2, 2))), 2)

    def test_gradient_is_inverse_rearrangement(self, rng):
        x0 = rng.normal((4, 2, 2))
        g_ad = grad_of(lambda x: T.tsum(T.mul(T.pixel_shuffle(x, 2), T.pixel_shuffle(x, 2))), x0)
        np.testing.assert_allclose(g_ad, 2.0 * x0, rtol=1e-14)


class TestReplicatePad:
    def test_values(self):
        x = T.Tensor(np.arange(4.0).reshape(1, 2, 2))
        out = T.replicate_pad(x, 1).data
        np.testing.assert_array_equal(out[0, 0], [0, 0, 1, 1])
        np.testing.assert_array_equal(out[0, -1], [2, 2, 3, 3])

    def test_gradient_matches_fd(self, rng):
        x0 = rng.normal((2, 3, 4))
        weights = rng.normal((2, 5, 6))

        def f(x):
            return T.tsum(T.mul(T.replicate_pad(x, 1), T.Tensor(weights)))

        g_ad = grad_of(f, x0)
        g_fd = numeric_gradient(lambda v: f(T.Tensor(v)).item(), x0)
        assert rel_err(g_ad, g_fd) < 1e-6


class TestPixelwiseMedian:
    def test_odd_median_and_routing(self):
        vals = [0.1, 0.9, 0.2]
        g = T.DiffGraph()
        leaves = [g.leaf(np.full((2, 2), v)) for v in vals]
        med = T.pixelwise_median(leaves)
        np.testing.assert_array_equal(med.data, np.full((2, 2), 0.2))
        grads = g.backward(T.tsum(med))
        np.testing.assert_array_equal(grads[leaves[0]], np.zeros((2, 2)))
        np.testing.assert_array_equal(grads[leaves[1]], np.zeros((2, 2)))
        np.testing.assert_array_equal(grads[leaves[2]], np.ones((2, 2)))

    def test_even_split(self):
        g = T.DiffGraph()
        leaves = [g.leaf(np.array([v])) for v in (0.0, 1.0, 0.4, 0.6)]
        med = T.pixelwise_median(leaves)
        np.testing.assert_allclose(med.data, [0.5])
        grads = g.backward(T.tsum(med))
        np.testing.assert_array_equal(grads[leaves[2]], [0.5])
        np.testing.assert_array_equal(grads[leaves[3]], [0.5])
        np.testing.assert_array_equal(grads[leaves[0]], [0.0])

    def test_tie_goes_to_lowest_index(self):
        g = T.DiffGraph()
        leaves = [g.leaf(np.array([0.5])) for _ in range(3)]
        med = T.pixelwise_median(leaves)
        grads = g.backward(T.tsum(med))
        np.testing.assert_array_equal(grads[leaves[0]], [0.0])
        np.testing.assert_array_equal(grads[leaves[1]], [1.0])
        np.testing.assert_array_equal(grads[leaves[2]], [0.0])


class TestComposedGraphs:
    def test_random_compositions_match_fd(self, rng):
        """Deep random chains of primitives stay within 1e-5 of the oracle."""
        for trial in range(3):
            stream = rng.derive("compose", trial)
            x0 = stream.uniform(-0.8, 0.8, (2, 4, 4))

            def network(x):
                h = T.leaky_relu(x, 0.2)
                h = T.add(T.mul(h, h), x)
                h = T.tanh(h)
                h = T.sub(h, T.mul(x, 0.25))
                h = T.clamp(h, -0.9, 0.9)
                return T.sqrt_eps(T.tmean(T.mul(h, h)), 1e-8)

            g_ad = grad_of(network, x0)
            g_fd = numeric_gradient(lambda v: network(T.Tensor(v)).item(), x0)
            assert rel_err(g_ad, g_fd) < 1e-5

    def test_three_layer_conv_net_max_leaf_error(self, rng):
        x0 = rng.uniform(0.1, 0.9, (2, 6, 6))
        k1 = rng.normal((3, 2, 3, 3)) * 0.4
        b1 = rng.normal((3,)) * 0.1
        k2 = rng.normal((4, 3, 3, 3)) * 0.4
        b2 = rng.normal((4,)) * 0.1
        k3 = rng.normal((2, 4, 1, 1)) * 0.4
        b3 = rng.normal((2,)) * 0.1
        target = rng.uniform(0, 1, (2, 6, 6))

        def net_loss(xv, k1v, b1v, k2v, b2v, k3v, b3v, graph=None):
            g = graph or T.DiffGraph()
            lx = g.leaf(xv)
            lk1, lb1 = g.leaf(k1v), g.leaf(b1v)
            lk2, lb2 = g.leaf(k2v), g.leaf(b2v)
            lk3, lb3 = g.leaf(k3v), g.leaf(b3v)
            h = T.leaky_relu(T.conv2d(lx, lk1, lb1, 1), 0.2)
            h = T.leaky_relu(T.conv2d(h, lk2, lb2, 1), 0.2)
            h = T.conv2d(h, lk3, lb3, 0)
            diff = T.sub(h, g.leaf(target))
            loss = T.tmean(T.mul(diff, diff))
            return g, (lx, lk1, lb1, lk2, lb2, lk3, lb3), loss

        g, leaves, loss = net_loss(x0, k1, b1, k2, b2, k3, b3)
        grads = g.backward(loss)
        values = [x0, k1, b1, k2, b2, k3, b3]
        worst = 0.0
        for pos, (leaf, val) in enumerate(zip(leaves, values)):
            def f(v, pos=pos):
                vals = [np.asarray(w) for w in values]
                vals[pos] = v
                _, _, ls = net_loss(*vals)
                return ls.item()
            worst = max(worst, rel_err(grads[leaf], numeric_gradient(f, val)))
        assert worst < 1e-5


class TestDeterminism:
    def test_identical_streams_identical_tensors(self):
        a = RngStream(7, 3).normal((4, 4))
        b = RngStream(7, 3).normal((4, 4))
        np.testing.assert_array_equal(a, b)

    def test_derive_is_stable(self):
        s1 = RngStream(7, 3).derive("corpus", 5)
        s2 = RngStream(7, 3).derive("corpus", 5)
        assert s1.stream_id == s2.stream_id
        np.testing.assert_array_equal(s1.normal((8,)), s2.normal((8,)))

    def test_derived_streams_differ(self):
        base = RngStream(7, 3)
        assert base.derive("a", 0).stream_id != base.derive("b", 0).stream_id
        assert base.derive("a", 0).stream_id != base.derive("a", 1).stream_id
