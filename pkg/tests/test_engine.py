import numpy as np
import pytest

from rmaff_ps import engine as E
from rmaff_ps.engine import Graph, Tensor
from rmaff_ps.errors import GraphError, ShapeError


def leaf(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.arange(24.0).reshape(2, 3, 2, 2))
        E.total(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 2, 2)))

    def test_half_square_gives_identity(self, rng):
        x = leaf(rng.normal(size=(1, 2, 3, 3)))
        E.scale(E.total(E.mul(x, x)), 0.5).backward()
        np.testing.assert_allclose(x.grad, x.data, rtol=1e-15)

    def test_shared_node_visited_once(self):
        x = leaf(np.ones((1, 1, 2, 2)))
        y = E.scale(x, 3.0)
        loss = E.total(E.add(y, y))
        graph = Graph.from_output(loss)
        assert len({id(n) for n in graph.nodes}) == len(graph)
        E.backward(graph, loss)
        np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 6.0))

    def test_non_scalar_loss_rejected(self):
        x = leaf(np.ones((1, 1, 2, 2)))
        with pytest.raises(GraphError):
            E.scale(x, 2.0).backward()

    def test_detached_loss_rejected(self):
        with pytest.raises(GraphError):
            E.total(Tensor(np.ones((1, 1, 2, 2)))).backward()

    def test_mismatched_shapes_rejected(self):
        with pytest.raises(ShapeError):
            E.add(leaf(np.ones((1, 2, 3, 3))), leaf(np.ones((1, 3, 3, 3))))

    def test_gate_broadcasts_reduce_gradient(self):
        x = leaf(np.ones((2, 3, 4, 4)))
        gate = leaf(np.full((2, 3, 1, 1), 0.5))
        E.total(E.mul(x, gate)).backward()
        np.testing.assert_array_equal(gate.grad, np.full((2, 3, 1, 1), 16.0))


class TestConvolution:
    def test_identity_permutation(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 4, 5)))
        perm = [2, 0, 1]
        w = np.zeros((3, 3, 1, 1))
        for out_c, in_c in enumerate(perm):
            w[out_c, in_c] = 1.0
        out = E.conv2d(x, Tensor(w), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x.data[:, perm])

    def test_impulse_with_box_kernel(self):
        img = np.zeros((1, 1, 7, 7))
        img[0, 0, 3, 3] = 1.0
        out = E.conv2d(Tensor(img), Tensor(np.ones((1, 1, 3, 3)))).data[0, 0]
        expected = np.zeros((7, 7))
        expected[2:5, 2:5] = 1.0
        np.testing.assert_array_equal(out, expected)

    def test_separable_kernel(self, rng):
        u = rng.normal(size=3)
        v = rng.normal(size=3)
        x = Tensor(rng.normal(size=(1, 1, 8, 8)))
        rows = E.conv2d(x, Tensor(v.reshape(1, 1, 1, 3)))
        both = E.conv2d(rows, Tensor(u.reshape(1, 1, 3, 1)))
        full = E.conv2d(x, Tensor(np.outer(u, v).reshape(1, 1, 3, 3)))
        np.testing.assert_allclose(both.data[..., 1:-1, 1:-1], full.data[..., 1:-1, 1:-1], atol=1e-12)

    @pytest.mark.parametrize("kernel", [(1, 1), (3, 3), (1, 3), (3, 1)])
    @pytest.mark.parametrize("size", [(1, 1), (2, 5), (7, 4)])
    def test_same_padding_preserves_size(self, kernel, size):
        x = Tensor(np.ones((1, 2, *size)))
        out = E.conv2d(x, Tensor(np.ones((3, 2, *kernel))))
        assert out.shape == (1, 3, *size)

    def test_stride_two_halves_with_ceiling(self):
        out = E.conv2d(Tensor(np.ones((1, 1, 7, 6))), Tensor(np.ones((1, 1, 3, 3))), stride=2)
        assert out.shape == (1, 1, 4, 3)

    def test_channel_mismatch_names_layer(self):
        with pytest.raises(ShapeError, match="extractor.shallow"):
            E.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), name="extractor.shallow")


class TestNormalisation:
    def test_l2norm_unit_output(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        y = E.l2norm_channels(x).data
        np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-12)

    def test_l2norm_gradient_orthogonal_to_output(self, rng):
        x = leaf(rng.normal(size=(1, 3, 3, 3)))
        y = E.l2norm_channels(x)
        E.total(E.mul(y, Tensor(rng.normal(size=(1, 3, 3, 3))))).backward()
        dots = np.sum(x.grad * y.data, axis=1)
        np.testing.assert_allclose(dots, 0.0, atol=1e-12)

    def test_batchnorm_eval_is_deterministic(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        g = Tensor(np.array([1.5, 0.5, 2.0]))
        b = Tensor(np.array([0.1, -0.2, 0.0]))
        mean, var = np.array([0.1, 0.2, 0.3]), np.array([1.0, 2.0, 0.5])
        first = E.batch_norm_eval(x, g, b, mean, var).data
        second = E.batch_norm_eval(x, g, b, mean, var).data
        assert first.tobytes() == second.tobytes()

    def test_batchnorm_train_standardises(self, rng):
        x = Tensor(rng.normal(3.0, 2.0, size=(2, 3, 5, 5)))
        out, mu, var = E.batch_norm_train(x, Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(mu, x.data.mean(axis=(0, 2, 3)))


class TestPooling:
    def test_global_avg_pool_matches_direct_sum(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 5, 7)))
        np.testing.assert_allclose(E.global_avg_pool(x).data[..., 0, 0], x.data.sum(axis=(2, 3)) / 35.0, rtol=1e-15)

    def test_global_max_pool_tie_goes_to_lowest_index(self):
        x = leaf(np.array([[[[1.0, 3.0], [3.0, 0.0]]]]))
        E.total(E.global_max_pool(x)).backward()
        np.testing.assert_array_equal(x.grad[0, 0], [[0.0, 1.0], [0.0, 0.0]])

    def test_max_pool_routes_to_argmax(self):
        x = leaf(np.array([[[[1.0, 2.0, 5.0], [2.0, 0.0, 1.0], [7.0, 7.0, 0.0]]]]))
        out = E.max_pool2d(x)
        np.testing.assert_array_equal(out.data[0, 0], [[2.0, 5.0], [7.0, 0.0]])
        E.total(out).backward()
        np.testing.assert_array_equal(x.grad[0, 0], [[0, 1, 1], [0, 0, 0], [1, 0, 1]])

    def test_avg_pool_border_windows(self):
        x = Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
        np.testing.assert_allclose(E.avg_pool2d(x).data[0, 0], [[2.0, 3.5], [6.5, 8.0]])

    def test_channel_max_ties(self):
        x = leaf(np.array([[[[2.0]], [[2.0]], [[1.0]]]]))
        E.total(E.channel_max(x)).backward()
        np.testing.assert_array_equal(x.grad.reshape(3), [1.0, 0.0, 0.0])

    def test_maximum_elementwise(self):
        a = Tensor(np.array([1.0, 5.0]).reshape(1, 2, 1, 1))
        b = Tensor(np.array([3.0, 2.0]).reshape(1, 2, 1, 1))
        np.testing.assert_array_equal(E.maximum([a, b]).data.reshape(2), [3.0, 5.0])


class TestUpsample:
    def test_constant_stays_constant(self):
        x = Tensor(np.full((1, 2, 3, 5), 4.25))
        np.testing.assert_allclose(E.upsample_bilinear(x, 6, 10).data, 4.25, rtol=1e-15)

    def test_rows_sum_to_one(self):
        m = E.bilinear_matrix(5, 9)
        np.testing.assert_allclose(m.sum(axis=1), 1.0)


class TestCosineLoss:
    def test_matches_half_squared_difference(self, rng):
        pred = E.l2norm_channels(Tensor(rng.normal(size=(2, 3, 4, 4))))
        target = E.l2norm_channels(Tensor(rng.normal(size=(2, 3, 4, 4)))).data
        mask = np.ones((2, 4, 4), bool)
        mask[0, 0, 0] = False
        loss = E.cosine_loss_tensor(pred, target, mask).item()
        half_sq = 0.5 * np.sum((pred.data - target) ** 2, axis=1)
        assert loss == pytest.approx(half_sq[mask].mean(), abs=1e-12)

    def test_empty_mask_rejected(self):
        x = Tensor(np.ones((1, 3, 2, 2)))
        with pytest.raises(ShapeError):
            E.cosine_loss_tensor(x, x.data, np.zeros((1, 2, 2), bool))


def test_tensor_rank_checked():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 2, 2)))
