import numpy as np
import pytest

from conftest import central_diff, quantized_cloud, rel_err
from flexconv import backend
from flexconv.errors import IndexOutOfRangeError, ShapeMismatchError
from flexconv.flexops import (
    FlexConvParams,
    downsample_gather,
    flex_conv_backward,
    flex_conv_forward,
    flex_max_pool,
    flex_max_pool_backward,
    flex_upsample,
    param_count,
    pointwise_conv,
    pointwise_conv_backward,
)
from flexconv.neighborhood import NeighborIndex, knn_brute_force


def line_neighbors():
    # points {0, 1, 3} on a line, k=2
    return NeighborIndex(np.array([[0, 1], [1, 0], [2, 1]]))


def random_instance(rng, n=None, d=None, c_in=None, c_out=None, k=None):
    n = n or int(rng.integers(2, 32))
    d = d or int(rng.integers(1, 4))
    c_in = c_in or int(rng.integers(1, 5))
    c_out = c_out or int(rng.integers(1, 5))
    k = k or int(rng.integers(1, min(n, 8) + 1))
    locs = rng.standard_normal((n, d))
    feats = rng.standard_normal((n, c_in))
    nbr = knn_brute_force(locs, k)
    params = FlexConvParams(rng.standard_normal((c_out, c_in, d)),
                            rng.standard_normal((c_out, c_in)))
    return feats, locs, nbr, params


class TestFlexConvForward:
    def test_identity_configuration(self, kernel_backend):
        out = flex_conv_forward(np.array([[5.0]]), np.zeros((1, 2)),
                                NeighborIndex(np.array([[0]])),
                                FlexConvParams(np.zeros((1, 1, 2)), np.ones((1, 1))))
        np.testing.assert_array_equal(out, [[5.0]])

    def test_two_point_hand_evaluation(self, kernel_backend):
        feats = np.array([[1.0], [2.0]])
        locs = np.array([[0.0, 0.0], [1.0, 0.0]])
        nbr = NeighborIndex(np.array([[0, 1], [1, 0]]))
        params = FlexConvParams(np.array([[[1.0, 0.0]]]), np.zeros((1, 1)))
        out = flex_conv_forward(feats, locs, nbr, params)
        # point 0: <theta,(0,0)>*1 + <theta,(-1,0)>*2 = -2
        assert out[0, 0] == -2.0

    def test_shape_mismatch(self, kernel_backend):
        feats, locs, nbr, params = random_instance(np.random.default_rng(0))
        with pytest.raises(ShapeMismatchError):
            flex_conv_forward(feats[:, :0].reshape(len(feats), 0), locs, nbr, params)
        with pytest.raises(ShapeMismatchError):
            flex_conv_forward(np.c_[feats, feats], locs, nbr, params)

    def test_bad_neighbor_index(self, kernel_backend):
        feats, locs, nbr, params = random_instance(np.random.default_rng(1))
        bad = nbr.indices.copy()
        bad[0, -1] = len(feats) + 3
        with pytest.raises(IndexOutOfRangeError):
            flex_conv_forward(feats, locs, NeighborIndex(bad), params)

    def test_backends_agree(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            feats, locs, nbr, params = random_instance(rng)
            outs = {}
            for name in ("native", "reference") if backend.have_native() else ("reference",):
                with backend.use(name):
                    outs[name] = flex_conv_forward(feats, locs, nbr, params)
            if backend.have_native():
                np.testing.assert_allclose(outs["native"], outs["reference"],
                                           rtol=1e-12, atol=1e-12)


class TestFlexConvBackward:
    def test_bias_gradient_is_feature_sum(self, kernel_backend):
        """With theta = 0 the operator is linear in theta_b."""
        rng = np.random.default_rng(3)
        feats, locs, nbr, _ = random_instance(rng, c_in=2, c_out=3)
        params = FlexConvParams(np.zeros((3, 2, locs.shape[1])), rng.standard_normal((3, 2)))
        gb = flex_conv_backward(np.ones((len(feats), 3)), feats, locs, nbr, params)
        want = feats[nbr.indices].sum(axis=(0, 1))  # sum_i sum_j f(c, j)
        for cp in range(3):
            np.testing.assert_allclose(gb.d_theta_b[cp], want, rtol=1e-12)

    def test_two_point_hand_gradients(self, kernel_backend):
        feats = np.array([[1.0], [2.0]])
        locs = np.array([[0.0, 0.0], [1.0, 0.0]])
        nbr = NeighborIndex(np.array([[0, 1], [1, 0]]))
        params = FlexConvParams(np.array([[[1.0, 0.0]]]), np.zeros((1, 1)))
        upstream = np.array([[1.0], [0.0]])
        gb = flex_conv_backward(upstream, feats, locs, nbr, params)
        np.testing.assert_allclose(gb.d_features, [[0.0], [-1.0]])
        np.testing.assert_allclose(gb.d_theta, [[[-2.0, 0.0]]])

    @pytest.mark.parametrize("trial", range(6))
    def test_all_gradients_match_finite_differences(self, kernel_backend, trial):
        rng = np.random.default_rng(100 + trial)
        feats, locs, nbr, params = random_instance(rng)
        upstream = rng.standard_normal((len(feats), params.c_out))

        def loss(f=feats, l=locs, th=params.theta, tb=params.theta_b):
            return float((flex_conv_forward(f, l, nbr, FlexConvParams(th, tb)) * upstream).sum())

        gb = flex_conv_backward(upstream, feats, locs, nbr, params)
        assert rel_err(gb.d_features, central_diff(lambda a: loss(f=a), feats)) < 1e-6
        assert rel_err(gb.d_locations, central_diff(lambda a: loss(l=a), locs)) < 1e-6
        assert rel_err(gb.d_theta, central_diff(lambda a: loss(th=a), params.theta)) < 1e-6
        assert rel_err(gb.d_theta_b, central_diff(lambda a: loss(tb=a), params.theta_b)) < 1e-6


class TestFlexMaxPool:
    def test_k1_identity(self, kernel_backend):
        feats = np.array([[1.0, -2.0], [3.0, 4.0]])
        pooled, rec = flex_max_pool(feats, NeighborIndex(np.array([[0], [1]])))
        np.testing.assert_array_equal(pooled, feats)
        np.testing.assert_array_equal(rec, [[0, 0], [1, 1]])

    def test_three_clique(self, kernel_backend):
        feats = np.array([[1.0], [5.0], [3.0]])
        nbr = NeighborIndex(np.array([[0, 1, 2], [1, 0, 2], [2, 0, 1]]))
        pooled, rec = flex_max_pool(feats, nbr)
        np.testing.assert_array_equal(pooled, [[5.0]] * 3)
        np.testing.assert_array_equal(rec, [[1]] * 3)

    def test_tie_goes_to_lower_global_index(self, kernel_backend):
        feats = np.array([[2.0], [2.0]])
        # row 0 lists neighbor 1 before 0: the tie rule must still pick 0
        pooled, rec = flex_max_pool(feats, NeighborIndex(np.array([[0, 1], [1, 0]])))
        np.testing.assert_array_equal(pooled, [[2.0], [2.0]])
        np.testing.assert_array_equal(rec, [[0], [0]])

    def test_output_dominates_neighborhood(self, kernel_backend):
        rng = np.random.default_rng(4)
        feats = rng.standard_normal((40, 3))
        nbr = knn_brute_force(rng.standard_normal((40, 2)), 5)
        pooled, rec = flex_max_pool(feats, nbr)
        gathered = feats[nbr.indices]  # (n, k, C)
        assert (pooled[:, None, :] >= gathered).all()
        np.testing.assert_array_equal(pooled, feats[rec, np.arange(3)])

    def test_backward_k1_identity(self, kernel_backend):
        up = np.array([[1.0, 2.0], [3.0, 4.0]])
        rec = np.array([[0, 0], [1, 1]])
        np.testing.assert_array_equal(flex_max_pool_backward(up, rec), up)

    def test_backward_shared_winner_sums(self, kernel_backend):
        up = np.array([[1.0], [2.0], [4.0]])
        rec = np.array([[1], [1], [1]])
        np.testing.assert_array_equal(flex_max_pool_backward(up, rec), [[0.0], [7.0], [0.0]])

    def test_backward_matches_finite_differences(self, kernel_backend):
        rng = np.random.default_rng(5)
        feats = rng.standard_normal((20, 2))  # continuous draws: tie-free
        nbr = knn_brute_force(rng.standard_normal((20, 3)), 4)
        upstream = rng.standard_normal((20, 2))

        def loss(f):
            pooled, _ = flex_max_pool(f, nbr)
            return float((pooled * upstream).sum())

        _, rec = flex_max_pool(feats, nbr)
        got = flex_max_pool_backward(upstream, rec)
        assert rel_err(got, central_diff(loss, feats)) < 1e-6

    def test_backward_corrupt_record(self, kernel_backend):
        with pytest.raises(IndexOutOfRangeError):
            flex_max_pool_backward(np.ones((2, 1)), np.array([[0], [5]]))


class TestGatherUpsample:
    def test_gather_identity(self):
        feats = np.arange(6.0).reshape(3, 2)
        np.testing.assert_array_equal(downsample_gather(feats, np.arange(3)), feats)

    def test_gather_reorders(self):
        feats = np.array([[1.0], [2.0], [3.0]])
        np.testing.assert_array_equal(downsample_gather(feats, [2, 0]), [[3.0], [1.0]])

    def test_pool_then_gather_is_per_selected_max(self, kernel_backend):
        rng = np.random.default_rng(6)
        feats = rng.standard_normal((30, 2))
        nbr = knn_brute_force(rng.standard_normal((30, 2)), 5)
        sel = np.array([3, 7, 21])
        pooled, _ = flex_max_pool(feats, nbr)
        got = downsample_gather(pooled, sel)
        want = np.stack([feats[nbr.indices[i]].max(axis=0) for i in sel])
        np.testing.assert_array_equal(got, want)

    def test_upsample_identity(self, kernel_backend):
        feats = np.array([[1.0], [-2.0], [3.0]])
        nbr = NeighborIndex(np.arange(3, dtype=np.int64).reshape(3, 1))
        out = flex_upsample(feats, np.arange(3), nbr, 3)
        np.testing.assert_array_equal(out, feats)

    def test_upsample_line_pipeline(self, kernel_backend):
        # fine level {0, 1, 3}: scatter [7] to index 0, pool with k=2 rows
        out = flex_upsample(np.array([[7.0]]), np.array([0]), line_neighbors(), 3)
        np.testing.assert_array_equal(out, [[7.0], [7.0], [0.0]])

    def test_negative_features_masked_by_zero_fill(self, kernel_backend):
        out = flex_upsample(np.array([[-5.0]]), np.array([0]), line_neighbors(), 3)
        np.testing.assert_array_equal(out, [[0.0], [0.0], [0.0]])

    def test_selection_out_of_range(self, kernel_backend):
        with pytest.raises(IndexOutOfRangeError):
            flex_upsample(np.ones((1, 1)), np.array([9]), line_neighbors(), 3)


class TestPointwise:
    def test_identity_weights(self):
        feats = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(pointwise_conv(feats, np.eye(3), np.zeros(3)), feats)

    def test_zero_weights_broadcast_bias(self):
        out = pointwise_conv(np.ones((4, 2)), np.zeros((3, 2)), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(out, np.tile([1.0, 2.0, 3.0], (4, 1)))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        feats = rng.standard_normal((6, 3))
        w = rng.standard_normal((4, 3))
        b = rng.standard_normal(4)
        up = rng.standard_normal((6, 4))
        d_f, d_w, d_b = pointwise_conv_backward(up, feats, w)
        assert rel_err(d_f, central_diff(lambda a: float((pointwise_conv(a, w, b) * up).sum()), feats)) < 1e-6
        assert rel_err(d_w, central_diff(lambda a: float((pointwise_conv(feats, a, b) * up).sum()), w)) < 1e-6
        assert rel_err(d_b, central_diff(lambda a: float((pointwise_conv(feats, w, a) * up).sum()), b)) < 1e-6


class TestParamCount:
    def test_values(self):
        assert param_count(64, 64, 3) == 16384
        assert param_count(1, 1, 2) == 3

    def test_flex_vs_grid_kernel(self):
        c = 32
        grid_2d = c * c * 9
        assert grid_2d / param_count(c, c, 2) == 3.0


class TestOperatorProperties:
    def test_translation_invariance_bitwise(self, kernel_backend):
        rng = np.random.default_rng(8)
        locs = quantized_cloud(rng, 50, 3)
        feats = rng.standard_normal((50, 2))
        nbr = knn_brute_force(locs, 6)
        params = FlexConvParams(rng.standard_normal((3, 2, 3)), rng.standard_normal((3, 2)))
        base = flex_conv_forward(feats, locs, nbr, params)
        for shift in ([1.0, 0.0, 0.0], [17.0, -5.0, 3.0], [-128.0, 64.0, 1.0]):
            moved = flex_conv_forward(feats, locs + np.array(shift), nbr, params)
            np.testing.assert_array_equal(moved, base)

    def test_permutation_equivariance(self, kernel_backend):
        rng = np.random.default_rng(9)
        n = 40
        locs = rng.standard_normal((n, 2))
        feats = rng.standard_normal((n, 3))
        nbr = knn_brute_force(locs, 5)
        params = FlexConvParams(rng.standard_normal((2, 3, 2)), rng.standard_normal((2, 3)))
        out = flex_conv_forward(feats, locs, nbr, params)
        perm = rng.permutation(n)
        inv = np.empty(n, dtype=np.int64)
        inv[perm] = np.arange(n)
        nbr_p = NeighborIndex(inv[nbr.indices[perm]])
        out_p = flex_conv_forward(feats[perm], locs[perm], nbr_p, params)
        np.testing.assert_array_equal(out_p, out[perm])

    def test_forward_deterministic_across_threads(self, kernel_backend):
        rng = np.random.default_rng(10)
        feats, locs, nbr, params = random_instance(rng, n=500, k=8, c_in=4, c_out=4, d=3)
        a = flex_conv_forward(feats, locs, nbr, params, num_threads=1)
        b = flex_conv_forward(feats, locs, nbr, params, num_threads=4)
        c = flex_conv_forward(feats, locs, nbr, params, num_threads=1)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a, c)
        pa, _ = flex_max_pool(feats, nbr, num_threads=1)
        pb, _ = flex_max_pool(feats, nbr, num_threads=3)
        np.testing.assert_array_equal(pa, pb)

    def test_backward_deterministic(self, kernel_backend):
        rng = np.random.default_rng(11)
        feats, locs, nbr, params = random_instance(rng, n=100, k=6)
        up = rng.standard_normal((100, params.c_out))
        a = flex_conv_backward(up, feats, locs, nbr, params)
        b = flex_conv_backward(up, feats, locs, nbr, params)
        for x, y in ((a.d_features, b.d_features), (a.d_theta, b.d_theta),
                     (a.d_theta_b, b.d_theta_b), (a.d_locations, b.d_locations)):
            np.testing.assert_array_equal(x, y)
