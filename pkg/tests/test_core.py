import numpy as np
import pytest

from flexconv.core import (
    DenseImage,
    PointCloud,
    Rng,
    image_to_cloud,
    read_cloud,
    validate_cloud,
    write_cloud,
)
from flexconv.errors import (
    ConfigInvalidError,
    EmptyInputError,
    IoFailureError,
    NonFiniteError,
    ShapeMismatchError,
)


class TestValidateCloud:
    def test_minimal_valid_cloud(self):
        validate_cloud(PointCloud(np.zeros((1, 3)), np.zeros((1, 1))))

    def test_row_count_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            validate_cloud(PointCloud(np.zeros((4, 3)), np.zeros((5, 2))))

    def test_nan_features(self):
        feats = np.zeros((2, 2))
        feats[1, 0] = np.nan
        with pytest.raises(NonFiniteError):
            validate_cloud(PointCloud(np.zeros((2, 3)), feats))

    def test_inf_locations(self):
        locs = np.zeros((2, 3))
        locs[0, 2] = np.inf
        with pytest.raises(NonFiniteError):
            validate_cloud(PointCloud(locs, np.zeros((2, 1))))


class TestImageToCloud:
    def test_3x3_zeros(self):
        cloud = image_to_cloud(DenseImage(np.zeros((3, 3, 1))))
        assert cloud.n == 9 and cloud.d == 2 and cloud.C == 1
        coords = {tuple(row) for row in cloud.locations}
        assert coords == {(r, c) for r in (0.0, 1.0, 2.0) for c in (0.0, 1.0, 2.0)}
        assert (cloud.features == 0).all()

    def test_raster_order(self):
        # 2x2 content embedded in the minimum legal 3x3 image
        pix = np.arange(1.0, 10.0).reshape(3, 3, 1)
        cloud = image_to_cloud(DenseImage(pix))
        np.testing.assert_array_equal(
            cloud.locations[:4], [[0, 0], [0, 1], [0, 2], [1, 0]]
        )
        np.testing.assert_array_equal(cloud.features.ravel(), np.arange(1.0, 10.0))

    def test_sizes(self):
        cloud = image_to_cloud(DenseImage(np.zeros((5, 4, 2))))
        assert cloud.n == 20 and cloud.d == 2 and cloud.C == 2

    def test_locations_distinct(self):
        cloud = image_to_cloud(DenseImage(np.zeros((7, 5, 1))))
        assert len({tuple(r) for r in cloud.locations}) == cloud.n

    def test_result_always_validates(self):
        rng = np.random.default_rng(0)
        cloud = image_to_cloud(DenseImage(rng.standard_normal((6, 9, 3))))
        validate_cloud(cloud)

    def test_tiny_image_rejected(self):
        with pytest.raises(ShapeMismatchError):
            DenseImage(np.zeros((2, 5, 1)))


class TestRng:
    def test_equal_seeds_equal_sequences(self):
        a = Rng(42).gen.uniform(size=100)
        b = Rng(42).gen.uniform(size=100)
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        assert not np.array_equal(Rng(1).gen.uniform(size=8), Rng(2).gen.uniform(size=8))

    def test_spawned_streams_independent(self):
        root = Rng(7)
        first = root.spawn(0).gen.uniform(size=8)
        other = root.spawn(1).gen.uniform(size=8)
        assert not np.array_equal(first, other)
        np.testing.assert_array_equal(Rng(7).spawn(0).gen.uniform(size=8), first)

    def test_counter_state_exposed(self):
        rng = Rng(3)
        before = rng.counter
        rng.gen.uniform(size=1000)
        assert rng.counter != before


class TestCloudFiles:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        cloud = PointCloud(rng.standard_normal((17, 3)), rng.standard_normal((17, 2)))
        path = tmp_path / "a.cloud"
        write_cloud(path, cloud)
        back, labels = read_cloud(path)
        assert labels is None
        np.testing.assert_array_equal(back.locations, cloud.locations)
        np.testing.assert_array_equal(back.features, cloud.features)

    def test_labeled_round_trip(self, tmp_path):
        cloud = PointCloud(np.arange(6.0).reshape(3, 2), np.ones((3, 1)))
        labels = np.array([2, 0, 1])
        path = tmp_path / "b.cloud"
        write_cloud(path, cloud, labels)
        header = path.read_text().splitlines()[0]
        assert header == "flexcloud-labeled v1 3 2 1"
        _, back = read_cloud(path)
        np.testing.assert_array_equal(back, labels)

    def test_write_deterministic_bytes(self, tmp_path):
        rng = np.random.default_rng(9)
        cloud = PointCloud(rng.standard_normal((10, 2)), rng.standard_normal((10, 3)))
        write_cloud(tmp_path / "x.cloud", cloud)
        write_cloud(tmp_path / "y.cloud", cloud)
        assert (tmp_path / "x.cloud").read_bytes() == (tmp_path / "y.cloud").read_bytes()

    @pytest.mark.parametrize("header", [
        "flexcloud v2 2 2 1",
        "cloud v1 2 2 1",
        "flexcloud v1 2 2",
        "flexcloud v1 two 2 1",
    ])
    def test_malformed_header(self, tmp_path, header):
        path = tmp_path / "bad.cloud"
        path.write_text(header + "\n0 0 1\n0 1 1\n")
        with pytest.raises(ConfigInvalidError):
            read_cloud(path)

    def test_wrong_point_count(self, tmp_path):
        path = tmp_path / "bad.cloud"
        path.write_text("flexcloud v1 3 1 1\n0 1\n1 2\n")
        with pytest.raises(ConfigInvalidError):
            read_cloud(path)

    def test_wrong_field_count(self, tmp_path):
        path = tmp_path / "bad.cloud"
        path.write_text("flexcloud v1 1 2 1\n0 1\n")
        with pytest.raises(ConfigInvalidError):
            read_cloud(path)

    def test_empty_cloud_header(self, tmp_path):
        path = tmp_path / "empty.cloud"
        path.write_text("flexcloud v1 0 3 1\n")
        with pytest.raises(EmptyInputError):
            read_cloud(path)

    def test_non_finite_value(self, tmp_path):
        path = tmp_path / "nan.cloud"
        path.write_text("flexcloud v1 1 1 1\nnan 1\n")
        with pytest.raises(NonFiniteError):
            read_cloud(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoFailureError):
            read_cloud(tmp_path / "nope.cloud")
