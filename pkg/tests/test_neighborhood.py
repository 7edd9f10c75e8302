import time

import numpy as np
import pytest

from flexconv.core import Rng
from flexconv.errors import ConfigInvalidError, EmptyInputError, NonFiniteError
from flexconv.neighborhood import (
    build_kdtree,
    knn_brute_force,
    knn_query,
    read_neighbors,
    validate_neighbors,
    write_neighbors,
)


def test_single_point_tree():
    tree = build_kdtree(np.array([[1.0, 2.0, 3.0]]))
    assert tree.n == 1 and tree.depth == 0
    nbr = knn_query(tree, tree.points, 1)
    assert nbr.indices.tolist() == [[0]]


def test_every_point_in_exactly_one_leaf():
    rng = np.random.default_rng(0)
    tree = build_kdtree(rng.standard_normal((257, 3)), leaf_size=4)
    assert sorted(tree.perm.tolist()) == list(range(257))
    # leaf ranges tile [0, n)
    leaves = [(lo, hi) for ax, lo, hi in zip(tree.axis, tree.lo, tree.hi) if ax < 0]
    covered = sorted(leaves)
    assert covered[0][0] == 0 and covered[-1][1] == 257
    assert all(a[1] == b[0] for a, b in zip(covered, covered[1:]))


def test_duplicate_points_both_retrievable():
    pts = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 0.0], [2.0, 0.0]])
    tree = build_kdtree(pts, leaf_size=1)
    nbr = knn_query(tree, tree.points, 4)
    assert sorted(tree.perm.tolist()) == [0, 1, 2, 3]
    # the duplicate pair find each other first (distance 0)
    assert nbr.indices[0, 1] == 2
    assert nbr.indices[2, 1] == 0


def test_line_example(kernel_backend):
    pts = np.array([[0.0], [1.0], [3.0]])
    tree = build_kdtree(pts)
    assert knn_query(tree, tree.points, 2).indices.tolist() == [[0, 1], [1, 0], [2, 1]]
    assert knn_brute_force(pts, 2).indices.tolist() == [[0, 1], [1, 0], [2, 1]]


def test_k1_is_self_only(kernel_backend):
    rng = np.random.default_rng(1)
    pts = rng.standard_normal((20, 3))
    nbr = knn_query(build_kdtree(pts), pts, 1)
    np.testing.assert_array_equal(nbr.indices.ravel(), np.arange(20))


def test_equidistant_tie_lower_index_wins(kernel_backend):
    pts = np.array([[0.0], [-1.0], [1.0]])
    nbr = knn_query(build_kdtree(pts, leaf_size=1), pts, 2)
    assert nbr.indices[0].tolist() == [0, 1]
    assert knn_brute_force(pts, 2).indices[0].tolist() == [0, 1]


def test_k_larger_than_n_rejected(kernel_backend):
    pts = np.zeros((3, 2))
    with pytest.raises(ConfigInvalidError):
        knn_query(build_kdtree(pts), pts, 4)
    with pytest.raises(ConfigInvalidError):
        knn_brute_force(pts, 4)


def test_empty_and_nonfinite_inputs():
    with pytest.raises(EmptyInputError):
        build_kdtree(np.zeros((0, 3)))
    bad = np.zeros((4, 2))
    bad[2, 1] = np.nan
    with pytest.raises(NonFiniteError):
        build_kdtree(bad)


@pytest.mark.parametrize("n,d,k,leaf", [
    (57, 1, 5, 2),
    (200, 2, 9, 16),
    (1000, 3, 8, 16),
    (2000, 3, 16, 32),
])
def test_matches_brute_force(kernel_backend, n, d, k, leaf):
    """Exact equivalence with the O(n^2) oracle: indices, order, and ties."""
    rng = np.random.default_rng(n + d)
    pts = rng.uniform(0, 1, (n, d))
    tree = build_kdtree(pts, leaf_size=leaf)
    got = knn_query(tree, tree.points, k)
    want = knn_brute_force(pts, k)
    np.testing.assert_array_equal(got.indices, want.indices)
    validate_neighbors(pts, got)


def test_matches_brute_force_with_many_duplicates(kernel_backend):
    rng = np.random.default_rng(3)
    base = rng.integers(0, 4, size=(300, 2)).astype(np.float64)  # heavy ties
    tree = build_kdtree(base)
    got = knn_query(tree, tree.points, 7)
    np.testing.assert_array_equal(got.indices, knn_brute_force(base, 7).indices)


def test_grid_k9_is_3x3_stencil():
    """On an integer grid, k=9 with self inclusion reproduces the 3x3 stencil."""
    h = w = 6
    rows = np.repeat(np.arange(h, dtype=np.float64), w)
    cols = np.tile(np.arange(w, dtype=np.float64), h)
    pts = np.stack([rows, cols], axis=1)
    nbr = knn_query(build_kdtree(pts), pts, 9)
    i = 2 * w + 3  # interior pixel (2, 3)
    want = {(2 + dy) * w + (3 + dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)}
    assert set(nbr.indices[i].tolist()) == want
    assert nbr.indices[i, 0] == i


def test_reference_traversal_above_brute_limit(kernel_backend):
    """n > 4096 exercises the fallback's tree traversal (not its brute path)."""
    rng = np.random.default_rng(17)
    pts = rng.uniform(0, 1, (5000, 3))
    tree = build_kdtree(pts)
    got = knn_query(tree, tree.points, 6)
    np.testing.assert_array_equal(got.indices, knn_brute_force(pts, 6).indices)


def test_fallback_backend_selected_when_extension_missing():
    """Blocking the compiled module at import time must engage the numpy
    fallback with a warning, in a fresh interpreter."""
    import subprocess
    import sys

    code = (
        "import sys, warnings\n"
        "sys.modules['flexconv._native'] = None\n"
        "with warnings.catch_warnings(record=True) as caught:\n"
        "    warnings.simplefilter('always')\n"
        "    from flexconv import backend\n"
        "assert backend.backend_name() == 'reference'\n"
        "assert any('fallback' in str(w.message) for w in caught)\n"
        "print('ok')\n"
    )
    proc = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == "ok", proc.stderr


def test_deterministic_across_threads_and_calls():
    rng = np.random.default_rng(11)
    pts = rng.uniform(0, 1, (3000, 3))
    tree = build_kdtree(pts)
    a = knn_query(tree, tree.points, 8, num_threads=1).indices
    b = knn_query(tree, tree.points, 8, num_threads=4).indices
    c = knn_query(tree, tree.points, 8, num_threads=1).indices
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, c)


def test_query_cost_subquadratic():
    """Sanity bound, not a proof: 4x the points must cost < 10x the time."""
    rng = Rng(5)
    small = rng.gen.uniform(0, 1, (16384, 3))
    large = rng.gen.uniform(0, 1, (65536, 3))
    tree_s, tree_l = build_kdtree(small), build_kdtree(large)

    def timed(tree):
        best = np.inf
        for _ in range(3):
            t0 = time.perf_counter()
            knn_query(tree, tree.points, 8)
            best = min(best, time.perf_counter() - t0)
        return best

    t_small, t_large = timed(tree_s), timed(tree_l)
    assert t_large < 10 * t_small, (t_small, t_large)


class TestFlexknnFiles:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        pts = rng.standard_normal((40, 2))
        nbr = knn_query(build_kdtree(pts), pts, 5)
        path = tmp_path / "a.knn"
        write_neighbors(path, nbr)
        assert path.read_text().splitlines()[0] == "flexknn v1 40 5"
        back = read_neighbors(path)
        np.testing.assert_array_equal(back.indices, nbr.indices)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "bad.knn"
        path.write_text("flexknn v2 1 1\n0\n")
        with pytest.raises(ConfigInvalidError):
            read_neighbors(path)

    def test_out_of_range_entry(self, tmp_path):
        path = tmp_path / "bad.knn"
        path.write_text("flexknn v1 2 1\n0\n5\n")
        with pytest.raises(Exception):
            read_neighbors(path)
