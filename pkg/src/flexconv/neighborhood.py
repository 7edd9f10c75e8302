"""kd-tree construction and exact k-nearest-neighbor queries.

Neighborhoods are computed once per resolution and kept fixed; every flex
layer consumes the resulting NeighborIndex. Row i always starts with i itself
(the grid 3x3 stencil includes its center, and k=9 on an image grid must
reproduce it exactly); the remaining k-1 entries are the nearest *other*
points ordered by (distance, index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import (
    ConfigInvalidError,
    EmptyInputError,
    IoFailureError,
    NonFiniteError,
    ShapeMismatchError,
    IndexOutOfRangeError,
)

DEFAULT_LEAF_SIZE = 16


@dataclass
class KdTree:
    """Array-based kd-tree over a fixed point set.

    Internal node arrays: `axis` (split dimension, -1 for leaves), `split`
    (plane coordinate), `left`/`right` children, and `lo`/`hi` ranges into
    `perm` for leaf point indices. Immutable after build.
    """

    points: np.ndarray
    axis: np.ndarray
    split: np.ndarray
    left: np.ndarray
    right: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    perm: np.ndarray
    leaf_size: int
    depth: int

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass
class NeighborIndex:
    """n x k table of neighbor indices; row i is [i, nearest others...]."""

    indices: np.ndarray

    def __post_init__(self):
        self.indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 2:
            raise ShapeMismatchError(f"indices must be 2-d, got shape {self.indices.shape}")

    @property
    def n(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def _check_locations(locations) -> np.ndarray:
    locations = np.ascontiguousarray(locations, dtype=np.float64)
    if locations.ndim != 2:
        raise ShapeMismatchError(f"locations must be n x d, got shape {locations.shape}")
    if locations.shape[0] == 0:
        raise EmptyInputError("no points to index")
    if not np.isfinite(locations).all():
        raise NonFiniteError("locations contain NaN or Inf")
    return locations


def build_kdtree(locations, leaf_size: int = DEFAULT_LEAF_SIZE) -> KdTree:
    """Build a kd-tree with median splits along the max-spread dimension."""
    points = _check_locations(locations).copy()
    if leaf_size < 1:
        raise ConfigInvalidError(f"leaf_size must be >= 1, got {leaf_size}")
    n = points.shape[0]
    axis, split, left, right, lo, hi = [], [], [], [], [], []
    perm = np.empty(n, dtype=np.int64)
    cursor = 0
    max_depth = 0

    def emit() -> int:
        axis.append(-1)
        split.append(0.0)
        left.append(-1)
        right.append(-1)
        lo.append(0)
        hi.append(0)
        return len(axis) - 1

    def build(idx: np.ndarray, depth: int) -> int:
        nonlocal cursor, max_depth
        node = emit()
        max_depth = max(max_depth, depth)
        if idx.shape[0] <= leaf_size:
            lo[node] = cursor
            perm[cursor:cursor + idx.shape[0]] = idx
            cursor += idx.shape[0]
            hi[node] = cursor
            return node
        coords = points[idx]
        ax = int(np.argmax(coords.max(axis=0) - coords.min(axis=0)))
        mid = idx.shape[0] // 2
        order = np.argpartition(coords[:, ax], mid)
        idx = idx[order]
        axis[node] = ax
        split[node] = points[idx[mid], ax]
        left[node] = build(idx[:mid], depth + 1)
        right[node] = build(idx[mid:], depth + 1)
        return node

    import sys

    old_limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old_limit, 10000))
    try:
        build(np.arange(n, dtype=np.int64), 0)
    finally:
        sys.setrecursionlimit(old_limit)

    return KdTree(
        points=points,
        axis=np.asarray(axis, dtype=np.int32),
        split=np.asarray(split, dtype=np.float64),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        lo=np.asarray(lo, dtype=np.int32),
        hi=np.asarray(hi, dtype=np.int32),
        perm=perm,
        leaf_size=leaf_size,
        depth=max_depth,
    )


def knn_query(tree: KdTree, locations, k: int, num_threads: int = 1) -> NeighborIndex:
    """Exact kNN rows for the tree's own points (Euclidean metric).

    `locations` must be the point set the tree was built on; passing anything
    else is a contract violation and raises.
    """
    locations = _check_locations(locations)
    n = tree.n
    if locations.shape != tree.points.shape or not np.array_equal(locations, tree.points):
        raise ShapeMismatchError("locations differ from the points the tree was built on")
    if not 1 <= k <= n:
        raise ConfigInvalidError(f"k must satisfy 1 <= k <= {n}, got {k}")
    if tree.depth > 150:
        raise ConfigInvalidError("kd-tree too deep for the fixed traversal stack")
    out = np.empty((n, k), dtype=np.int64)
    backend.active().knn_self_query(
        tree.points, tree.axis, tree.split, tree.left, tree.right,
        tree.lo, tree.hi, tree.perm, int(k), out, int(num_threads),
    )
    return NeighborIndex(out)


def knn_brute_force(locations, k: int) -> NeighborIndex:
    """O(n^2) scan with the same contract as knn_query; the test oracle."""
    locations = _check_locations(locations)
    n = locations.shape[0]
    if not 1 <= k <= n:
        raise ConfigInvalidError(f"k must satisfy 1 <= k <= {n}, got {k}")
    out = np.empty((n, k), dtype=np.int64)
    chunk = max(1, min(n, 2 ** 22 // max(n, 1) + 1))
    for a in range(0, n, chunk):
        b = min(a + chunk, n)
        d2 = ((locations[a:b, None, :] - locations[None, :, :]) ** 2).sum(axis=-1)
        order = np.argsort(d2, axis=1, kind="stable")
        rows = np.arange(a, b)
        others = order[order != rows[:, None]].reshape(b - a, n - 1)
        out[a:b, 0] = rows
        out[a:b, 1:] = others[:, : k - 1]
    return NeighborIndex(out)


def validate_neighbors(locations, neighbors: NeighborIndex) -> None:
    """Check all NeighborIndex invariants against its point set."""
    locations = _check_locations(locations)
    idx = neighbors.indices
    n = locations.shape[0]
    if idx.shape[0] != n:
        raise ShapeMismatchError(f"index has {idx.shape[0]} rows for {n} points")
    if idx.min() < 0 or idx.max() >= n:
        raise IndexOutOfRangeError("neighbor index out of [0, n)")
    if not (idx[:, 0] == np.arange(n)).all():
        raise IndexOutOfRangeError("row i must start with i itself")
    for i in range(n):
        row = idx[i]
        if len(np.unique(row)) != len(row):
            raise IndexOutOfRangeError(f"row {i} has duplicate entries")
        d2 = ((locations[i] - locations[row[1:]]) ** 2).sum(axis=-1)
        keys = list(zip(d2.tolist(), row[1:].tolist()))
        if keys != sorted(keys):
            raise IndexOutOfRangeError(f"row {i} not sorted by (distance, index)")


# --- flexknn serialization: "flexknn v1 n k" + n rows of k integers ---------


def write_neighbors(path, neighbors: NeighborIndex) -> None:
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write(f"flexknn v1 {neighbors.n} {neighbors.k}\n")
            for row in neighbors.indices:
                fh.write(" ".join(str(int(v)) for v in row) + "\n")
    except OSError as exc:
        raise IoFailureError(f"cannot write neighbor file {path}: {exc}") from exc


def read_neighbors(path) -> NeighborIndex:
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoFailureError(f"cannot read neighbor file {path}: {exc}") from exc
    if not lines:
        raise ConfigInvalidError(f"{path}: empty file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "flexknn" or head[1] != "v1":
        raise ConfigInvalidError(f"{path}: malformed header {lines[0]!r}")
    try:
        n, k = int(head[2]), int(head[3])
    except ValueError as exc:
        raise ConfigInvalidError(f"{path}: non-integer sizes in header") from exc
    if n < 1 or k < 1 or len(lines) - 1 != n:
        raise ConfigInvalidError(f"{path}: header sizes do not match file body")
    idx = np.empty((n, k), dtype=np.int64)
    for i, line in enumerate(lines[1:]):
        parts = line.split()
        if len(parts) != k:
            raise ConfigInvalidError(f"{path}: line {i + 2} has {len(parts)} fields, expected {k}")
        try:
            idx[i] = [int(t) for t in parts]
        except ValueError as exc:
            raise ConfigInvalidError(f"{path}: line {i + 2} has a malformed value") from exc
    if idx.min() < 0 or idx.max() >= n:
        raise IndexOutOfRangeError(f"{path}: neighbor index out of range")
    return NeighborIndex(idx)
