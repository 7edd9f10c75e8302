"""Core containers: point clouds, dense images, deterministic RNG, file I/O.

All reference-path numerics are float64. Locations are stored separately from
features; layers that want coordinates as features attach them explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigInvalidError,
    EmptyInputError,
    IoFailureError,
    NonFiniteError,
    ShapeMismatchError,
)


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeMismatchError(f"{name} must be 2-d, got shape {a.shape}")
    return a


@dataclass
class PointCloud:
    """n points: locations in R^d plus an n x C feature matrix.

    Arrays are coerced to contiguous float64. Invariants (equal row counts,
    finiteness, n,d,C >= 1) are checked by `validate_cloud`, which every
    consuming operation calls at its boundary.
    """

    locations: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.locations = _as_matrix(self.locations, "locations")
        self.features = _as_matrix(self.features, "features")

    @property
    def n(self) -> int:
        return self.locations.shape[0]

    @property
    def d(self) -> int:
        return self.locations.shape[1]

    @property
    def C(self) -> int:
        return self.features.shape[1]


@dataclass
class DenseImage:
    """H x W x C pixel tensor with finite entries; H, W >= 3 so a 3x3 interior exists."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3:
            raise ShapeMismatchError(f"pixels must be H x W x C, got shape {self.pixels.shape}")
        if self.height < 3 or self.width < 3:
            raise ShapeMismatchError(f"image must be at least 3x3, got {self.height}x{self.width}")
        if not np.isfinite(self.pixels).all():
            raise NonFiniteError("image contains NaN or Inf")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


_MIX = 0x9E3779B97F4A7C15  # splitmix64 increment, decorrelates derived streams


@dataclass
class Rng:
    """Deterministic counter-based RNG (Philox) with derivable substreams.

    Equal seeds give bitwise-equal draw sequences across runs and thread
    counts. `spawn(tag)` derives an independent stream; parallel work clones
    the Rng rather than sharing it.
    """

    seed: int
    stream: int = 0
    gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        key = [int(self.seed) % 2**64, int(self.stream) % 2**64]
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def spawn(self, tag: int) -> "Rng":
        return Rng(self.seed, (self.stream * _MIX + int(tag) + 1) % 2**64)

    @property
    def counter(self):
        """Internal Philox counter, exposed for state inspection."""
        return tuple(self.gen.bit_generator.state["state"]["counter"])


def validate_cloud(cloud: PointCloud) -> None:
    """Raise unless all PointCloud invariants hold. Never mutates the input."""
    loc, feat = cloud.locations, cloud.features
    if loc.shape[0] != feat.shape[0]:
        raise ShapeMismatchError(
            f"locations have {loc.shape[0]} rows but features have {feat.shape[0]}"
        )
    if loc.shape[0] < 1:
        raise EmptyInputError("point cloud has no points")
    if loc.shape[1] < 1 or feat.shape[1] < 1:
        raise ShapeMismatchError("d and C must both be >= 1")
    if not np.isfinite(loc).all():
        raise NonFiniteError("locations contain NaN or Inf")
    if not np.isfinite(feat).all():
        raise NonFiniteError("features contain NaN or Inf")


def image_to_cloud(img: DenseImage) -> PointCloud:
    """Flatten an image to a cloud: n = H*W, d = 2, raster (row-major) order.

    Locations are integer (row, col) pixel coordinates as reals; features are
    the pixel channels. Point index i corresponds to pixel (i // W, i % W).
    """
    h, w = img.height, img.width
    rows = np.repeat(np.arange(h, dtype=np.float64), w)
    cols = np.tile(np.arange(w, dtype=np.float64), h)
    locations = np.stack([rows, cols], axis=1)
    features = img.pixels.reshape(h * w, img.channels)
    cloud = PointCloud(locations, features)
    validate_cloud(cloud)
    return cloud


# ---------------------------------------------------------------------------
# flexcloud file format (ASCII)
#
#   header:  "flexcloud v1 n d C"           (unlabeled)
#            "flexcloud-labeled v1 n d C"   (labeled)
#   then n lines of d+C space-separated decimal reals (locations, features),
#   labeled variant appends one integer label per line.
#
# Floats are written with shortest round-trip repr, so parse(write(x)) == x
# and equal inputs give byte-identical files.
# ---------------------------------------------------------------------------


def write_cloud(path, cloud: PointCloud, labels=None) -> None:
    validate_cloud(cloud)
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (cloud.n,):
            raise ShapeMismatchError(f"labels must have shape ({cloud.n},), got {labels.shape}")
        labels = labels.astype(np.int64)
    name = "flexcloud-labeled" if labels is not None else "flexcloud"
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write(f"{name} v1 {cloud.n} {cloud.d} {cloud.C}\n")
            for i in range(cloud.n):
                vals = [repr(float(v)) for v in cloud.locations[i]]
                vals += [repr(float(v)) for v in cloud.features[i]]
                if labels is not None:
                    vals.append(str(int(labels[i])))
                fh.write(" ".join(vals) + "\n")
    except OSError as exc:
        raise IoFailureError(f"cannot write cloud file {path}: {exc}") from exc


def read_cloud(path):
    """Parse a flexcloud file. Returns (PointCloud, labels-or-None)."""
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoFailureError(f"cannot read cloud file {path}: {exc}") from exc
    if not lines:
        raise ConfigInvalidError(f"{path}: empty file")
    head = lines[0].split()
    if len(head) != 5 or head[0] not in ("flexcloud", "flexcloud-labeled") or head[1] != "v1":
        raise ConfigInvalidError(f"{path}: malformed header {lines[0]!r}")
    labeled = head[0] == "flexcloud-labeled"
    try:
        n, d, c = (int(t) for t in head[2:5])
    except ValueError as exc:
        raise ConfigInvalidError(f"{path}: non-integer sizes in header") from exc
    if n < 1 or d < 1 or c < 1:
        raise EmptyInputError(f"{path}: header declares n={n} d={d} C={c}")
    if len(lines) - 1 != n:
        raise ConfigInvalidError(f"{path}: header declares {n} points, file has {len(lines) - 1}")
    want = d + c + (1 if labeled else 0)
    data = np.empty((n, d + c))
    labels = np.empty(n, dtype=np.int64) if labeled else None
    for i, line in enumerate(lines[1:]):
        parts = line.split()
        if len(parts) != want:
            raise ConfigInvalidError(f"{path}: line {i + 2} has {len(parts)} fields, expected {want}")
        try:
            data[i] = [float(t) for t in parts[: d + c]]
            if labeled:
                labels[i] = int(parts[d + c])
        except ValueError as exc:
            raise ConfigInvalidError(f"{path}: line {i + 2} has a malformed value") from exc
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{path}: non-finite value in data")
    cloud = PointCloud(data[:, :d], data[:, d:])
    return cloud, labels
