"""Inverse-density importance subsampling (IDISS) and resolution hierarchies.

The inverse density of a point is the sum of distances to its k nearest
neighbors, so sparse regions carry more mass and survive subsampling; a
random-sampling baseline is kept for comparison. Stacking subsampled levels
(each with fresh neighborhoods) yields the hierarchy the encoder/decoder
network walks.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import PointCloud, Rng, read_cloud, validate_cloud, write_cloud
from .errors import ConfigInvalidError, IoFailureError, ShapeMismatchError
from .neighborhood import (
    DEFAULT_LEAF_SIZE,
    NeighborIndex,
    build_kdtree,
    knn_query,
    read_neighbors,
    write_neighbors,
)

_DENSITY_CHUNK = 131072


def inverse_density(locations, neighbors: NeighborIndex) -> np.ndarray:
    """phi[i] = sum of Euclidean distances from point i to its neighbor row.

    The self entry contributes zero. O(n*k), chunked so temporaries stay small
    at million-point scale.
    """
    locations = np.ascontiguousarray(locations, dtype=np.float64)
    n = locations.shape[0]
    if neighbors.n != n:
        raise ShapeMismatchError(f"neighbor index has {neighbors.n} rows for {n} points")
    phi = np.empty(n)
    for a in range(0, n, _DENSITY_CHUNK):
        b = min(a + _DENSITY_CHUNK, n)
        diff = locations[a:b, None, :] - locations[neighbors.indices[a:b]]
        phi[a:b] = np.sqrt((diff ** 2).sum(axis=-1)).sum(axis=1)
    return phi


def idiss_sample(phi, m: int, rng: Rng) -> np.ndarray:
    """Draw m distinct indices with first-draw probability phi[i] / sum(phi).

    Uses exponential race keys (key_i = Exp(1) / phi_i, keep the m smallest),
    a Gumbel-top-m equivalent: one O(n) pass, deterministic given the rng.
    Zero-density points lose every race and are picked (lowest index first)
    only after positive-mass points run out; an all-zero phi falls back to
    uniform sampling with a warning.
    """
    phi = np.asarray(phi, dtype=np.float64)
    n = phi.shape[0]
    if not 1 <= m <= n:
        raise ConfigInvalidError(f"m must satisfy 1 <= m <= {n}, got {m}")
    if (phi < 0).any():
        raise ConfigInvalidError("phi must be nonnegative")
    if not phi.any():
        warnings.warn("all-zero density: falling back to uniform sampling", RuntimeWarning)
        return random_sample(n, m, rng)
    with np.errstate(divide="ignore"):
        keys = rng.gen.exponential(size=n) / phi
    order = np.lexsort((np.arange(n), keys))
    return np.sort(order[:m]).astype(np.int64)


def random_sample(n: int, m: int, rng: Rng) -> np.ndarray:
    """Uniform without-replacement baseline."""
    if not 1 <= m <= n:
        raise ConfigInvalidError(f"m must satisfy 1 <= m <= {n}, got {m}")
    return np.sort(rng.gen.choice(n, size=m, replace=False)).astype(np.int64)


@dataclass
class HierarchyLevel:
    """One resolution: its cloud, its own neighborhoods, and (except at level
    0) the selected indices into the parent level."""

    cloud: PointCloud
    neighbors: NeighborIndex
    selection: np.ndarray | None


@dataclass
class ResolutionHierarchy:
    levels: list[HierarchyLevel]
    k: int
    factor: int
    mode: str

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    def sizes(self) -> list[int]:
        return [lv.cloud.n for lv in self.levels]


def _level_neighbors(locations, k: int, num_threads: int, leaf_size: int) -> NeighborIndex:
    tree = build_kdtree(locations, leaf_size)
    return knn_query(tree, tree.points, min(k, locations.shape[0]), num_threads)


def build_hierarchy(cloud: PointCloud, k: int, factor: int, depth: int, rng: Rng,
                    mode: str = "idiss", num_threads: int = 1,
                    leaf_size: int = DEFAULT_LEAF_SIZE) -> ResolutionHierarchy:
    """Chain of subsampled levels; level t keeps ceil(n / factor^t) points.

    Each level gets a fresh NeighborIndex over its own points (neighbors in
    one resolution need not be neighbors in another). IDISS mode reuses the
    level's own neighbor distances for the density estimate.
    """
    validate_cloud(cloud)
    if factor < 2:
        raise ConfigInvalidError(f"factor must be >= 2, got {factor}")
    if depth < 1:
        raise ConfigInvalidError(f"depth must be >= 1, got {depth}")
    if mode not in ("idiss", "random"):
        raise ConfigInvalidError(f"mode must be 'idiss' or 'random', got {mode!r}")
    if cloud.n < factor ** depth:
        raise ConfigInvalidError(
            f"n={cloud.n} too small for factor={factor}, depth={depth}"
        )
    levels = [HierarchyLevel(cloud, _level_neighbors(cloud.locations, k, num_threads, leaf_size), None)]
    for t in range(1, depth + 1):
        parent = levels[-1]
        m = -(-cloud.n // factor ** t)  # ceil division
        level_rng = rng.spawn(t)
        if mode == "idiss":
            phi = inverse_density(parent.cloud.locations, parent.neighbors)
            selection = idiss_sample(phi, m, level_rng)
        else:
            selection = random_sample(parent.cloud.n, m, level_rng)
        sub = PointCloud(parent.cloud.locations[selection], parent.cloud.features[selection])
        levels.append(
            HierarchyLevel(sub, _level_neighbors(sub.locations, k, num_threads, leaf_size), selection)
        )
    return ResolutionHierarchy(levels, k=k, factor=factor, mode=mode)


# --- hierarchy dump: per-level flexcloud + flexknn files + JSON manifest -----


def save_hierarchy(hierarchy: ResolutionHierarchy, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "flexhier",
        "version": 1,
        "k": hierarchy.k,
        "factor": hierarchy.factor,
        "mode": hierarchy.mode,
        "levels": [],
    }
    for t, lv in enumerate(hierarchy.levels):
        cloud_file = f"level{t}.cloud"
        knn_file = f"level{t}.knn"
        write_cloud(out / cloud_file, lv.cloud)
        write_neighbors(out / knn_file, lv.neighbors)
        manifest["levels"].append({
            "n": lv.cloud.n,
            "cloud": cloud_file,
            "knn": knn_file,
            "selection": None if lv.selection is None else [int(v) for v in lv.selection],
        })
    try:
        with open(out / "manifest.json", "w", newline="\n") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=1)
            fh.write("\n")
    except OSError as exc:
        raise IoFailureError(f"cannot write manifest: {exc}") from exc


def load_hierarchy(in_dir) -> ResolutionHierarchy:
    path = Path(in_dir) / "manifest.json"
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise IoFailureError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigInvalidError(f"{path}: invalid JSON: {exc}") from exc
    if manifest.get("format") != "flexhier" or manifest.get("version") != 1:
        raise ConfigInvalidError(f"{path}: not a flexhier v1 manifest")
    levels = []
    for t, entry in enumerate(manifest["levels"]):
        cloud, _ = read_cloud(Path(in_dir) / entry["cloud"])
        neighbors = read_neighbors(Path(in_dir) / entry["knn"])
        sel = entry["selection"]
        selection = None if sel is None else np.asarray(sel, dtype=np.int64)
        if (t == 0) != (selection is None):
            raise ConfigInvalidError(f"{path}: level {t} selection map inconsistent")
        levels.append(HierarchyLevel(cloud, neighbors, selection))
    return ResolutionHierarchy(
        levels, k=int(manifest["k"]), factor=int(manifest["factor"]), mode=str(manifest["mode"])
    )
