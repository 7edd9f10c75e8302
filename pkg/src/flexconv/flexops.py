"""The operator family: flex-convolution, flex-max-pooling, flex-upsampling,
and pointwise (1x1) convolution, each with exact analytic gradients.

The kernel weight is a learned linear function of the spatial offset,
w(c',c, l, l') = <theta[c',c], l - l'> + theta_b[c',c], evaluated over a fixed
k-NN neighborhood — a linear approximation of the grid lookup table that is
defined everywhere, differentiable in all arguments (including locations),
and translation invariant because only offsets enter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import IndexOutOfRangeError, NonFiniteError, ShapeMismatchError
from .neighborhood import NeighborIndex


@dataclass
class FlexConvParams:
    """theta: C_out x C_in x d offset weights; theta_b: C_out x C_in biases."""

    theta: np.ndarray
    theta_b: np.ndarray

    def __post_init__(self):
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        self.theta_b = np.ascontiguousarray(self.theta_b, dtype=np.float64)
        if self.theta.ndim != 3 or self.theta_b.ndim != 2:
            raise ShapeMismatchError("theta must be C_out x C_in x d, theta_b C_out x C_in")
        if self.theta.shape[:2] != self.theta_b.shape:
            raise ShapeMismatchError(
                f"theta {self.theta.shape} and theta_b {self.theta_b.shape} disagree"
            )
        if not (np.isfinite(self.theta).all() and np.isfinite(self.theta_b).all()):
            raise NonFiniteError("parameters contain NaN or Inf")

    @property
    def c_out(self) -> int:
        return self.theta.shape[0]

    @property
    def c_in(self) -> int:
        return self.theta.shape[1]

    @property
    def d(self) -> int:
        return self.theta.shape[2]


@dataclass
class GradBundle:
    """Gradients mirroring the forward arguments."""

    d_features: np.ndarray
    d_theta: np.ndarray
    d_theta_b: np.ndarray
    d_locations: np.ndarray | None


def param_count(c_in: int, c_out: int, d: int) -> int:
    """Trainable scalars in one flex-conv layer: one d-vector plus one bias per
    channel pair (a 3x3 grid kernel with the same channels needs 9 per pair)."""
    return c_out * c_in * (d + 1)


def _as_f64(a, name):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeMismatchError(f"{name} must be 2-d, got shape {a.shape}")
    return a


def _check_conv_args(features, locations, neighbors, params):
    features = _as_f64(features, "features")
    locations = _as_f64(locations, "locations")
    n = features.shape[0]
    if locations.shape[0] != n:
        raise ShapeMismatchError(f"{n} feature rows but {locations.shape[0]} locations")
    if params.c_in != features.shape[1]:
        raise ShapeMismatchError(
            f"params expect C={params.c_in}, features have C={features.shape[1]}"
        )
    if params.d != locations.shape[1]:
        raise ShapeMismatchError(f"params expect d={params.d}, locations have d={locations.shape[1]}")
    idx = neighbors.indices
    if idx.shape[0] != n:
        raise ShapeMismatchError(f"neighbor index has {idx.shape[0]} rows for {n} points")
    if idx.min() < 0 or idx.max() >= n:
        raise IndexOutOfRangeError("neighbor index out of [0, n)")
    return features, locations


def flex_conv_forward(features, locations, neighbors: NeighborIndex,
                      params: FlexConvParams, num_threads: int = 1) -> np.ndarray:
    """f'(i, c') = sum_c sum_{j in N(i)} (<theta[c',c], l_i - l_j> + theta_b[c',c]) f(j, c).

    Neighbor features are resolved through the index in place; no data
    duplication. O(n * k * C * C') work, parallel over points.
    """
    features, locations = _check_conv_args(features, locations, neighbors, params)
    out = np.empty((features.shape[0], params.c_out))
    backend.active().flex_conv_forward(
        features, locations, neighbors.indices, params.theta, params.theta_b,
        out, int(num_threads),
    )
    return out


def flex_conv_backward(upstream, features, locations, neighbors: NeighborIndex,
                       params: FlexConvParams, with_locations: bool = True) -> GradBundle:
    """Exact analytic gradients w.r.t. features, theta, theta_b, and both
    location roles (center and neighbor). Fixed reduction order."""
    features, locations = _check_conv_args(features, locations, neighbors, params)
    upstream = _as_f64(upstream, "upstream")
    if upstream.shape != (features.shape[0], params.c_out):
        raise ShapeMismatchError(
            f"upstream must be {(features.shape[0], params.c_out)}, got {upstream.shape}"
        )
    d_features = np.zeros_like(features)
    d_locations = np.zeros_like(locations)
    d_theta = np.zeros_like(params.theta)
    d_theta_b = np.zeros_like(params.theta_b)
    backend.active().flex_conv_backward(
        upstream, features, locations, neighbors.indices, params.theta, params.theta_b,
        d_features, d_locations, d_theta, d_theta_b, bool(with_locations),
    )
    return GradBundle(d_features, d_theta, d_theta_b,
                      d_locations if with_locations else None)


def flex_max_pool(features, neighbors: NeighborIndex, num_threads: int = 1):
    """Per-point, per-channel max over the neighborhood (no subsampling).

    Returns (pooled, argmax record); ties resolve to the lowest global index.
    """
    features = _as_f64(features, "features")
    idx = neighbors.indices
    if idx.shape[0] != features.shape[0]:
        raise ShapeMismatchError(
            f"neighbor index has {idx.shape[0]} rows for {features.shape[0]} points"
        )
    if idx.min() < 0 or idx.max() >= features.shape[0]:
        raise IndexOutOfRangeError("neighbor index out of [0, n)")
    out = np.empty_like(features)
    argmax = np.empty(features.shape, dtype=np.int64)
    backend.active().max_pool_forward(features, idx, out, argmax, int(num_threads))
    return out, argmax


def flex_max_pool_backward(upstream, record, n: int | None = None) -> np.ndarray:
    """Route each upstream entry to its recorded winner (scatter-add)."""
    upstream = _as_f64(upstream, "upstream")
    record = np.ascontiguousarray(record, dtype=np.int64)
    if record.shape != upstream.shape:
        raise ShapeMismatchError(f"record shape {record.shape} != upstream {upstream.shape}")
    rows = upstream.shape[0] if n is None else int(n)
    if record.size and (record.min() < 0 or record.max() >= rows):
        raise IndexOutOfRangeError("corrupt pool record: winner index out of range")
    d_features = np.zeros((rows, upstream.shape[1]))
    backend.active().max_pool_backward(upstream, record, d_features)
    return d_features


def downsample_gather(features, selection) -> np.ndarray:
    """Row-gather of the selected indices; pairs with flex_max_pool to form
    the pooling stage."""
    features = _as_f64(features, "features")
    selection = np.asarray(selection, dtype=np.int64)
    if selection.size and (selection.min() < 0 or selection.max() >= features.shape[0]):
        raise IndexOutOfRangeError("selection index out of [0, n)")
    return features[selection].copy()


def scatter_to_fine(features_coarse, selection, n: int) -> np.ndarray:
    """Copy coarse rows to their fine positions, zero everywhere else."""
    features_coarse = _as_f64(features_coarse, "features_coarse")
    selection = np.asarray(selection, dtype=np.int64)
    if selection.shape[0] != features_coarse.shape[0]:
        raise ShapeMismatchError(
            f"{features_coarse.shape[0]} coarse rows but {selection.shape[0]} selections"
        )
    if selection.size and (selection.min() < 0 or selection.max() >= n):
        raise IndexOutOfRangeError("selection index out of [0, n)")
    full = np.zeros((n, features_coarse.shape[1]))
    full[selection] = features_coarse
    return full


def flex_upsample(features_coarse, selection, fine_neighbors: NeighborIndex, n: int,
                  num_threads: int = 1, with_record: bool = False):
    """Scatter coarse features to the fine level (zero-fill, like zero padding)
    and flex-max-pool at fine resolution to spread them into neighborhoods.

    Zero-fill + max means negative coarse features can be masked by the fill;
    that is a property of the operator, not a bug.
    """
    full = scatter_to_fine(features_coarse, selection, n)
    pooled, record = flex_max_pool(full, fine_neighbors, num_threads)
    return (pooled, record) if with_record else pooled


def pointwise_conv(features, weights, bias) -> np.ndarray:
    """Per-point affine map (1x1 convolution): out = f @ W.T + b."""
    features = _as_f64(features, "features")
    weights = _as_f64(weights, "weights")
    bias = np.ascontiguousarray(bias, dtype=np.float64)
    if weights.shape[1] != features.shape[1]:
        raise ShapeMismatchError(
            f"weights expect C={weights.shape[1]}, features have C={features.shape[1]}"
        )
    if bias.shape != (weights.shape[0],):
        raise ShapeMismatchError(f"bias must have shape ({weights.shape[0]},), got {bias.shape}")
    return features @ weights.T + bias


def pointwise_conv_backward(upstream, features, weights):
    """Standard matrix-calculus gradients for the per-point affine map."""
    upstream = _as_f64(upstream, "upstream")
    d_weights = upstream.T @ features
    d_bias = upstream.sum(axis=0)
    d_features = upstream @ weights
    return d_features, d_weights, d_bias
