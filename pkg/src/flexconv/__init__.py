"""flexconv: generalized convolution, pooling, and subsampling for irregular
point clouds, with exact analytic gradients and a desk-scale training harness.

Hot kernels run in the compiled `_native` extension when available and fall
back to pure-numpy `_reference` kernels otherwise; `backend.backend_name()`
reports the selection.
"""

from . import backend
from .core import DenseImage, PointCloud, Rng, image_to_cloud, validate_cloud
from .errors import (
    ConfigInvalidError,
    EmptyInputError,
    EngineError,
    IndexOutOfRangeError,
    IoFailureError,
    NonFiniteError,
    ShapeMismatchError,
)
from .flexops import (
    FlexConvParams,
    flex_conv_backward,
    flex_conv_forward,
    flex_max_pool,
    flex_max_pool_backward,
    flex_upsample,
    param_count,
    pointwise_conv,
)
from .neighborhood import KdTree, NeighborIndex, build_kdtree, knn_brute_force, knn_query
from .sampling import (
    ResolutionHierarchy,
    build_hierarchy,
    idiss_sample,
    inverse_density,
    random_sample,
)

__version__ = "0.1.0"
