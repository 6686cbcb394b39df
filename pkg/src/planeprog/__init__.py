"""planeprog: single-image repetition-structure and camera-tilt recovery.

Given one photo of objects repeated on a plane (a grid of tiles, a ring
of bolts, concentric rings of holes), the package induces a compact
layout program — repetition structure and continuous parameters — plus
the two-axis camera rotation, by minimizing a shift-and-compare feature
loss. The induced program drives perspective rectification, object
detection and structure-guided inpainting.
"""

from .camera import (
    CameraIntrinsics,
    CameraPose,
    Homography,
    NonInvertibleError,
    PointAtInfinityError,
    WarpResult,
    homography_param_grad,
    pose_to_homography,
    rotation_matrix,
    warp_feature_map,
    warp_point,
    warp_points,
)
from .dsl import (
    Centroid,
    CentroidSet,
    CircularParams,
    DegenerateProgramError,
    HybridParams,
    LatticeParams,
    PlaneProgram,
    ProgramJSONError,
    d_min_for,
    deserialize,
    generate_centroids,
    neighbor_pairs,
    serialize,
)
from .features import (
    FeatureSpace,
    extract_gradient_features,
    extract_pixel_features,
    import_features,
)
from .fitness import (
    LossReport,
    NotScoreableError,
    eval_loss,
    eval_loss_grad,
    eval_loss_posed,
)
from .inference import (
    InducedProgram,
    NoRegularityError,
    SearchConfig,
    anchor_phase,
    coarse_grid,
    infer,
    refine,
)
from .manipulate import RectifyResult, UncoveredRegionError, inpaint, rectify
from .metrics import CentroidMetrics, centroid_metrics, pose_error
from .render import RenderResult, make_sprite, render
from .tensor import (
    BadMagicError,
    DimensionOverflowError,
    FeatureMap,
    SamplePoint,
    TensorIOError,
    TruncatedPayloadError,
    bilinear_sample,
    bilinear_sample_grad,
    bilinear_sample_grad_many,
    bilinear_sample_many,
    load_image,
    load_tensor,
    save_image,
    save_tensor,
)

__version__ = "0.1.0"
