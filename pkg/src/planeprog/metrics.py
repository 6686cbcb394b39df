"""Evaluation metrics: relative-rotation pose error and Chamfer distance.

Pose error is the geodesic angle of R_pred @ R_gt^T (the standard
reading of a rotation-formula distance); it is symmetric, lives in
[0, 180] degrees, and vanishes iff the two rotations agree.

Centroid metrics are the two directed mean nearest-neighbor distances
between detected and ground-truth sets plus their sum (the Chamfer
distance), all normalized by the image diagonal so values are
dimensionless and scale-invariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .camera import CameraPose, rotation_matrix
from .dsl import CentroidSet


@dataclass(frozen=True)
class CentroidMetrics:
    det_to_gt: float
    gt_to_det: float
    chamfer: float


def pose_error(predicted: CameraPose, gt: CameraPose) -> float:
    """Angle (degrees) of the relative rotation between two poses."""
    rel = rotation_matrix(predicted) @ rotation_matrix(gt).T
    cos_theta = (np.trace(rel) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, cos_theta))))


def _directed_mean(a: np.ndarray, b: np.ndarray) -> float:
    # mean over points of a of the distance to the nearest point of b
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.min(axis=1)).mean())


def centroid_metrics(
    detected: CentroidSet, gt: CentroidSet, width: int, height: int
) -> CentroidMetrics:
    """Directed distances and Chamfer, normalized by sqrt(w^2 + h^2)."""
    if len(detected) == 0 or len(gt) == 0:
        raise ValueError("centroid sets must be non-empty")
    diag = math.hypot(width, height)
    det = detected.xy()
    ref = gt.xy()
    det_to_gt = _directed_mean(det, ref) / diag
    gt_to_det = _directed_mean(ref, det) / diag
    return CentroidMetrics(det_to_gt, gt_to_det, det_to_gt + gt_to_det)
