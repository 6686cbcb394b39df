"""Program-guided image manipulation: rectification and inpainting.

Rectification warps the image by the inverse camera homography to the
fronto-parallel view; regions with no source pixel are reported in a
validity mask.

Inpainting exploits the induced repetition: for every masked pixel, the
corresponding locations one repetition step away (+-1 in each loop
index: +-v1/+-v2 for lattices, a +-dtheta rotation about the center for
rings, additionally +-dr radially for hybrids) are looked up in the
*original* image and averaged. Correspondences are computed in rectified
coordinates at floating-point precision, reads are bilinear, and values
are written only to masked pixels, so unmasked pixels stay bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .camera import (
    CameraIntrinsics,
    CameraPose,
    pose_to_homography,
    warp_feature_map,
    warp_points,
)
from .dsl import PlaneProgram
from .tensor import FeatureMap, bilinear_sample_many


class UncoveredRegionError(ValueError):
    """Masked pixels with no unmasked correspondent in any neighbor cell."""

    def __init__(self, pixels):
        self.pixels = list(pixels)
        preview = ", ".join(f"({x}, {y})" for x, y in self.pixels[:8])
        more = "" if len(self.pixels) <= 8 else f" and {len(self.pixels) - 8} more"
        super().__init__(f"{len(self.pixels)} masked pixels have no source: {preview}{more}")


@dataclass(frozen=True)
class RectifyResult:
    fmap: FeatureMap
    valid: np.ndarray  # (height, width) bool; False = off-canvas sentinel


def rectify(image: FeatureMap, pose: CameraPose, intr: CameraIntrinsics | None = None) -> RectifyResult:
    """Warp to the fronto-parallel view (inverse camera homography)."""
    intr = intr or CameraIntrinsics(width=image.width, height=image.height)
    h = pose_to_homography(pose, intr)
    warped = warp_feature_map(image, h.inverse(), fill=0.0)
    return RectifyResult(warped.fmap, warped.valid)


def _neighbor_offsets(prog: PlaneProgram, rect_pts: np.ndarray) -> list[np.ndarray]:
    """Corresponding rectified-space locations one loop step away, per point."""
    p = prog.params
    if prog.structure == "lattice":
        v1 = np.array([p.dx1, p.dy1])
        v2 = np.array([p.dx2, p.dy2])
        return [rect_pts + v1, rect_pts - v1, rect_pts + v2, rect_pts - v2]
    center = np.array([p.cx, p.cy])
    rel = rect_pts - center
    out = []
    for sign in (1.0, -1.0):
        a = math.radians(sign * p.dtheta)
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        out.append(center + rel @ rot.T)
    if prog.structure == "hybrid":
        rad = np.hypot(rel[:, 0], rel[:, 1])
        unit = np.where(rad[:, None] > 1e-9, rel / np.maximum(rad, 1e-9)[:, None], 0.0)
        out.append(center + rel + unit * p.dr)
        out.append(center + rel - unit * p.dr)
    return out


def inpaint(
    image: FeatureMap,
    mask: np.ndarray,
    prog: PlaneProgram,
    pose: CameraPose,
    intr: CameraIntrinsics | None = None,
) -> FeatureMap:
    """Fill masked pixels from their repetition correspondents.

    ``mask`` is an (H, W) boolean array, True = masked. An empty mask
    returns the input unchanged. Raises UncoveredRegionError when some
    masked pixel has no valid, unmasked source in any neighboring cell.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (image.height, image.width):
        raise ValueError(f"mask shape {mask.shape} does not match image {image.height}x{image.width}")
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return image

    intr = intr or CameraIntrinsics(width=image.width, height=image.height)
    h = pose_to_homography(pose, intr)
    h_inv = h.inverse()

    pix = np.stack([xs.astype(np.float64), ys.astype(np.float64)], axis=1)
    rect_pts, depth = warp_points(h_inv, pix)
    solvable = np.abs(depth) > 1e-9
    rect_pts = np.nan_to_num(rect_pts, nan=-1e9)

    mask_map = FeatureMap(np.broadcast_to(mask.astype(np.float64), (1, image.height, image.width)))

    acc = np.zeros((len(ys), image.channels))
    cnt = np.zeros(len(ys))
    for neighbor in _neighbor_offsets(prog, rect_pts):
        src, src_depth = warp_points(h, neighbor)
        src = np.nan_to_num(src, nan=-1e9)
        vals, inside = bilinear_sample_many(image, src)
        tainted, _ = bilinear_sample_many(mask_map, src)
        ok = inside & (np.asarray(src_depth) > 1e-9) & (tainted[:, 0] <= 1e-9) & solvable
        acc[ok] += vals[ok]
        cnt[ok] += 1.0

    uncovered = cnt == 0
    if uncovered.any():
        raise UncoveredRegionError(zip(xs[uncovered].tolist(), ys[uncovered].tolist()))

    out = np.array(image.data, dtype=np.float64)
    out[:, ys, xs] = (acc / cnt[:, None]).T
    return FeatureMap(out)
