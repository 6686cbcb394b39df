"""Two-DOF pinhole camera and the homographies it induces on a plane.

The camera rotates about the image X axis (rx, "tilt down is positive
content-up shift") and the image Y axis (ry); in-plane rotation is fixed
at zero because pattern axes absorb it. Intrinsics are a 35mm-equivalent
focal length over a 36mm sensor width, so ``f_px = f / 36 * width``, and
the principal point sits exactly at the image center.

Fixed conventions (they cancel between the renderer and the solver, but
must be used consistently):

* rotation order ``R = Rx(rx) @ Ry(ry)``, right-handed matrices with the
  y-down image frame;
* ``pose_to_homography`` maps fronto-parallel plane coordinates to image
  coordinates, i.e. ``image_point = H @ plane_point``;
* the fronto-parallel warp keeps the input canvas size, centered on the
  principal point, and masks content pushed off-canvas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import FeatureMap, bilinear_sample_many


class PointAtInfinityError(ValueError):
    """Homogeneous depth vanished; the point maps to infinity."""


class NonInvertibleError(ValueError):
    """Matrix is singular (|det| below threshold) and cannot warp."""


@dataclass(frozen=True)
class CameraPose:
    """Camera rotation in degrees; rz is identically zero."""

    rx: float = 0.0
    ry: float = 0.0

    def __post_init__(self):
        if not (-90.0 < self.rx < 90.0 and -90.0 < self.ry < 90.0):
            raise ValueError(f"tilts must lie in (-90, 90) degrees, got ({self.rx}, {self.ry})")

    @property
    def rz(self) -> float:
        return 0.0

    def negated(self) -> "CameraPose":
        return CameraPose(-self.rx, -self.ry)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Fixed-form intrinsics: f is 35mm-equivalent, aspect multiplies fy."""

    width: int
    height: int
    f: float = 35.0
    aspect: float = 1.0

    @property
    def f_px(self) -> float:
        return self.f / 36.0 * self.width

    @property
    def principal_point(self) -> tuple[float, float]:
        return self.width / 2.0, self.height / 2.0

    def matrix(self) -> np.ndarray:
        cx, cy = self.principal_point
        return np.array(
            [
                [self.f_px, 0.0, cx],
                [0.0, self.f_px * self.aspect, cy],
                [0.0, 0.0, 1.0],
            ]
        )

    def inverse_matrix(self) -> np.ndarray:
        cx, cy = self.principal_point
        fx = self.f_px
        fy = self.f_px * self.aspect
        return np.array(
            [
                [1.0 / fx, 0.0, -cx / fx],
                [0.0, 1.0 / fy, -cy / fy],
                [0.0, 0.0, 1.0],
            ]
        )


def rot_x(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_matrix(pose: CameraPose) -> np.ndarray:
    """R = Rx(rx) @ Ry(ry); the one convention shared package-wide."""
    return rot_x(pose.rx) @ rot_y(pose.ry)


@dataclass(frozen=True)
class Homography:
    """3x3 projective map, normalized so m[2, 2] == 1 when nonzero."""

    m: np.ndarray = field()

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {m.shape}")
        if abs(m[2, 2]) > 1e-12:
            m = m / m[2, 2]
        det = np.linalg.det(m)
        if abs(det) <= 1e-12:
            raise NonInvertibleError(f"singular homography (det={det:g})")
        m.flags.writeable = False
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        m = np.eye(3)
        m[0, 2] = tx
        m[1, 2] = ty
        return cls(m)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))


def pose_to_homography(pose: CameraPose, intr: CameraIntrinsics) -> Homography:
    """H = K @ Rx(rx) @ Ry(ry) @ K^-1, plane coordinates -> image coordinates.

    ``Homography(np.linalg.inv(H.m))`` is the exact inverse; negating the
    pose gives the inverse only when one of the tilts is zero, because Rx
    and Ry do not commute.
    """
    k = intr.matrix()
    k_inv = intr.inverse_matrix()
    return Homography(k @ rotation_matrix(pose) @ k_inv)


def warp_points(h: Homography, xy) -> tuple[np.ndarray, np.ndarray]:
    """Apply ``h`` with perspective division to an (N, 2) batch.

    Returns (mapped (N, 2), depth (N,)); entries whose |depth| is tiny
    map to infinity and carry NaN coordinates.
    """
    pts = np.asarray(xy, dtype=np.float64)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    ones = np.ones((pts.shape[0], 1))
    hom = np.hstack([pts, ones]) @ h.m.T
    depth = hom[:, 2]
    safe = np.abs(depth) > 1e-12
    out = np.full_like(pts, np.nan)
    out[safe] = hom[safe, :2] / depth[safe, None]
    return out, depth


def warp_point(h: Homography, p) -> tuple[float, float]:
    """Project a single point; raises PointAtInfinityError at depth ~ 0."""
    out, depth = warp_points(h, [tuple(p)])
    if abs(depth[0]) <= 1e-12:
        raise PointAtInfinityError(f"point {tuple(p)} maps to infinity")
    return float(out[0, 0]), float(out[0, 1])


@dataclass(frozen=True)
class WarpResult:
    """Warped map plus the mask of output pixels whose source was on-canvas."""

    fmap: FeatureMap
    valid: np.ndarray  # (height, width) bool


def warp_feature_map(
    fmap: FeatureMap,
    h: Homography,
    out_width: int | None = None,
    out_height: int | None = None,
    fill=None,
) -> WarpResult:
    """Inverse-mapping warp: output pixel (x, y) samples the input at
    ``h^-1 @ (x, y, 1)``.

    Off-canvas samples are flagged in ``valid`` and either keep their
    border-clamped value (fill=None) or are replaced by ``fill`` (a
    scalar or per-channel sequence).
    """
    ow = fmap.width if out_width is None else int(out_width)
    oh = fmap.height if out_height is None else int(out_height)
    h_inv = h.inverse()

    xs, ys = np.meshgrid(np.arange(ow, dtype=np.float64), np.arange(oh, dtype=np.float64))
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1)
    src, depth = warp_points(h_inv, grid)
    finite = np.abs(depth) > 1e-12
    src[~finite] = -1.0  # forced invalid

    vals, valid = bilinear_sample_many(fmap, src)
    valid &= finite
    if fill is not None:
        fill_vec = np.broadcast_to(np.atleast_1d(np.asarray(fill, dtype=np.float64)), (fmap.channels,))
        vals[~valid] = fill_vec
    out = vals.T.reshape(fmap.channels, oh, ow)
    return WarpResult(FeatureMap(out), valid.reshape(oh, ow))


def project_with_jacobians(pose: CameraPose, intr: CameraIntrinsics, xy):
    """Project plane points and differentiate the projection.

    For each input point p the image point is s = pi(K Rx Ry K^-1 p~).
    Returns a 4-tuple:

    * s: (N, 2) projected points,
    * j_pose: (N, 2, 2) ds/d(rx, ry) in per-degree units,
    * j_spatial: (N, 2, 2) ds/dp,
    * depth: (N,) homogeneous depths (non-positive or tiny => unusable).
    """
    pts = np.asarray(xy, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
    n = pts.shape[0]

    k = intr.matrix()
    k_inv = intr.inverse_matrix()
    rx_m = rot_x(pose.rx)
    ry_m = rot_y(pose.ry)

    deg = math.pi / 180.0
    cx_, sx_ = math.cos(math.radians(pose.rx)), math.sin(math.radians(pose.rx))
    cy_, sy_ = math.cos(math.radians(pose.ry)), math.sin(math.radians(pose.ry))
    drx = deg * np.array([[0.0, 0.0, 0.0], [0.0, -sx_, -cx_], [0.0, cx_, -sx_]])
    dry = deg * np.array([[-sy_, 0.0, cy_], [0.0, 0.0, 0.0], [-cy_, 0.0, -sy_]])

    m = k @ rx_m @ ry_m @ k_inv
    m_rx = k @ drx @ ry_m @ k_inv
    m_ry = k @ rx_m @ dry @ k_inv

    hom = np.hstack([pts, np.ones((n, 1))])
    w_vec = hom @ m.T  # (N, 3)
    depth = w_vec[:, 2]
    safe = np.abs(depth) > 1e-12
    d = np.where(safe, depth, 1.0)

    s = w_vec[:, :2] / d[:, None]

    def _project_grad(dw):
        # d(pi(w)) = (dw_xy - s * dw_z) / w_z
        return (dw[:, :2] - s * dw[:, 2:3]) / d[:, None]

    g_rx = _project_grad(hom @ m_rx.T)
    g_ry = _project_grad(hom @ m_ry.T)
    j_pose = np.stack([g_rx, g_ry], axis=2)  # (N, 2, 2): [:, out, which_angle]

    # Spatial: w is linear in p, dw/dx = m[:, 0], dw/dy = m[:, 1].
    dw_dx = np.broadcast_to(m[:, 0], (n, 3))
    dw_dy = np.broadcast_to(m[:, 1], (n, 3))
    j_spatial = np.stack([_project_grad(dw_dx), _project_grad(dw_dy)], axis=2)

    s = np.where(safe[:, None], s, np.nan)
    return s, j_pose, j_spatial, depth


def homography_param_grad(pose: CameraPose, intr: CameraIntrinsics, p) -> np.ndarray:
    """2x2 Jacobian of the projected point w.r.t. (rx, ry) in degrees.

    Rows are (d x'/d., d y'/d.), columns are (rx, ry). Raises
    PointAtInfinityError when the point projects to infinity.
    """
    s, j_pose, _, depth = project_with_jacobians(pose, intr, [tuple(p)])
    if abs(depth[0]) <= 1e-12:
        raise PointAtInfinityError(f"point {tuple(p)} maps to infinity")
    return j_pose[0]
