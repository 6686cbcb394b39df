"""Forward graphics pipeline: sprites on a plane, then a camera warp.

Scenes are composited fronto-parallel (one alpha-blended sprite centered
at every program centroid, on a constant background) and the *whole
canvas* is warped by the camera homography — objects are painted on the
plane. Ground-truth object centers are the same centroids pushed through
the same homography, so the scene carries exact supervision. Optional
additive Gaussian noise (seeded) models the sensor and is applied last,
clipped back to [0, 1].
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .camera import CameraIntrinsics, CameraPose, pose_to_homography, warp_feature_map, warp_points
from .dsl import Centroid, CentroidSet, PlaneProgram, generate_centroids
from .tensor import FeatureMap, bilinear_sample_many

SPRITE_KINDS = ("disk", "ring", "checker", "cross")


@dataclass(frozen=True)
class RenderResult:
    image: FeatureMap  # 3 channels, [0, 1]
    gt: CentroidSet    # image-space object centers


def make_sprite(kind: str, size: int, colors=None) -> FeatureMap:
    """Procedural RGBA sprite (4th channel is alpha), ``size`` x ``size``.

    disk    — filled circle, smooth 1.5 px edge; rotationally symmetric.
    ring    — annulus with a transparent core.
    checker — 2x2 quadrants alternating exactly two colors.
    cross   — plus shape with one arm longer, so no 90-degree symmetry.
    """
    size = int(size)
    if size < 3:
        raise ValueError("sprite size must be at least 3 px")
    if kind not in SPRITE_KINDS:
        raise ValueError(f"unknown sprite kind {kind!r}")
    c1, c2 = colors if colors else ((0.85, 0.25, 0.2), (0.95, 0.8, 0.15))
    c1 = np.asarray(c1, dtype=np.float64)
    c2 = np.asarray(c2, dtype=np.float64)

    half = (size - 1) / 2.0
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    rr = np.hypot(xs - half, ys - half)
    rgb = np.zeros((size, size, 3))
    alpha = np.zeros((size, size))

    if kind == "disk":
        edge = 1.5
        radius = half - 0.5
        alpha = np.clip((radius - rr) / edge + 0.5, 0.0, 1.0)
        rgb[:] = c1
    elif kind == "ring":
        outer = half - 0.5
        inner = 0.45 * outer
        band_out = np.clip((outer - rr) / 1.2 + 0.5, 0.0, 1.0)
        band_in = np.clip((rr - inner) / 1.2 + 0.5, 0.0, 1.0)
        alpha = band_out * band_in
        rgb[:] = c1
    elif kind == "checker":
        qx = xs > half
        qy = ys > half
        first = qx == qy
        rgb[first] = c1
        rgb[~first] = c2
        alpha[:] = 1.0
    else:  # cross: vertical arm spans the full sprite, horizontal arm is shorter
        arm = max(1.0, size / 5.0)
        vertical = np.abs(xs - half) <= arm / 2.0
        horizontal = (np.abs(ys - half) <= arm / 2.0) & (rr <= 0.72 * half)
        body = vertical | horizontal
        rgb[body] = c1
        alpha[body] = 1.0

    out = np.concatenate([np.moveaxis(rgb, 2, 0), alpha[None]], axis=0)
    return FeatureMap(out)


def _min_cell_extent(prog: PlaneProgram) -> float:
    p = prog.params
    if prog.structure == "lattice":
        n1 = math.hypot(p.dx1, p.dy1)
        n2 = math.hypot(p.dx2, p.dy2)
        cross = abs(p.dx1 * p.dy2 - p.dy1 * p.dx2)
        return min(n1, n2, cross / max(n1, n2))
    chord_r = p.r if prog.structure == "circular" else p.r0 + p.dr
    chord = 2.0 * chord_r * math.sin(math.radians(p.dtheta) / 2.0)
    if prog.structure == "hybrid":
        return min(chord, p.dr)
    return chord


def _composite_sprites(canvas: np.ndarray, sprite: FeatureMap, centers: np.ndarray) -> None:
    """Alpha-blend ``sprite`` at each (sub-pixel) center, in order."""
    size = sprite.width
    half = (size - 1) / 2.0
    height, width = canvas.shape[1:]
    for cx, cy in centers:
        x_lo = max(0, int(math.floor(cx - half)))
        x_hi = min(width - 1, int(math.ceil(cx + half)))
        y_lo = max(0, int(math.floor(cy - half)))
        y_hi = min(height - 1, int(math.ceil(cy + half)))
        if x_lo > x_hi or y_lo > y_hi:
            continue
        ys, xs = np.mgrid[y_lo : y_hi + 1, x_lo : x_hi + 1]
        # Inverse mapping into sprite-local coordinates, bilinear fetch.
        sxy = np.stack([xs.ravel() - (cx - half), ys.ravel() - (cy - half)], axis=1)
        inside = (
            (sxy[:, 0] > -1.0)
            & (sxy[:, 0] < size)
            & (sxy[:, 1] > -1.0)
            & (sxy[:, 1] < size)
        )
        if not inside.any():
            continue
        clipped = np.clip(sxy, 0.0, size - 1.0)
        vals, _ = bilinear_sample_many(sprite, clipped)
        # Off-sprite fetches fade alpha to zero at the sprite border.
        border = np.maximum(np.abs(sxy - clipped)[:, 0], np.abs(sxy - clipped)[:, 1])
        fade = np.clip(1.0 - border, 0.0, 1.0)
        alpha = vals[:, 3] * fade * inside
        rgb = vals[:, :3]
        region = canvas[:, ys.ravel(), xs.ravel()]
        canvas[:, ys.ravel(), xs.ravel()] = region * (1.0 - alpha) + rgb.T * alpha


def render(
    prog: PlaneProgram,
    pose: CameraPose,
    sprite: FeatureMap,
    width: int,
    height: int,
    background=(0.12, 0.14, 0.18),
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> RenderResult:
    """Render a scene and its exact image-space ground truth.

    Raises ValueError when the program places no centroid on the canvas;
    warns (but proceeds) when the sprite overflows one repetition cell.
    """
    if sprite.channels != 4:
        raise ValueError("sprite must have 4 channels (RGB + alpha)")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    cs = generate_centroids(prog, width, height)
    if len(cs) == 0:
        raise ValueError("program places no centroid on the canvas")
    if sprite.width > _min_cell_extent(prog):
        warnings.warn("sprite is larger than one repetition cell; instances will overlap")

    bg = np.asarray(background, dtype=np.float64).reshape(3, 1, 1)
    canvas = np.broadcast_to(bg, (3, height, width)).copy()
    _composite_sprites(canvas, sprite, cs.xy())

    intr = CameraIntrinsics(width=width, height=height)
    h = pose_to_homography(pose, intr)
    if pose.rx == 0.0 and pose.ry == 0.0:
        image_data = canvas
        gt_pts = [Centroid(c.i, c.j, c.x, c.y) for c in cs.points]
    else:
        warped = warp_feature_map(FeatureMap(canvas), h, fill=bg.ravel())
        image_data = warped.fmap.data.astype(np.float64)
        mapped, depth = warp_points(h, cs.xy())
        gt_pts = []
        for c, (x, y), d in zip(cs.points, mapped, depth):
            if d > 1e-9 and 0.0 <= x < width and 0.0 <= y < height:
                gt_pts.append(Centroid(c.i, c.j, float(x), float(y)))

    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        image_data = np.clip(image_data + rng.normal(0.0, noise_sigma, image_data.shape), 0.0, 1.0)

    return RenderResult(FeatureMap(image_data), CentroidSet(tuple(gt_pts)))
