"""Pluggable feature extraction for the matching loss.

The solver compares feature vectors between repeated objects, so any
map whose values are stable across instances works. Two built-in
extractors are provided and external features can be imported from the
PPIT tensor format (e.g. CNN activations exported by another tool).

A FeatureSpace records the single scale factor between feature and
image coordinates: image_xy = feature_xy * scale. Inference runs in
feature coordinates and reports program parameters in image pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .tensor import FeatureMap, load_tensor


@dataclass(frozen=True)
class FeatureSpace:
    fmap: FeatureMap
    scale: float  # image pixels per feature pixel

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")


def extract_pixel_features(
    image: FeatureMap, blur_radius: float = 1.0, downsample: int = 1
) -> FeatureSpace:
    """Gaussian-blurred, stride-subsampled copy of the input channels.

    blur_radius is the Gaussian sigma in input pixels (0 disables).
    With blur_radius=0 and downsample=1 this is the identity. Feature
    pixel (fx, fy) samples input pixel (fx * downsample, fy * downsample).
    """
    downsample = int(downsample)
    if downsample < 1:
        raise ValueError("downsample must be >= 1")
    if downsample > min(image.width, image.height) // 2:
        raise ValueError(
            f"downsample {downsample} too large for a {image.width}x{image.height} image"
        )
    data = image.data.astype(np.float64)
    if blur_radius > 0:
        data = ndimage.gaussian_filter(data, sigma=(0.0, blur_radius, blur_radius), mode="nearest")
    if downsample > 1:
        data = data[:, ::downsample, ::downsample]
    return FeatureSpace(FeatureMap(data), float(downsample))


def extract_gradient_features(image: FeatureMap, bins: int = 8, cell: int = 8) -> FeatureSpace:
    """Per-cell orientation histograms (HOG-like), L2-normalized per cell.

    Finite-difference gradients make the output exactly invariant to a
    constant brightness offset. Cells with no gradient energy stay zero
    vectors instead of being normalized.
    """
    bins = int(bins)
    cell = int(cell)
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if cell < 1 or cell > min(image.width, image.height):
        raise ValueError(f"cell {cell} larger than the {image.width}x{image.height} image")

    lum = image.data.astype(np.float64).mean(axis=0)
    gy, gx = np.gradient(lum)
    mag = np.hypot(gx, gy)
    # Unsigned orientation in [0, pi): vertical stripe edges (gradient
    # along x) land in bin 0.
    ang = np.mod(np.arctan2(gy, gx), np.pi)
    bin_idx = np.minimum((ang / np.pi * bins).astype(int), bins - 1)

    ch = image.height // cell
    cw = image.width // cell
    if ch < 2 or cw < 2:
        raise ValueError("cell size leaves fewer than 2x2 cells")
    hist = np.zeros((bins, ch, cw), dtype=np.float64)
    ys, xs = np.mgrid[0 : ch * cell, 0 : cw * cell]
    np.add.at(hist, (bin_idx[: ch * cell, : cw * cell], ys // cell, xs // cell), mag[: ch * cell, : cw * cell])

    norms = np.sqrt((hist**2).sum(axis=0, keepdims=True))
    hist = np.where(norms > 1e-12, hist / np.maximum(norms, 1e-12), 0.0)
    return FeatureSpace(FeatureMap(hist), float(cell))


def import_features(path, scale: float = 1.0) -> FeatureSpace:
    """Load a PPIT tensor as the feature map; ``scale`` maps its
    coordinates back to image pixels."""
    return FeatureSpace(load_tensor(path), float(scale))
