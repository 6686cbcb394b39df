"""Dense multi-channel 2D grids with sub-pixel bilinear access.

Conventions used by the whole package:

* the origin sits at the top-left texel center, x grows rightward and
  y grows downward (image convention);
* a map of width W and height H is defined on [0, W-1] x [0, H-1] in
  continuous coordinates;
* storage is float32, planar: shape (channels, height, width), row-major.
  All interpolation arithmetic is carried out in float64.

Maps are immutable after construction; every operation here is a pure
function, so a map can be shared freely across threads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from PIL import Image


class TensorIOError(ValueError):
    """Base class for tensor-file parse failures."""


class BadMagicError(TensorIOError):
    """File does not start with the expected magic bytes."""


class TruncatedPayloadError(TensorIOError):
    """Header promises more (or less) data than the file contains."""


class DimensionOverflowError(TensorIOError):
    """Header dimensions are zero, absurd, or would overflow memory."""


_MAGIC = b"PPIT"
_VERSION = 1
_HEADER = struct.Struct("<4sIIII")  # magic, version, width, height, channels
_MAX_ELEMENTS = 1 << 28  # 1 GiB of float32; refuse anything larger


class SamplePoint(NamedTuple):
    """Continuous pixel coordinate (origin top-left, y downward)."""

    x: float
    y: float


@dataclass(frozen=True)
class FeatureMap:
    """Immutable C-channel 2D grid of finite float32 values.

    ``data`` has shape (channels, height, width). The constructor copies
    its input, casts to float32, rejects non-finite values and freezes
    the buffer.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, order="C", copy=True)
        if arr.ndim != 3:
            raise ValueError(f"expected (channels, height, width), got shape {arr.shape}")
        c, h, w = arr.shape
        if c < 1 or h < 2 or w < 2:
            raise ValueError(f"map must be at least 1 channel x 2x2 pixels, got {c}x{h}x{w}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite values are not admitted in a FeatureMap")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @classmethod
    def from_hwc(cls, arr) -> "FeatureMap":
        """Build from a (height, width, channels) or (height, width) array."""
        a = np.asarray(arr)
        if a.ndim == 2:
            a = a[:, :, None]
        return cls(np.moveaxis(a, 2, 0))

    def to_hwc(self) -> np.ndarray:
        """Return a writable (height, width, channels) float64 copy."""
        return np.moveaxis(self.data, 0, 2).astype(np.float64)


def _xy_arrays(xy):
    a = np.asarray(xy, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    return a[:, 0], a[:, 1]


def bilinear_sample_many(fmap: FeatureMap, xy) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear-sample a batch of points.

    Parameters
    ----------
    xy : (N, 2) array of continuous coordinates.

    Returns
    -------
    values : (N, channels) float64
    valid : (N,) bool, False where the point had to be clamped to the
        border rectangle [0, W-1] x [0, H-1].
    """
    x, y = _xy_arrays(xy)
    h, w = fmap.height, fmap.width
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    valid = (x == xc) & (y == yc)

    x0 = np.minimum(np.floor(xc), w - 2).astype(np.intp)
    y0 = np.minimum(np.floor(yc), h - 2).astype(np.intp)
    fx = xc - x0
    fy = yc - y0

    d = fmap.data
    v00 = d[:, y0, x0].astype(np.float64)
    v01 = d[:, y0, x0 + 1].astype(np.float64)
    v10 = d[:, y0 + 1, x0].astype(np.float64)
    v11 = d[:, y0 + 1, x0 + 1].astype(np.float64)

    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    vals = top + fy * (bot - top)
    return vals.T, valid


def bilinear_sample_grad_many(fmap: FeatureMap, xy):
    """Batch bilinear sampling with analytic partial derivatives.

    Returns (values, d/dx, d/dy, inside) where the first three are
    (N, channels) float64 and ``inside`` marks points within the valid
    rectangle. Entries outside it carry clamped values; callers must
    mask them out using ``inside``.
    """
    x, y = _xy_arrays(xy)
    h, w = fmap.height, fmap.width
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    inside = (x == xc) & (y == yc)

    x0 = np.minimum(np.floor(xc), w - 2).astype(np.intp)
    y0 = np.minimum(np.floor(yc), h - 2).astype(np.intp)
    fx = xc - x0
    fy = yc - y0

    d = fmap.data
    v00 = d[:, y0, x0].astype(np.float64)
    v01 = d[:, y0, x0 + 1].astype(np.float64)
    v10 = d[:, y0 + 1, x0].astype(np.float64)
    v11 = d[:, y0 + 1, x0 + 1].astype(np.float64)

    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    vals = top + fy * (bot - top)
    gx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
    gy = bot - top
    return vals.T, gx.T, gy.T, inside


def bilinear_sample(fmap: FeatureMap, p) -> tuple[np.ndarray, bool]:
    """Sample one point; see :func:`bilinear_sample_many`.

    Coordinates outside the map are clamped to its border and flagged
    invalid so callers can skip them.
    """
    vals, valid = bilinear_sample_many(fmap, [tuple(p)])
    return vals[0], bool(valid[0])


def bilinear_sample_grad(fmap: FeatureMap, p):
    """Sample one interior point and its exact bilinear-surface gradient.

    Raises ValueError when ``p`` falls outside [0, W-1] x [0, H-1];
    callers are expected to pre-filter with the validity flag. At an
    exact border or integer coordinate the derivative of the lower-left
    cell applies (bilinear surfaces are only piecewise smooth).
    """
    vals, gx, gy, inside = bilinear_sample_grad_many(fmap, [tuple(p)])
    if not inside[0]:
        raise ValueError(f"point {tuple(p)} is outside the valid rectangle")
    return vals[0], gx[0], gy[0]


def save_tensor(fmap: FeatureMap, path) -> None:
    """Write a map in the PPIT format (bit-exact round trip).

    Layout: magic ``PPIT``, u32-LE version (=1), u32-LE width, height,
    channels, then width*height*channels float32-LE values in planar
    channel order, rows major.
    """
    header = _HEADER.pack(_MAGIC, _VERSION, fmap.width, fmap.height, fmap.channels)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(fmap.data, dtype="<f4").tobytes())


def load_tensor(path) -> FeatureMap:
    """Read a PPIT file written by :func:`save_tensor`.

    Raises BadMagicError, TruncatedPayloadError or DimensionOverflowError
    for the corresponding malformed inputs.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        if blob[: len(_MAGIC)] != _MAGIC[: len(blob)] or not blob:
            raise BadMagicError("not a PPIT file (bad magic)")
        raise TruncatedPayloadError("file shorter than the PPIT header")
    magic, version, w, h, c = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise BadMagicError(f"not a PPIT file (magic {magic!r})")
    if version != _VERSION:
        raise TensorIOError(f"unsupported PPIT version {version}")
    if min(w, h) < 2 or c < 1 or w * h * c > _MAX_ELEMENTS:
        raise DimensionOverflowError(f"bad dimensions {w}x{h}x{c}")
    expected = w * h * c * 4
    payload = blob[_HEADER.size:]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"payload holds {len(payload)} bytes, header promises {expected}"
        )
    if len(payload) > expected:
        raise TruncatedPayloadError(f"{len(payload) - expected} trailing bytes after payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(c, h, w)
    if not np.all(np.isfinite(arr)):
        raise TensorIOError("payload contains non-finite values")
    return FeatureMap(arr)


def load_image(path) -> FeatureMap:
    """Decode a PNG or binary PPM (P6) image to a 3-channel map in [0, 1]."""
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return FeatureMap.from_hwc(rgb)


def save_image(fmap: FeatureMap, path) -> None:
    """Write the first 3 channels (or a grayscale single channel) as PNG."""
    hwc = fmap.to_hwc()
    if fmap.channels >= 3:
        hwc = hwc[:, :, :3]
    else:
        hwc = np.repeat(hwc[:, :, :1], 3, axis=2)
    arr = np.clip(np.rint(hwc * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")
