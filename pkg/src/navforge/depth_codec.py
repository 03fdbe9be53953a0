"""Inverse-logarithmic depth codec, 16-bit millimeter maps and point-cloud conversion.

Raw depth arrives as a code in [0, 1] where smaller values mean greater
distance (the renderer's inverted logarithmic encoding). The decode mapping
used here is

    d(v) = d_max^(1-v) * d_min^v

which is strictly decreasing, hits d_max at v=0 and d_min at v=1, and is
exactly invertible by v = ln(d_max/d) / ln(d_max/d_min).
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from typing import BinaryIO, Optional, Union

import numpy as np
from PIL import Image

RAW_MAGIC = b"GTAD"
_RAW_HEADER = struct.Struct("<4sIII")  # magic, width, height, reserved

INVALID_DEPTH_MM = 0  # sentinel in 16-bit maps; never produced from a valid depth
MAX_DEPTH_MM = 65535


@dataclass(frozen=True)
class DepthCodecParams:
    """Encoding range of the inverse-logarithmic depth codec, in meters."""

    d_max: float = 960.0
    d_min: float = 1.0

    def __post_init__(self) -> None:
        if not (0.0 < self.d_min < self.d_max) or not math.isfinite(self.d_max):
            raise ValueError(f"require 0 < d_min < d_max, got d_min={self.d_min}, d_max={self.d_max}")


class DepthMap:
    """Dense row-major grid of per-pixel values: raw codes in [0,1] or meters."""

    def __init__(self, values: np.ndarray):
        arr = np.asarray(values, dtype=float)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"depth map must be a non-empty 2-D grid, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0.0):
            raise ValueError("depth map values must be finite and >= 0")
        self.values = arr

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other) -> bool:
        return isinstance(other, DepthMap) and np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be > 0")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


class PointCloud:
    """Camera-frame points, (n,3) meters with Z > 0, plus optional RGB colors."""

    def __init__(self, points: np.ndarray, colors: Optional[np.ndarray] = None):
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        if pts.size and (not np.all(np.isfinite(pts)) or np.any(pts[:, 2] <= 0.0)):
            raise ValueError("point cloud requires finite coordinates with Z > 0")
        self.points = pts
        self.colors = None
        if colors is not None:
            col = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
            if len(col) != len(pts):
                raise ValueError("colors must match points one-to-one")
            self.colors = col

    def __len__(self) -> int:
        return len(self.points)


def decode_depth(v, params: DepthCodecParams = DepthCodecParams()):
    """Decode raw codes in [0,1] to meters. Accepts scalars or arrays."""
    arr = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError("raw depth codes must lie in [0, 1]")
    out = params.d_max ** (1.0 - arr) * params.d_min**arr
    return float(out) if np.isscalar(v) or arr.ndim == 0 else out


def encode_depth(d, params: DepthCodecParams = DepthCodecParams()):
    """Encode meters in [d_min, d_max] to raw codes in [0,1]. Inverse of decode_depth."""
    arr = np.asarray(d, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr < params.d_min) or np.any(arr > params.d_max):
        raise ValueError(f"depth must lie in [{params.d_min}, {params.d_max}] m")
    out = np.log(params.d_max / arr) / math.log(params.d_max / params.d_min)
    return float(out) if np.isscalar(d) or arr.ndim == 0 else out


def decode_depth_map(raw: DepthMap, params: DepthCodecParams = DepthCodecParams()) -> DepthMap:
    """Decode a full raw-code grid into a meters grid."""
    return DepthMap(decode_depth(raw.values, params))


def to_millimeter_map(depth: DepthMap) -> np.ndarray:
    """Quantize a meters map to the standard 16-bit millimeter encoding.

    Values round half-up to millimeters and clamp at 65535. 0 marks invalid
    pixels; any strictly positive depth maps to at least 1.
    """
    mm = np.floor(depth.values * 1000.0 + 0.5)
    mm = np.clip(mm, 0, MAX_DEPTH_MM)
    mm = np.where(depth.values > 0.0, np.maximum(mm, 1), 0)
    return mm.astype(np.uint16)


def millimeter_to_meters(mm: np.ndarray) -> DepthMap:
    """Back-convert a 16-bit millimeter grid to meters; 0 stays 0 (invalid)."""
    return DepthMap(np.asarray(mm, dtype=float) / 1000.0)


def depth_to_pointcloud(
    depth: DepthMap, intrinsics: CameraIntrinsics, rgb: Optional[np.ndarray] = None
) -> PointCloud:
    """Back-project a meters map through the pinhole model.

    Every pixel with d > 0 becomes one point (X, Y, Z) = ((u-cx)d/fx,
    (v-cy)d/fy, d), in row-major pixel order. ``rgb`` may supply an (h,w,3)
    image to color the points.
    """
    if (depth.height, depth.width) != (intrinsics.height, intrinsics.width):
        raise ValueError(
            f"depth map {depth.width}x{depth.height} does not match intrinsics "
            f"{intrinsics.width}x{intrinsics.height}"
        )
    d = depth.values
    u, v = np.meshgrid(np.arange(depth.width), np.arange(depth.height))
    valid = d > 0.0
    dv = d[valid]
    x = (u[valid] - intrinsics.cx) * dv / intrinsics.fx
    y = (v[valid] - intrinsics.cy) * dv / intrinsics.fy
    points = np.column_stack([x, y, dv])
    colors = None
    if rgb is not None:
        img = np.asarray(rgb)
        if img.shape[:2] != (depth.height, depth.width):
            raise ValueError("rgb image dimensions must match the depth map")
        colors = img[valid]
    return PointCloud(points, colors)


def pointcloud_to_depth(cloud: PointCloud, intrinsics: CameraIntrinsics) -> tuple[DepthMap, int]:
    """Forward-project points to a depth map with nearest-pixel rounding.

    Pixels hit by several points keep the smallest Z; pixels hit by none stay
    0 (sparse output). Returns the map and a tally of skipped points (Z <= 0
    never occurs for a valid cloud; points projecting outside the frame are
    counted here too).
    """
    grid = np.zeros((intrinsics.height, intrinsics.width), dtype=float)
    if len(cloud) == 0:
        return DepthMap(grid), 0
    pts = cloud.points
    z = pts[:, 2]
    keep = z > 0.0
    u = np.floor(intrinsics.fx * pts[keep, 0] / z[keep] + intrinsics.cx + 0.5).astype(int)
    v = np.floor(intrinsics.fy * pts[keep, 1] / z[keep] + intrinsics.cy + 0.5).astype(int)
    in_frame = (u >= 0) & (u < intrinsics.width) & (v >= 0) & (v < intrinsics.height)
    skipped = int(len(pts) - np.count_nonzero(keep)) + int(np.count_nonzero(~in_frame))
    u, v, zk = u[in_frame], v[in_frame], z[keep][in_frame]
    # min-Z z-buffer: process farthest first so the nearest point wins
    order = np.argsort(-zk, kind="stable")
    grid[v[order], u[order]] = zk[order]
    return DepthMap(grid), skipped


def write_depth_png(mm: np.ndarray, target: Union[str, BinaryIO]) -> None:
    """Serialize a 16-bit millimeter grid as a single-channel 16-bit PNG."""
    arr = np.asarray(mm)
    if arr.dtype != np.uint16:
        raise ValueError(f"expected a uint16 millimeter grid, got dtype {arr.dtype}")
    Image.fromarray(arr).save(target, format="PNG")


def read_depth_png(source: Union[str, bytes, BinaryIO]) -> np.ndarray:
    """Read a 16-bit single-channel PNG back into a uint16 millimeter grid."""
    if isinstance(source, bytes):
        source = io.BytesIO(source)
    with Image.open(source) as img:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError("expected a single-channel depth PNG")
    return arr.astype(np.uint16)


def write_raw_codes(codes: np.ndarray, target: Union[str, BinaryIO]) -> None:
    """Serialize raw codes as float32 with the 16-byte GTAD header."""
    arr = np.asarray(codes, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError("raw code grid must be 2-D")
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError("raw depth codes must lie in [0, 1]")
    header = _RAW_HEADER.pack(RAW_MAGIC, arr.shape[1], arr.shape[0], 0)
    payload = header + arr.tobytes(order="C")
    if isinstance(target, str):
        with open(target, "wb") as fh:
            fh.write(payload)
    else:
        target.write(payload)


def read_raw_codes(source: Union[str, bytes, BinaryIO]) -> np.ndarray:
    """Parse a GTAD raw-code container back into a float32 grid."""
    if isinstance(source, str):
        with open(source, "rb") as fh:
            data = fh.read()
    elif isinstance(source, bytes):
        data = source
    else:
        data = source.read()
    if len(data) < _RAW_HEADER.size:
        raise ValueError("raw depth container truncated before header end")
    magic, width, height, _ = _RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise ValueError(f"bad raw depth magic {magic!r}, expected {RAW_MAGIC!r}")
    expected = _RAW_HEADER.size + 4 * width * height
    if len(data) != expected:
        raise ValueError(f"raw depth container is {len(data)} bytes, expected {expected}")
    grid = np.frombuffer(data, dtype="<f4", offset=_RAW_HEADER.size)
    return grid.reshape(height, width).copy()
