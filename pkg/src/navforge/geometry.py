"""Pose geometry: distance metrics, angle normalization and trajectory synthesis.

Angles are radians everywhere in this module. Yaw (``phi_z``) is the rotation
about the world z-axis; it is the only rotation component that enters the
angular distance metric. Poses store angles unnormalized, exactly as captured;
normalization happens only inside :func:`dist_angular`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class Pose:
    """Six-component camera pose: translation in meters, rotation in radians."""

    x: float
    y: float
    z: float
    phi_x: float = 0.0
    phi_y: float = 0.0
    phi_z: float = 0.0

    def __post_init__(self) -> None:
        for name in ("x", "y", "z", "phi_x", "phi_y", "phi_z"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"Pose.{name} must be finite, got {getattr(self, name)!r}")

    @property
    def translation(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.z)


@dataclass(frozen=True)
class Waypoint:
    """Sparse trajectory vertex; yaw is optional and only used for single-point paths."""

    x: float
    y: float
    z: float = 0.0
    yaw: Optional[float] = None

    def __post_init__(self) -> None:
        for name in ("x", "y", "z"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"Waypoint.{name} must be finite")
        if self.yaw is not None and not math.isfinite(self.yaw):
            raise ValueError("Waypoint.yaw must be finite when given")


@dataclass(frozen=True)
class PerturbationParams:
    """Uniform pose-noise parameters: offsets drawn from [-sigma, +sigma]."""

    sigma_linear: float = 0.0
    sigma_angular: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.sigma_linear) and self.sigma_linear >= 0.0):
            raise ValueError("sigma_linear must be finite and >= 0")
        if not (math.isfinite(self.sigma_angular) and self.sigma_angular >= 0.0):
            raise ValueError("sigma_angular must be finite and >= 0")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")


def normalize_angle(phi: float) -> float:
    """Map an angle to [0, 2*pi).

    Adds 2*pi to negative angles, then reduces mod 2*pi so the function is
    idempotent for inputs of any magnitude.
    """
    if not math.isfinite(phi):
        raise ValueError(f"angle must be finite, got {phi!r}")
    if phi < 0.0:
        phi = phi + TWO_PI
    return phi % TWO_PI


def dist_linear(p: Pose, q: Pose) -> float:
    """Euclidean distance between the translation components of two poses."""
    return math.sqrt((p.x - q.x) ** 2 + (p.y - q.y) ** 2 + (p.z - q.z) ** 2)


def dist_angular(p: Pose, q: Pose) -> float:
    """Shortest angular distance between the yaw components, in [0, pi].

    Rotations about x and y are ignored: places are compared on the 2D plane.
    """
    delta = normalize_angle(p.phi_z) - normalize_angle(q.phi_z)
    return abs((delta + math.pi) % TWO_PI - math.pi)


def linear_distances(a_xyz: np.ndarray, b_xyz: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean distances between two (n,3) and (m,3) arrays -> (n,m)."""
    a = np.asarray(a_xyz, dtype=float).reshape(-1, 3)
    b = np.asarray(b_xyz, dtype=float).reshape(-1, 3)
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def angular_distances(a_yaw: np.ndarray, b_yaw: np.ndarray) -> np.ndarray:
    """Pairwise yaw distances between (n,) and (m,) arrays -> (n,m) in [0, pi]."""
    a = np.asarray(a_yaw, dtype=float).reshape(-1) % TWO_PI
    b = np.asarray(b_yaw, dtype=float).reshape(-1) % TWO_PI
    delta = a[:, None] - b[None, :]
    return np.abs((delta + math.pi) % TWO_PI - math.pi)


def poses_to_xyz(poses: Sequence[Pose]) -> np.ndarray:
    """Stack pose translations into an (n,3) float array."""
    return np.array([[p.x, p.y, p.z] for p in poses], dtype=float).reshape(-1, 3)


def poses_to_yaw(poses: Sequence[Pose]) -> np.ndarray:
    """Stack pose yaws into an (n,) float array."""
    return np.array([p.phi_z for p in poses], dtype=float)


def rotation_matrix(pose: Pose) -> np.ndarray:
    """3x3 rotation matrix for a pose, intrinsic yaw(z)-pitch(y)-roll(x)."""
    cz, sz = math.cos(pose.phi_z), math.sin(pose.phi_z)
    cy, sy = math.cos(pose.phi_y), math.sin(pose.phi_y)
    cx, sx = math.cos(pose.phi_x), math.sin(pose.phi_x)
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    return rz @ ry @ rx


def densify_path(waypoints: Sequence[Waypoint], spacing: float) -> list[Pose]:
    """Interpolate sparse waypoints into poses at most ``spacing`` meters apart.

    Piecewise-linear interpolation along consecutive waypoints, endpoints
    included. Each pose's yaw is the heading of the segment it lies on
    (joints keep the incoming segment's heading); pitch and roll are zero.
    Zero-length segments (repeated markers) are skipped.
    """
    if not waypoints:
        raise ValueError("densify_path requires at least one waypoint")
    if not (math.isfinite(spacing) and spacing > 0.0):
        raise ValueError(f"spacing must be > 0, got {spacing!r}")

    poses: list[Pose] = []
    for a, b in zip(waypoints, waypoints[1:]):
        dx, dy, dz = b.x - a.x, b.y - a.y, b.z - a.z
        length = math.sqrt(dx * dx + dy * dy + dz * dz)
        if length == 0.0:
            continue
        yaw = math.atan2(dy, dx)
        steps = math.ceil(length / spacing)
        first = 1 if poses else 0  # the joint already belongs to the previous segment
        for i in range(first, steps + 1):
            t = i / steps
            poses.append(Pose(a.x + t * dx, a.y + t * dy, a.z + t * dz, 0.0, 0.0, yaw))

    if not poses:  # single waypoint, or all markers coincide
        w = waypoints[0]
        return [Pose(w.x, w.y, w.z, 0.0, 0.0, w.yaw if w.yaw is not None else 0.0)]
    return poses


def perturb_trajectory(poses: Sequence[Pose], params: PerturbationParams) -> list[Pose]:
    """Offset each pose by independent uniform draws in [-sigma, +sigma].

    x, y, z use ``sigma_linear``; yaw uses ``sigma_angular``; pitch and roll
    are left untouched. Deterministic for a fixed seed.
    """
    rng = np.random.default_rng(params.seed)
    offsets = rng.uniform(-1.0, 1.0, size=(len(poses), 4))
    out = []
    for pose, (dx, dy, dz, dyaw) in zip(poses, offsets):
        out.append(
            Pose(
                pose.x + params.sigma_linear * dx,
                pose.y + params.sigma_linear * dy,
                pose.z + params.sigma_linear * dz,
                pose.phi_x,
                pose.phi_y,
                pose.phi_z + params.sigma_angular * dyaw,
            )
        )
    return out
