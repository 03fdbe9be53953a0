"""Retrieval metrics, triplet loss and Horn-aligned absolute trajectory error.

Embeddings are compared with the cosine distance 1 - cos(a, b) in [0, 2].
Trajectory accuracy is the RMSE of translational residuals after the optimal
rigid alignment of the estimated trajectory onto the ground truth, solved in
closed form via SVD of the centered cross-covariance with reflection
correction (no scale is estimated).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .capture import Condition
from .geometry import Pose


class DegenerateGeometryError(ValueError):
    """Trajectory geometry too poor to determine a rigid alignment."""


@dataclass(frozen=True, eq=False)
class Embedding:
    """One image embedding: id, capture condition and feature vector."""

    id: str
    condition: Condition
    vector: np.ndarray

    def __post_init__(self) -> None:
        vec = np.asarray(self.vector, dtype=float).ravel()
        if vec.size == 0 or not np.all(np.isfinite(vec)):
            raise ValueError(f"embedding '{self.id}' has an empty or non-finite vector")
        if np.linalg.norm(vec) == 0.0:
            raise ValueError(f"embedding '{self.id}' has zero norm")
        object.__setattr__(self, "vector", vec)


@dataclass(frozen=True)
class TripletLossParams:
    """Margin for the max-margin triplet loss."""

    epsilon: float = 0.5

    def __post_init__(self) -> None:
        if not (math.isfinite(self.epsilon) and self.epsilon >= 0.0):
            raise ValueError("epsilon must be finite and >= 0")


@dataclass
class Trajectory:
    """Ordered (timestamp, pose) list; timestamps must be non-decreasing."""

    entries: list[tuple[float, Pose]] = field(default_factory=list)

    def __post_init__(self) -> None:
        stamps = [t for t, _ in self.entries]
        if any(b < a for a, b in zip(stamps, stamps[1:])):
            raise ValueError("trajectory timestamps must be non-decreasing")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def poses(self) -> list[Pose]:
        return [pose for _, pose in self.entries]

    def translations(self) -> np.ndarray:
        return np.array([[p.x, p.y, p.z] for _, p in self.entries], dtype=float).reshape(-1, 3)

    @classmethod
    def from_poses(cls, poses: Sequence[Pose], timestamps: Optional[Sequence[float]] = None) -> "Trajectory":
        if timestamps is None:
            timestamps = [float(i) for i in range(len(poses))]
        if len(timestamps) != len(poses):
            raise ValueError("timestamps and poses must have equal length")
        return cls(list(zip(timestamps, poses)))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid transform: orthonormal rotation (det +1) plus translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rot = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9):
            raise ValueError("rotation must be orthonormal within 1e-9")
        if abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ValueError("rotation must have determinant +1 within 1e-9")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        return pts @ self.rotation.T + self.translation

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))


@dataclass
class AteReport:
    """Alignment transform plus per-index translational errors and their RMSE."""

    rmse: float
    errors: np.ndarray
    n: int
    transform: RigidTransform

    def to_dict(self, include_errors: bool = False) -> dict:
        out = {
            "rmse": self.rmse,
            "n": self.n,
            "mean": float(np.mean(self.errors)),
            "median": float(np.median(self.errors)),
            "max": float(np.max(self.errors)),
            "rotation": self.transform.rotation.tolist(),
            "translation": self.transform.translation.tolist(),
        }
        if include_errors:
            out["errors"] = self.errors.tolist()
        return out

    def to_text(self) -> str:
        return "\n".join(
            [
                f"ATE RMSE (m):   {self.rmse:.6f}",
                f"mean error (m): {float(np.mean(self.errors)):.6f}",
                f"max error (m):  {float(np.max(self.errors)):.6f}",
                f"poses:          {self.n}",
            ]
        )


def cosine_distance(a, b) -> float:
    """1 - cos(a, b), clamped to [0, 2] against floating-point spill."""
    va = np.asarray(a, dtype=float).ravel()
    vb = np.asarray(b, dtype=float).ravel()
    if va.shape != vb.shape:
        raise ValueError(f"vector dimensions differ: {va.shape[0]} vs {vb.shape[0]}")
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine distance is undefined for zero vectors")
    return float(min(2.0, max(0.0, 1.0 - float(va @ vb) / (na * nb))))


def triplet_loss(e_a, e_p, e_n, eps: float = 0.5) -> float:
    """max(d(a,p) - d(a,n) + eps, 0) with d = cosine distance."""
    return max(cosine_distance(e_a, e_p) - cosine_distance(e_a, e_n) + eps, 0.0)


def batch_triplet_loss(triplets: Sequence[tuple], eps: float = 0.5) -> float:
    """Arithmetic mean of per-triplet losses over a minibatch."""
    if not triplets:
        raise ValueError("batch_triplet_loss requires a non-empty batch")
    return sum(triplet_loss(a, p, n, eps) for a, p, n in triplets) / len(triplets)


def topk_recall(
    queries: Sequence[Embedding],
    database: Sequence[Embedding],
    ground_truth: Mapping[str, str],
    ks: Sequence[int],
) -> dict[int, float]:
    """Fraction of queries whose true match ranks in the top k by cosine distance.

    Ties break by database index order (stable sort), so results are
    deterministic for a fixed database ordering.
    """
    if not database:
        raise ValueError("database must be non-empty")
    if not queries:
        raise ValueError("queries must be non-empty")
    ks = [int(k) for k in ks]
    if any(k < 1 for k in ks):
        raise ValueError("every k must be >= 1")

    db_index: dict[str, int] = {}
    for i, emb in enumerate(database):
        if emb.id in db_index:
            raise ValueError(f"duplicate database id '{emb.id}'")
        db_index[emb.id] = i

    dims = {e.vector.size for e in queries} | {e.vector.size for e in database}
    if len(dims) != 1:
        raise ValueError(f"embedding dimensions are not uniform: {sorted(dims)}")

    targets = []
    for q in queries:
        if q.id not in ground_truth:
            raise ValueError(f"query '{q.id}' has no ground-truth entry")
        match = ground_truth[q.id]
        if match not in db_index:
            raise ValueError(f"ground-truth id '{match}' for query '{q.id}' is missing from the database")
        targets.append(db_index[match])

    qmat = np.stack([q.vector / np.linalg.norm(q.vector) for q in queries])
    dmat = np.stack([d.vector / np.linalg.norm(d.vector) for d in database])
    distances = 1.0 - qmat @ dmat.T

    ranks = np.empty(len(queries), dtype=int)
    for i, row in enumerate(distances):
        order = np.argsort(row, kind="stable")
        ranks[i] = int(np.nonzero(order == targets[i])[0][0])
    return {k: float(np.count_nonzero(ranks < k)) / len(queries) for k in ks}


def align_horn(estimated: Trajectory, ground_truth: Trajectory) -> RigidTransform:
    """Least-squares rigid transform mapping the estimated onto the ground truth.

    Closed form: SVD of the centered cross-covariance, with a determinant
    correction that rules out reflections. No scale is estimated.
    """
    p = estimated.translations()
    q = ground_truth.translations()
    if len(p) != len(q):
        raise ValueError(f"trajectories differ in length: {len(p)} vs {len(q)}")
    if len(p) < 3:
        raise DegenerateGeometryError("rigid alignment needs at least 3 poses")
    p_mean = p.mean(axis=0)
    q_mean = q.mean(axis=0)
    cross = (p - p_mean).T @ (q - q_mean)
    u, s, vt = np.linalg.svd(cross)
    if s[1] <= s[0] * 1e-10:
        raise DegenerateGeometryError("trajectory translations are collinear or coincident")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    translation = q_mean - rotation @ p_mean
    return RigidTransform(rotation, translation)


def ate_rmse(estimated: Trajectory, ground_truth: Trajectory) -> AteReport:
    """Horn-align, then RMSE of per-index translational residuals.

    Association is by index: inputs are assumed time-synchronized. The
    residual norm equals the translation norm of gt_i^-1 * S * est_i because
    rotations preserve vector norms (covered by a dedicated test).
    """
    transform = align_horn(estimated, ground_truth)
    aligned = transform.apply(estimated.translations())
    residuals = aligned - ground_truth.translations()
    errors = np.linalg.norm(residuals, axis=1)
    rmse = float(np.sqrt(np.mean(errors**2)))
    return AteReport(rmse=rmse, errors=errors, n=len(errors), transform=transform)


def load_embeddings(path: Union[str, Path]) -> list[Embedding]:
    """Read a JSONL embedding file: one {id, condition, vector} object per line."""
    embeddings: list[Embedding] = []
    dim: Optional[int] = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                emb = Embedding(
                    id=str(obj["id"]),
                    condition=Condition.from_dict(obj["condition"]),
                    vector=np.asarray(obj["vector"], dtype=float),
                )
            except (KeyError, TypeError, ValueError) as err:
                raise ValueError(f"{path}: line {lineno}: {err}") from err
            if dim is None:
                dim = emb.vector.size
            elif emb.vector.size != dim:
                raise ValueError(f"{path}: line {lineno}: dimension {emb.vector.size} != {dim}")
            embeddings.append(emb)
    return embeddings


def recall_report_text(recalls: Mapping[int, float]) -> str:
    return "\n".join(f"recall@{k:<4d} {recalls[k]:.4f}" for k in sorted(recalls))
