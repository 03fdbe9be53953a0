"""On-disk dataset model: sequence manifests, trajectory CSV and frame statistics.

File formats follow the capture module: ``frames.jsonl`` manifests (one JSON
object per frame with paths, pose and condition) and ``poses.csv`` trajectory
files with the columns frame_index,timestamp,x,y,z,phi_x,phi_y,phi_z.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence as Seq, Union

from .capture import (
    ALL_CONDITIONS,
    TRAJECTORY_HEADER,
    Condition,
    format_pose_row,
    pose_from_dict,
)
from .evaluation import Trajectory
from .geometry import Pose

CONDITION_COLUMNS = tuple(c.label for c in ALL_CONDITIONS)


@dataclass(frozen=True)
class FrameRecord:
    """One captured frame: image file references plus pose and condition."""

    frame_index: int
    timestamp: float
    pose: Pose
    condition: Condition
    rgb_path: Optional[str] = None
    depth_path: Optional[str] = None


@dataclass
class Sequence:
    """One retracing of a path under a single condition, in frame order."""

    path_name: str
    condition: Optional[Condition]
    frames: list[FrameRecord] = field(default_factory=list)
    root: Optional[str] = None  # directory frame paths are relative to
    dataset: str = "synthetic"

    def __post_init__(self) -> None:
        stamps = [f.timestamp for f in self.frames]
        if any(b < a for a, b in zip(stamps, stamps[1:])):
            raise ValueError(f"sequence '{self.path_name}': timestamps must be non-decreasing")
        for frame in self.frames:
            if frame.condition != self.condition:
                raise ValueError(
                    f"sequence '{self.path_name}': mixed conditions "
                    f"({frame.condition and frame.condition.label} vs {self.condition and self.condition.label})"
                )

    def __len__(self) -> int:
        return len(self.frames)

    @classmethod
    def from_frames(
        cls,
        path_name: str,
        frames: Seq[FrameRecord],
        root: Optional[str] = None,
        dataset: str = "synthetic",
    ) -> "Sequence":
        frames = list(frames)
        condition = frames[0].condition if frames else None
        return cls(path_name, condition, frames, root=root, dataset=dataset)

    def missing_files(self, base_dir: Optional[Union[str, Path]] = None) -> list[str]:
        """Lazy existence check of the referenced image files."""
        base = Path(base_dir) if base_dir is not None else Path(self.root or ".")
        missing = []
        for frame in self.frames:
            for rel in (frame.rgb_path, frame.depth_path):
                if rel and not (base / rel).exists():
                    missing.append(rel)
        return missing


def load_sequence(
    manifest: Union[str, Path],
    path_name: Optional[str] = None,
    dataset: str = "synthetic",
) -> Sequence:
    """Load a frames.jsonl manifest into a Sequence ordered by frame index.

    Referenced image files are not touched here; use
    :meth:`Sequence.missing_files` to check them.
    """
    manifest = Path(manifest)
    if not manifest.is_file():
        raise FileNotFoundError(f"sequence manifest not found: {manifest}")
    if path_name is None:
        path_name = manifest.resolve().parent.name

    frames: list[FrameRecord] = []
    with open(manifest, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                frames.append(
                    FrameRecord(
                        frame_index=int(obj["frame_index"]),
                        timestamp=float(obj["timestamp"]),
                        pose=pose_from_dict(obj["pose"]),
                        condition=Condition.from_dict(obj["condition"]),
                        rgb_path=obj.get("rgb"),
                        depth_path=obj.get("depth"),
                    )
                )
            except (KeyError, TypeError, ValueError) as err:
                raise ValueError(f"{manifest}: line {lineno}: {err}") from err
    frames.sort(key=lambda f: f.frame_index)
    return Sequence.from_frames(path_name, frames, root=str(manifest.parent), dataset=dataset)


@dataclass
class DatasetStats:
    """Frame counts per (path, condition) with row/column totals."""

    counts: dict[str, dict[str, int]]

    def cell(self, path: str, label: str) -> int:
        return self.counts.get(path, {}).get(label, 0)

    def row_total(self, path: str) -> int:
        return sum(self.counts.get(path, {}).values())

    def column_total(self, label: str) -> int:
        return sum(row.get(label, 0) for row in self.counts.values())

    def grand_total(self) -> int:
        return sum(self.row_total(path) for path in self.counts)

    def to_csv(self) -> str:
        lines = ["path," + ",".join(CONDITION_COLUMNS) + ",total"]
        for path in self.counts:
            cells = [str(self.cell(path, label)) for label in CONDITION_COLUMNS]
            lines.append(f"{path}," + ",".join(cells) + f",{self.row_total(path)}")
        totals = [str(self.column_total(label)) for label in CONDITION_COLUMNS]
        lines.append("total," + ",".join(totals) + f",{self.grand_total()}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        header = ["path", *CONDITION_COLUMNS, "total"]
        rows = [header]
        for path in self.counts:
            rows.append(
                [path]
                + [str(self.cell(path, label)) for label in CONDITION_COLUMNS]
                + [str(self.row_total(path))]
            )
        rows.append(
            ["total"]
            + [str(self.column_total(label)) for label in CONDITION_COLUMNS]
            + [str(self.grand_total())]
        )
        widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
        return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows) + "\n"


def stats_table(sequences: Seq[Sequence]) -> DatasetStats:
    """Tabulate frame counts per path and condition (rows appear in input order)."""
    counts: dict[str, dict[str, int]] = {}
    for seq in sequences:
        if seq.condition is None:
            continue
        row = counts.setdefault(seq.path_name, {})
        row[seq.condition.label] = row.get(seq.condition.label, 0) + len(seq.frames)
    return DatasetStats(counts)


def write_trajectory(source: Union[Sequence, Trajectory], out: Union[str, Path]) -> None:
    """Write a trajectory CSV; floats keep full repr precision for round-trips."""
    if isinstance(source, Sequence):
        rows = [(f.frame_index, f.timestamp, f.pose) for f in source.frames]
    else:
        rows = [(i, t, pose) for i, (t, pose) in enumerate(source.entries)]
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(TRAJECTORY_HEADER + "\n")
        for frame_index, timestamp, pose in rows:
            fh.write(format_pose_row(frame_index, timestamp, pose) + "\n")


def read_trajectory(path: Union[str, Path]) -> Trajectory:
    """Read a trajectory CSV back into timestamped poses, preserving order."""
    path = Path(path)
    entries: list[tuple[float, Pose]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if lineno == 1:
                if line != TRAJECTORY_HEADER:
                    raise ValueError(f"{path}: line 1: expected header '{TRAJECTORY_HEADER}'")
                continue
            parts = line.split(",")
            if len(parts) != 8:
                raise ValueError(f"{path}: line {lineno}: expected 8 fields, got {len(parts)}")
            try:
                timestamp = float(parts[1])
                pose = Pose(*(float(v) for v in parts[2:8]))
            except ValueError as err:
                raise ValueError(f"{path}: line {lineno}: {err}") from err
            entries.append((timestamp, pose))
    return Trajectory(entries)
