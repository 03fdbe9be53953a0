"""Unsupervised VPR dataset construction from pose-annotated sequences.

Place selection is a greedy single pass: a pose becomes a new place only if
every already-selected place is at least ``t_l_new`` meters away OR at least
``t_a_new`` radians apart in yaw. Frame association then attaches an image to
a place when it is within ``t_l_same`` meters AND ``t_a_same`` radians of it.
With t_l_same < t_l_new/2 and t_a_same < t_a_new/2 (strictly) no frame can
match two places, so the association is a function.
"""

from __future__ import annotations

import json
import math
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence as Seq, Union

import numpy as np
from PIL import Image

from .capture import Condition, canonical_json, pose_from_dict, pose_to_dict
from .geometry import Pose, angular_distances, dist_angular, dist_linear, linear_distances
from .sequence_store import Sequence

RESIZE_TARGET = (224, 224)
TRAINING_CROP_ASPECT = 4.0 / 3.0


@dataclass(frozen=True)
class SelectionThresholds:
    """Distance thresholds for place selection and frame association.

    ``t_l_new``/``t_l_same`` in meters, ``t_a_new``/``t_a_same`` in radians.
    Valid sets keep both "same" thresholds strictly below half their "new"
    counterpart; see :func:`validate_thresholds`.
    """

    t_l_new: float
    t_a_new: float
    t_l_same: float
    t_a_same: float


def validate_thresholds(thresholds: SelectionThresholds) -> list[str]:
    """Return all threshold-rule violations (empty list means valid)."""
    th = thresholds
    violations = []
    for name in ("t_l_new", "t_a_new", "t_l_same", "t_a_same"):
        value = getattr(th, name)
        if not (math.isfinite(value) and value > 0.0):
            violations.append(f"{name} must be > 0, got {value!r}")
    if math.isfinite(th.t_l_same) and math.isfinite(th.t_l_new) and not th.t_l_same < th.t_l_new / 2.0:
        violations.append(f"t_l_same ({th.t_l_same} m) must be < t_l_new/2 ({th.t_l_new / 2.0} m)")
    if math.isfinite(th.t_a_same) and math.isfinite(th.t_a_new) and not th.t_a_same < th.t_a_new / 2.0:
        violations.append(f"t_a_same ({th.t_a_same} rad) must be < t_a_new/2 ({th.t_a_new / 2.0} rad)")
    return violations


def require_valid_thresholds(thresholds: SelectionThresholds) -> None:
    violations = validate_thresholds(thresholds)
    if violations:
        raise ValueError("; ".join(violations))


@dataclass(frozen=True)
class Place:
    place_id: int
    pose: Pose


PlaceSet = list[Place]


@dataclass(frozen=True)
class PlaceImage:
    """One image associated to a place, with its source pose and dataset tag."""

    ref: str
    condition: Condition
    pose: Pose
    dataset: str = "synthetic"
    abs_path: Optional[str] = None  # local file for export copying; not serialized


@dataclass
class PlaceAssociations:
    """Alg. 2 output: every place with the images that frame it."""

    places: PlaceSet
    images: dict[int, list[PlaceImage]]

    def total_images(self) -> int:
        return sum(len(v) for v in self.images.values())

    def mean_images_per_place(self) -> float:
        return self.total_images() / len(self.places) if self.places else 0.0


@dataclass(frozen=True)
class Triplet:
    anchor: PlaceImage
    positive: PlaceImage
    negative: PlaceImage
    anchor_place: int
    negative_place: int


def place_selection(sequences: Seq[Sequence], t_l_new: float, t_a_new: float) -> PlaceSet:
    """Greedy selection of unique places over sequences in the order given.

    A pose joins the place set only when, against every selected place, the
    linear distance reaches ``t_l_new`` or the angular distance reaches
    ``t_a_new``. The first frame is always selected.
    """
    if not (t_l_new > 0.0 and t_a_new > 0.0):
        raise ValueError("place-selection thresholds must be > 0")
    places: PlaceSet = []
    for seq in sequences:
        for frame in seq.frames:
            pose = frame.pose
            # reject on the first counterexample; recent places fail fastest
            is_new = not any(
                dist_linear(pose, place.pose) < t_l_new and dist_angular(pose, place.pose) < t_a_new
                for place in reversed(places)
            )
            if is_new:
                places.append(Place(len(places), pose))
    return places


def frames_selection(
    sequences: Seq[Sequence],
    places: PlaceSet,
    thresholds: SelectionThresholds,
) -> PlaceAssociations:
    """Associate every frame to the place it lies within the "same" thresholds of.

    Takes the full threshold set so the threshold rules can be enforced before
    running; under those rules at most one place can match a frame. Frames
    matching no place are dropped.
    """
    require_valid_thresholds(thresholds)
    images: dict[int, list[PlaceImage]] = {place.place_id: [] for place in places}
    if not places:
        return PlaceAssociations([], {})

    place_xyz = np.array([[pl.pose.x, pl.pose.y, pl.pose.z] for pl in places])
    place_yaw = np.array([pl.pose.phi_z for pl in places])
    for seq in sequences:
        if not seq.frames:
            continue
        frame_xyz = np.array([[f.pose.x, f.pose.y, f.pose.z] for f in seq.frames])
        frame_yaw = np.array([f.pose.phi_z for f in seq.frames])
        lin = linear_distances(frame_xyz, place_xyz)
        ang = angular_distances(frame_yaw, place_yaw)
        matches = (lin < thresholds.t_l_same) & (ang < thresholds.t_a_same)
        hit_rows = np.nonzero(matches.any(axis=1))[0]
        hit_place = np.argmax(matches, axis=1)
        for row in hit_rows:
            frame = seq.frames[int(row)]
            place = places[int(hit_place[row])]
            images[place.place_id].append(_place_image(seq, frame))
    return PlaceAssociations(list(places), images)


def _place_image(seq: Sequence, frame) -> PlaceImage:
    if frame.rgb_path:
        ref = f"{seq.path_name}/{frame.rgb_path}"
        abs_path = str(Path(seq.root) / frame.rgb_path) if seq.root else None
    else:
        ref = f"{seq.path_name}/{frame.frame_index:06d}"
        abs_path = None
    if frame.condition is None:
        raise ValueError(f"frame {ref} has no condition")
    return PlaceImage(ref=ref, condition=frame.condition, pose=frame.pose, dataset=seq.dataset, abs_path=abs_path)


DAY_SUNNY = Condition("day", "extrasunny")


@dataclass
class BuildSummary:
    place_count: int
    image_count: int
    mean_images_per_place: float
    total_frames: int
    dropped_frames: int


def build_vpr_dataset(
    sequences: Seq[Sequence],
    thresholds: SelectionThresholds,
    day_sunny_only: bool = True,
) -> tuple[PlaceSet, PlaceAssociations, BuildSummary]:
    """Run place selection then frame association over a set of sequences.

    By default only day/extrasunny sequences feed place selection, while all
    sequences are associated; pass ``day_sunny_only=False`` to select places
    from every sequence.
    """
    require_valid_thresholds(thresholds)
    selection_input = [s for s in sequences if s.condition == DAY_SUNNY] if day_sunny_only else list(sequences)
    places = place_selection(selection_input, thresholds.t_l_new, thresholds.t_a_new)
    associations = frames_selection(sequences, places, thresholds)
    total = sum(len(s.frames) for s in sequences)
    kept = associations.total_images()
    summary = BuildSummary(
        place_count=len(places),
        image_count=kept,
        mean_images_per_place=associations.mean_images_per_place(),
        total_frames=total,
        dropped_frames=total - kept,
    )
    return places, associations, summary


@dataclass
class ExportSummary:
    place_count: int
    image_count: int
    mean_images_per_place: float
    copied_files: int
    manifest: str


def export_vpr_dataset(associations: PlaceAssociations, out: Union[str, Path]) -> ExportSummary:
    """Write places.jsonl plus per-place image directories.

    Image files are copied only for entries whose source file is known and
    present; the manifest is always complete.
    """
    if not associations.places:
        raise ValueError("no places to export")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "places.jsonl"
    copied = 0
    with open(manifest_path, "wb") as fh:
        for place in sorted(associations.places, key=lambda p: p.place_id):
            images = associations.images.get(place.place_id, [])
            fh.write(
                canonical_json(
                    {
                        "place_id": place.place_id,
                        "pose": pose_to_dict(place.pose),
                        "images": [
                            {
                                "ref": img.ref,
                                "condition": img.condition.to_dict(),
                                "dataset": img.dataset,
                                "pose": pose_to_dict(img.pose),
                            }
                            for img in images
                        ],
                    }
                )
                + b"\n"
            )
            place_dir = out / "places" / f"{place.place_id:04d}"
            for position, img in enumerate(images):
                if img.abs_path and Path(img.abs_path).is_file():
                    place_dir.mkdir(parents=True, exist_ok=True)
                    suffix = Path(img.abs_path).suffix or ".png"
                    shutil.copyfile(img.abs_path, place_dir / f"{position:04d}{suffix}")
                    copied += 1
    return ExportSummary(
        place_count=len(associations.places),
        image_count=associations.total_images(),
        mean_images_per_place=associations.mean_images_per_place(),
        copied_files=copied,
        manifest=str(manifest_path),
    )


def load_place_manifest(path: Union[str, Path]) -> PlaceAssociations:
    """Read a places.jsonl manifest back into PlaceAssociations."""
    path = Path(path)
    places: PlaceSet = []
    images: dict[int, list[PlaceImage]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                place = Place(int(obj["place_id"]), pose_from_dict(obj["pose"]))
                entries = [
                    PlaceImage(
                        ref=str(img["ref"]),
                        condition=Condition.from_dict(img["condition"]),
                        pose=pose_from_dict(img["pose"]),
                        dataset=str(img.get("dataset", "synthetic")),
                    )
                    for img in obj["images"]
                ]
            except (KeyError, TypeError, ValueError) as err:
                raise ValueError(f"{path}: line {lineno}: {err}") from err
            places.append(place)
            images[place.place_id] = entries
    return PlaceAssociations(places, images)


def sample_triplets(associations: PlaceAssociations, count: int, seed: int) -> list[Triplet]:
    """Sample anchor/positive/negative triplets with day-night constraints.

    Anchors are drawn uniformly over the images of places that have both a day
    and a night image; the positive is an opposite-time-of-day image of the
    same place; the negative is an opposite-time-of-day image of a different
    place from the same source dataset as the positive.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    by_tod: dict[int, dict[str, list[PlaceImage]]] = {}
    deficient: list[int] = []
    for place in sorted(associations.places, key=lambda p: p.place_id):
        pid = place.place_id
        split = {"day": [], "night": []}
        for img in associations.images.get(pid, []):
            split[img.condition.time_of_day].append(img)
        if split["day"] and split["night"]:
            by_tod[pid] = split
        else:
            deficient.append(pid)
    if len(by_tod) < 2:
        raise ValueError(
            "triplet sampling needs at least 2 places with both day and night images; "
            f"deficient places: {deficient if deficient else 'none'}"
        )

    anchor_pool = [(pid, img) for pid, split in by_tod.items() for tod in ("day", "night") for img in split[tod]]
    rng = np.random.default_rng(seed)
    triplets: list[Triplet] = []
    for _ in range(count):
        pid, anchor = anchor_pool[int(rng.integers(len(anchor_pool)))]
        opposite = "night" if anchor.condition.time_of_day == "day" else "day"
        positives = by_tod[pid][opposite]
        positive = positives[int(rng.integers(len(positives)))]
        negatives = [
            (other_pid, img)
            for other_pid, split in by_tod.items()
            if other_pid != pid
            for img in split[opposite]
            if img.dataset == positive.dataset
        ]
        if not negatives:
            raise ValueError(
                f"no negative available for place {pid}: no other place has a {opposite} "
                f"image from dataset '{positive.dataset}'"
            )
        negative_place, negative = negatives[int(rng.integers(len(negatives)))]
        triplets.append(Triplet(anchor, positive, negative, anchor_place=pid, negative_place=negative_place))
    return triplets


def write_triplet_manifest(triplets: Seq[Triplet], out: Union[str, Path]) -> None:
    """Write triplets.jsonl: one anchor/positive/negative record per line."""
    with open(out, "wb") as fh:
        for t in triplets:
            fh.write(
                canonical_json(
                    {
                        "anchor": {"ref": t.anchor.ref, "condition": t.anchor.condition.to_dict(), "dataset": t.anchor.dataset},
                        "positive": {"ref": t.positive.ref, "condition": t.positive.condition.to_dict(), "dataset": t.positive.dataset},
                        "negative": {"ref": t.negative.ref, "condition": t.negative.condition.to_dict(), "dataset": t.negative.dataset},
                        "anchor_place": t.anchor_place,
                        "negative_place": t.negative_place,
                    }
                )
                + b"\n"
            )


@dataclass(frozen=True)
class CropWindow:
    x: int
    y: int
    width: int
    height: int


def compute_crop_window(width: int, height: int, target_aspect: float, seed: int) -> CropWindow:
    """Maximal window of the target aspect ratio, uniformly placed in the slack.

    The matching training-time resize target is :data:`RESIZE_TARGET`.
    """
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    if not (math.isfinite(target_aspect) and target_aspect > 0.0):
        raise ValueError("target aspect ratio must be > 0")
    if width / height >= target_aspect:
        crop_w = min(width, round(height * target_aspect))
        crop_h = height
    else:
        crop_w = width
        crop_h = min(height, round(width / target_aspect))
    rng = np.random.default_rng(seed)
    x = int(rng.integers(0, width - crop_w + 1))
    y = int(rng.integers(0, height - crop_h + 1))
    return CropWindow(x, y, crop_w, crop_h)


def crop_and_resize(image: Image.Image, window: CropWindow, size: tuple[int, int] = RESIZE_TARGET) -> Image.Image:
    """Apply a crop window and resize (bilinear) to the training input size."""
    box = (window.x, window.y, window.x + window.width, window.y + window.height)
    return image.crop(box).resize(size, resample=Image.Resampling.BILINEAR)
