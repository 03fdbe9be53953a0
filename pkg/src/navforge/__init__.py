"""Synthetic capture, VPR dataset construction and trajectory evaluation toolkit."""

from .geometry import (
    PerturbationParams,
    Pose,
    Waypoint,
    densify_path,
    dist_angular,
    dist_linear,
    normalize_angle,
    perturb_trajectory,
)
from .depth_codec import (
    CameraIntrinsics,
    DepthCodecParams,
    DepthMap,
    PointCloud,
    decode_depth,
    depth_to_pointcloud,
    encode_depth,
    pointcloud_to_depth,
    to_millimeter_map,
)
from .capture import (
    Condition,
    FrameMessage,
    FrameSource,
    SessionConfig,
    capture_client,
    postprocess_frames,
    serve_sequence,
)
from .sequence_store import (
    FrameRecord,
    Sequence,
    load_sequence,
    read_trajectory,
    stats_table,
    write_trajectory,
)
from .vpr_builder import (
    PlaceAssociations,
    SelectionThresholds,
    Triplet,
    build_vpr_dataset,
    compute_crop_window,
    export_vpr_dataset,
    frames_selection,
    place_selection,
    sample_triplets,
    validate_thresholds,
)
from .evaluation import (
    AteReport,
    Embedding,
    RigidTransform,
    Trajectory,
    align_horn,
    ate_rmse,
    batch_triplet_loss,
    cosine_distance,
    topk_recall,
    triplet_loss,
)

__version__ = "0.1.0"
