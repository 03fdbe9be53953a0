"""Acceptance suite: one test per release criterion, each printing a pass line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines and timings.
"""

import json
import math
import shutil
import socket
import threading
import time

import numpy as np
import pytest

from navforge.capture import (
    Condition,
    FrameMessage,
    FrameSource,
    SessionConfig,
    default_synthesizer,
    loopback_capture,
    postprocess_frames,
)
from navforge.cli import main
from navforge.depth_codec import (
    CameraIntrinsics,
    DepthMap,
    decode_depth,
    depth_to_pointcloud,
    encode_depth,
    pointcloud_to_depth,
)
from navforge.evaluation import Embedding, Trajectory, align_horn, ate_rmse, batch_triplet_loss, topk_recall, triplet_loss
from navforge.geometry import Pose
from navforge.sequence_store import FrameRecord, Sequence
from navforge.vpr_builder import Place, SelectionThresholds, frames_selection, place_selection, validate_thresholds

DAY_SUNNY = Condition("day", "extrasunny")
TWO_PI = 2.0 * math.pi


def passed(name, started):
    print(f"[PASS] {name} ({time.monotonic() - started:.2f}s)")


def seq_from_poses(poses, condition=DAY_SUNNY, path_name="path"):
    frames = [
        FrameRecord(frame_index=i, timestamp=i / 10.0, pose=pose, condition=condition)
        for i, pose in enumerate(poses)
    ]
    return Sequence(path_name, condition if frames else None, frames)


def test_threshold_rule_validation():
    started = time.monotonic()
    accepted = SelectionThresholds(100.0, math.radians(90.0), 10.0, math.radians(20.0))
    assert validate_thresholds(accepted) == []
    linear_boundary = SelectionThresholds(100.0, math.radians(90.0), 50.0, math.radians(20.0))
    assert validate_thresholds(linear_boundary) != []
    angular_boundary = SelectionThresholds(100.0, math.radians(90.0), 10.0, math.radians(45.0))
    assert validate_thresholds(angular_boundary) != []
    elapsed = time.monotonic() - started
    assert elapsed < 1.0
    passed("threshold rules accept the reference parameters and reject both boundaries", started)


def test_uniqueness_theorem_randomized():
    started = time.monotonic()
    rng = np.random.default_rng(1234)
    trials = 1000
    n_frames = 10_000
    n_candidates = 40
    multi_matched = 0
    for _ in range(trials):
        t_l_new = float(rng.uniform(20.0, 120.0))
        t_a_new = float(rng.uniform(0.6, 2.8))
        t_l_same = t_l_new * float(rng.uniform(0.05, 0.4999))
        t_a_same = t_a_new * float(rng.uniform(0.05, 0.4999))
        # box a few thresholds wide, so frames regularly land near places
        half = t_l_new * float(rng.uniform(1.0, 3.0))

        # build a place set satisfying the pairwise selection postcondition
        cand_xyz = rng.uniform(-half, half, size=(n_candidates, 3))
        cand_yaw = rng.uniform(-7.0, 7.0, size=n_candidates)
        buf_xyz = np.empty((n_candidates, 3))
        buf_yaw = np.empty(n_candidates)
        m = 0
        for i in range(n_candidates):
            if m:
                diff = buf_xyz[:m] - cand_xyz[i]
                lin = np.sqrt((diff * diff).sum(axis=1))
                ang = np.abs(
                    (buf_yaw[:m] % TWO_PI - cand_yaw[i] % TWO_PI + math.pi) % TWO_PI - math.pi
                )
                if not np.all((lin >= t_l_new) | (ang >= t_a_new)):
                    continue
            buf_xyz[m] = cand_xyz[i]
            buf_yaw[m] = cand_yaw[i]
            m += 1
        place_xyz = buf_xyz[:m]
        place_yaw = buf_yaw[:m] % TWO_PI

        frame_xyz = rng.uniform(-half, half, size=(n_frames, 3))
        frame_yaw = rng.uniform(-7.0, 7.0, size=n_frames)
        # squared distances via BLAS, avoiding the (n, m, 3) temporary
        lin2 = (
            (frame_xyz**2).sum(axis=1)[:, None]
            + (place_xyz**2).sum(axis=1)[None, :]
            - 2.0 * frame_xyz @ place_xyz.T
        )
        ang = np.abs(((frame_yaw % TWO_PI)[:, None] - place_yaw[None, :] + math.pi) % TWO_PI - math.pi)
        matches = (lin2 < t_l_same * t_l_same) & (ang < t_a_same)
        per_frame = matches.sum(axis=1)
        multi_matched += int(np.count_nonzero(per_frame > 1))
        assert int(per_frame.max(initial=0)) <= 1

    assert multi_matched == 0
    elapsed = time.monotonic() - started
    assert elapsed < 30.0
    passed(f"uniqueness: no frame matched two places in {trials} randomized trials", started)


def test_greedy_selection_matches_bruteforce_replay():
    started = time.monotonic()
    rng = np.random.default_rng(99)

    def oracle_replay(poses, t_l, t_a):
        accepted, indices = [], []
        for i, pose in enumerate(poses):
            is_new = True
            for prev in accepted:
                lin = math.sqrt(
                    (pose.x - prev.x) ** 2 + (pose.y - prev.y) ** 2 + (pose.z - prev.z) ** 2
                )
                ang = abs(((pose.phi_z % TWO_PI) - (prev.phi_z % TWO_PI) + math.pi) % TWO_PI - math.pi)
                if lin < t_l and ang < t_a:
                    is_new = False
                    break
            if is_new:
                accepted.append(pose)
                indices.append(i)
        return indices

    for _ in range(200):
        n = int(rng.integers(1, 201))
        scale = float(rng.uniform(50.0, 500.0))
        poses = [
            Pose(*rng.uniform(-scale, scale, 3), 0.0, 0.0, float(rng.uniform(-7.0, 7.0)))
            for _ in range(n)
        ]
        t_l = float(rng.uniform(5.0, 150.0))
        t_a = float(rng.uniform(0.2, 3.0))
        places = place_selection([seq_from_poses(poses)], t_l, t_a)
        expected = oracle_replay(poses, t_l, t_a)
        assert [p.pose for p in places] == [poses[i] for i in expected]

    elapsed = time.monotonic() - started
    assert elapsed < 60.0
    passed("greedy place selection agrees with the brute-force insert-time replay (200 sequences)", started)


def test_hand_traced_selection_fixtures():
    started = time.monotonic()
    # selection: frame 1 fails both clauses, frame 2 passes the angular clause
    poses = [
        Pose(0, 0, 0, 0, 0, 0.0),
        Pose(50, 0, 0, 0, 0, 0.0),
        Pose(50, 0, 0, 0, 0, math.radians(120.0)),
    ]
    places = place_selection([seq_from_poses(poses)], 100.0, math.radians(90.0))
    assert [p.pose for p in places] == [poses[0], poses[2]]

    # association: 5 m / 10 deg matches, 15 m is beyond the linear threshold
    thresholds = SelectionThresholds(100.0, math.radians(90.0), 10.0, math.radians(20.0))
    place = Place(0, Pose(0, 0, 0, 0, 0, 0.0))
    frames = seq_from_poses([Pose(5, 0, 0, 0, 0, math.radians(10.0)), Pose(15, 0, 0, 0, 0, 0.0)])
    associations = frames_selection([frames], [place], thresholds)
    assert [img.pose for img in associations.images[0]] == [Pose(5, 0, 0, 0, 0, math.radians(10.0))]
    passed("hand-traced selection and association fixtures reproduce exactly", started)


def test_depth_codec_identities():
    started = time.monotonic()
    assert decode_depth(0.0) == 960.0

    codes = np.linspace(0.0, 1.0, 1001)
    round_trip = np.array([encode_depth(decode_depth(float(v))) for v in codes])
    assert np.max(np.abs(round_trip - codes)) < 1e-9

    rng = np.random.default_rng(7)
    for _ in range(10):
        fx, fy = rng.uniform(20.0, 500.0, 2)
        cx = float(rng.uniform(0.0, 63.0))
        cy = float(rng.uniform(0.0, 63.0))
        intrinsics = CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=64, height=64)
        depth = DepthMap(rng.uniform(1.0, 960.0, size=(64, 64)))
        cloud = depth_to_pointcloud(depth, intrinsics)
        back, skipped = pointcloud_to_depth(cloud, intrinsics)
        assert skipped == 0
        assert np.array_equal(back.values, depth.values)

    passed("depth codec: 1001-point round trip < 1e-9, exact dense reprojection", started)


def random_rotation(rng):
    m = rng.normal(size=(3, 3))
    q, r = np.linalg.qr(m)
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def test_trajectory_error_suite():
    started = time.monotonic()
    rng = np.random.default_rng(21)

    def traj(points):
        return Trajectory.from_poses([Pose(float(x), float(y), float(z)) for x, y, z in points])

    base_points = rng.uniform(-50.0, 50.0, size=(30, 3))
    base = traj(base_points)
    assert ate_rmse(base, base).rmse < 1e-9

    for _ in range(100):
        r0, t0 = random_rotation(rng), rng.uniform(-20.0, 20.0, 3)
        moved = traj(base_points @ r0.T + t0)
        assert ate_rmse(moved, base).rmse < 1e-6

    for _ in range(100):
        pts = rng.uniform(-40.0, 40.0, size=(10, 3))
        r0, t0 = random_rotation(rng), rng.uniform(-20.0, 20.0, 3)
        transform = align_horn(traj(pts), traj(pts @ r0.T + t0))
        assert np.max(np.abs(transform.rotation - r0)) < 1e-9
        assert np.max(np.abs(transform.translation - t0)) < 1e-9

    # displaced-corner fixture vs a planar grid-search oracle (1e-4 rad steps)
    q_pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]])
    p_pts = q_pts.copy()
    p_pts[3] = [1.4, 1.4, 0.0]
    pipeline_rmse = ate_rmse(traj(p_pts), traj(q_pts)).rmse

    theta = np.arange(-math.pi, math.pi, 1e-4)
    c, s = np.cos(theta)[:, None], np.sin(theta)[:, None]
    px, py = p_pts[:, 0][None, :], p_pts[:, 1][None, :]
    qx, qy = q_pts[:, 0][None, :], q_pts[:, 1][None, :]
    rx = c * px - s * py
    ry = s * px + c * py
    tx = qx.mean(axis=1, keepdims=True) - rx.mean(axis=1, keepdims=True)
    ty = qy.mean(axis=1, keepdims=True) - ry.mean(axis=1, keepdims=True)
    residuals = (rx + tx - qx) ** 2 + (ry + ty - qy) ** 2
    oracle_rmse = float(np.sqrt(residuals.mean(axis=1)).min())
    assert abs(pipeline_rmse - oracle_rmse) < 1e-3

    passed("trajectory error: exact self/rigid cases, oracle-matched corner fixture", started)


def test_retrieval_suite():
    started = time.monotonic()
    rng = np.random.default_rng(31)
    day = Condition("day", "extrasunny")
    night = Condition("night", "clear")

    def brute_force(queries, database, gt, ks):
        out = {}
        for k in ks:
            hits = 0
            for q in queries:
                ranked = sorted(
                    range(len(database)),
                    key=lambda i: (
                        1.0
                        - sum(a * b for a, b in zip(q.vector, database[i].vector))
                        / (math.sqrt(sum(a * a for a in q.vector)) * math.sqrt(sum(b * b for b in database[i].vector))),
                        i,
                    ),
                )
                hits += gt[q.id] in [database[i].id for i in ranked[:k]]
            out[k] = hits / len(queries)
        return out

    for _ in range(50):
        nd = int(rng.integers(2, 51))
        nq = int(rng.integers(1, 16))
        dim = int(rng.integers(2, 17))
        database = [Embedding(f"d{i}", night, rng.normal(size=dim)) for i in range(nd)]
        queries = [Embedding(f"q{i}", day, rng.normal(size=dim)) for i in range(nq)]
        gt = {q.id: database[int(rng.integers(nd))].id for q in queries}
        ks = sorted({1, 2, max(1, nd // 2), nd})
        got = topk_recall(queries, database, gt, ks)
        assert got == pytest.approx(brute_force(queries, database, gt, ks))
        values = [got[k] for k in ks]
        assert all(b >= a for a, b in zip(values, values[1:]))

    # margin-satisfied / identical-pair / equidistant fixtures
    e_a, e_p, e_n = [1.0, 0.0], [0.8, 0.6], [0.1, math.sqrt(0.99)]
    assert triplet_loss(e_a, e_p, e_n, eps=0.3) == 0.0
    shared = [0.3, -0.7, 0.2]
    assert triplet_loss([1.0, 0.0, 0.0], shared, shared, eps=0.5) == 0.5
    assert triplet_loss([1.0, 0.0], [0.8, 0.6], [0.8, -0.6], eps=0.5) == 0.5
    losses = [([1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]), ([1.0, 0.0], [0.8, 0.6], [0.8, -0.6])]
    expected_mean = (triplet_loss(*losses[0], eps=0.5) + triplet_loss(*losses[1], eps=0.5)) / 2.0
    assert batch_triplet_loss(losses, eps=0.5) == expected_mean

    passed("retrieval: 50 oracle-matched recall sets, exact loss fixtures", started)


def test_capture_loopback_timing_and_faults(tmp_path):
    started = time.monotonic()
    poses = [Pose(float(i), 0.0, 0.0, 0.0, 0.0, 0.0) for i in range(100)]
    config = SessionConfig(fps=10.0, out_dir=str(tmp_path / "session"))
    controls = [(50, {"set": {"weather": "rain"}})]

    wall_start = time.monotonic()
    summary, result = loopback_capture(FrameSource(poses, DAY_SUNNY), config, controls=controls)
    wall = time.monotonic() - wall_start
    assert 9.0 <= wall <= 11.0
    assert summary.frames_sent == 100
    assert result.persisted == 100

    day_rain = Condition("day", "rain")
    files = sorted(result.raw_dir.glob("*.json"))
    assert len(files) == 100
    for index, path in enumerate(files):
        condition = DAY_SUNNY if index < 50 else day_rain
        rgb, depth = default_synthesizer(poses[index], condition, index)
        expected = FrameMessage(index, index / 10.0, poses[index], condition, rgb, depth).to_wire()
        assert path.read_bytes() == expected

    out = tmp_path / "processed"
    report = postprocess_frames(result.raw_dir, out)
    assert (report.ok, report.rejected) == (100, 0)
    assert len(list((out / "rgb").glob("*.png"))) == 100
    assert len(list((out / "depth").glob("*.png"))) == 100
    assert len((out / "poses.csv").read_text().splitlines()) == 101

    # fault injection: one truncated raw frame is quarantined, not fatal
    faulty_raw = tmp_path / "faulty_raw"
    shutil.copytree(result.raw_dir, faulty_raw)
    victim = faulty_raw / "000042.json"
    victim.write_bytes(victim.read_bytes()[:100])
    faulty_out = tmp_path / "faulty_processed"
    report = postprocess_frames(faulty_raw, faulty_out)
    assert (report.ok, report.rejected) == (99, 1)
    assert len(list((faulty_out / "rejected").glob("*.json"))) == 1

    passed(f"capture loopback: 100 byte-identical frames in {wall:.2f}s, live weather switch, fault quarantined", started)


def free_port():
    s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def run_cli_pipeline(root, seed):
    """simulate -> serve/capture -> postprocess -> build-vpr -> make-triplets."""
    root.mkdir(parents=True, exist_ok=True)
    traj = root / "traj.csv"
    assert main(
        [
            "--seed", str(seed), "simulate", "--out", str(traj),
            "--waypoints", "0,0;120,0;120,120", "--spacing", "4",
            "--sigma-linear", "0.4", "--sigma-angular-deg", "2", "--fps", "50",
        ]
    ) == 0

    seqs = root / "seqs"
    for tod, weather in (("day", "extrasunny"), ("night", "clear")):
        port = free_port()
        code_box = {}

        def serve():
            code_box["code"] = main(
                [
                    "serve", "--trajectory", str(traj), "--bind", f"127.0.0.1:{port}",
                    "--fps", "50", "--time-of-day", tod, "--weather", weather,
                ]
            )

        thread = threading.Thread(target=serve, daemon=True)
        thread.start()
        session = root / f"session_{tod}_{weather}"
        for _ in range(40):
            code = main(["capture", "--connect", f"127.0.0.1:{port}", "--out", str(session), "--fps", "50"])
            if code == 0:
                break
            time.sleep(0.05)
        assert code == 0
        thread.join(timeout=60)
        assert code_box["code"] == 0
        assert main(["postprocess", "--raw", str(session / "raw"), "--out", str(seqs / f"{tod}_{weather}")]) == 0

    vpr_dir = root / "vpr"
    assert main(
        [
            "--seed", str(seed), "build-vpr", "--in", str(seqs), "--out", str(vpr_dir),
            "--tl-new", "100", "--ta-new", "90", "--tl-same", "10", "--ta-same", "20",
        ]
    ) == 0
    triplets = root / "triplets.jsonl"
    assert main(
        ["--seed", str(seed), "make-triplets", "--in", str(vpr_dir / "places.jsonl"), "--out", str(triplets), "--count", "50"]
    ) == 0

    manifests = {}
    for rel in (
        "seqs/day_extrasunny/frames.jsonl",
        "seqs/day_extrasunny/poses.csv",
        "seqs/night_clear/frames.jsonl",
        "seqs/night_clear/poses.csv",
        "vpr/places.jsonl",
        "triplets.jsonl",
    ):
        manifests[rel] = (root / rel).read_bytes()
    return manifests


def test_end_to_end_determinism(tmp_path):
    started = time.monotonic()
    first = run_cli_pipeline(tmp_path / "run1", seed=20240)
    second = run_cli_pipeline(tmp_path / "run2", seed=20240)
    assert set(first) == set(second)
    for rel in first:
        assert first[rel] == second[rel], f"manifest differs between runs: {rel}"
    assert json.loads(first["vpr/places.jsonl"].splitlines()[0])["place_id"] == 0
    elapsed = time.monotonic() - started
    assert elapsed < 120.0
    passed(f"end-to-end determinism: byte-identical manifests across two seeded runs ({elapsed:.1f}s)", started)
