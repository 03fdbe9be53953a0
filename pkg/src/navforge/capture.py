"""Desk-scale acquisition pipeline: frame server, raw client and post-processor.

The server streams one JSON frame message per pose at a fixed rate over TCP;
the client persists every message verbatim and defers all processing to
:func:`postprocess_frames`, which splits frames into per-type files.

Wire protocol: 4-byte big-endian length prefix followed by one UTF-8 JSON
object. The client may send control messages shaped like
``{"set": {"weather": ..., "time_of_day": ...}}``; the server applies valid
combinations to every frame built after the message arrives.
"""

from __future__ import annotations

import base64
import io
import json
import math
import queue
import select
import shutil
import socket
import struct
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
from PIL import Image

from .depth_codec import (
    DepthCodecParams,
    DepthMap,
    decode_depth_map,
    read_raw_codes,
    to_millimeter_map,
    write_depth_png,
    write_raw_codes,
)
from .geometry import Pose

LENGTH_PREFIX = struct.Struct("!I")
MAX_MESSAGE_BYTES = 64 * 1024 * 1024
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"

TRAJECTORY_HEADER = "frame_index,timestamp,x,y,z,phi_x,phi_y,phi_z"
POSE_FIELDS = ("x", "y", "z", "phi_x", "phi_y", "phi_z")

VALID_CONDITIONS = frozenset(
    [
        ("day", "extrasunny"),
        ("day", "overcast"),
        ("day", "rain"),
        ("night", "clear"),
        ("night", "rain"),
    ]
)


class CaptureError(RuntimeError):
    """Base class for capture-session failures."""


class ProtocolError(CaptureError):
    """Corrupt or truncated wire data; carries the offending byte offset."""

    def __init__(self, message: str, byte_offset: int, persisted: int = 0):
        super().__init__(message)
        self.byte_offset = byte_offset
        self.persisted = persisted


class QueueOverflowError(CaptureError):
    """The receive buffer filled up; failing fast instead of dropping frames."""

    def __init__(self, message: str, persisted: int = 0):
        super().__init__(message)
        self.persisted = persisted


class WriteAbortError(CaptureError):
    """Persisting a frame failed; reports the last durable frame count."""

    def __init__(self, message: str, persisted: int):
        super().__init__(message)
        self.persisted = persisted


@dataclass(frozen=True)
class Condition:
    """One of the five valid (time of day, weather) capture combinations."""

    time_of_day: str
    weather: str

    def __post_init__(self) -> None:
        if (self.time_of_day, self.weather) not in VALID_CONDITIONS:
            valid = ", ".join(sorted(f"{t}/{w}" for t, w in VALID_CONDITIONS))
            raise ValueError(f"invalid condition '{self.time_of_day}/{self.weather}'; valid: {valid}")

    @property
    def label(self) -> str:
        return f"{self.time_of_day}/{self.weather}"

    def to_dict(self) -> dict:
        return {"time_of_day": self.time_of_day, "weather": self.weather}

    @classmethod
    def from_dict(cls, obj: dict) -> "Condition":
        return cls(str(obj["time_of_day"]), str(obj["weather"]))

    @classmethod
    def from_label(cls, label: str) -> "Condition":
        time_of_day, _, weather = label.partition("/")
        return cls(time_of_day, weather)


ALL_CONDITIONS = tuple(Condition(t, w) for t, w in sorted(VALID_CONDITIONS))


def canonical_json(obj) -> bytes:
    """Deterministic JSON encoding used for all wire messages and manifests."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def pose_to_dict(pose: Pose) -> dict:
    return {name: getattr(pose, name) for name in POSE_FIELDS}


def pose_from_dict(obj: dict) -> Pose:
    if not isinstance(obj, dict) or set(obj) != set(POSE_FIELDS):
        raise ValueError(f"pose must have exactly the fields {', '.join(POSE_FIELDS)}")
    return Pose(**{name: float(obj[name]) for name in POSE_FIELDS})


def format_pose_row(frame_index: int, timestamp: float, pose: Pose) -> str:
    """One poses.csv row; repr keeps full float precision for round-trips."""
    values = [repr(float(timestamp))] + [repr(float(getattr(pose, f))) for f in POSE_FIELDS]
    return ",".join([str(int(frame_index))] + values)


@dataclass(frozen=True)
class FrameMessage:
    """One capture triplet on the wire: pose, condition and image payloads."""

    frame_index: int
    timestamp: float
    pose: Pose
    condition: Condition
    rgb_png: bytes
    depth_raw: bytes

    def to_wire(self) -> bytes:
        return canonical_json(
            {
                "frame_index": self.frame_index,
                "timestamp": self.timestamp,
                "pose": pose_to_dict(self.pose),
                "condition": self.condition.to_dict(),
                "rgb_png_b64": base64.b64encode(self.rgb_png).decode("ascii"),
                "depth_raw_b64": base64.b64encode(self.depth_raw).decode("ascii"),
            }
        )

    @classmethod
    def from_wire(cls, data: Union[bytes, dict]) -> "FrameMessage":
        obj = json.loads(data) if isinstance(data, (bytes, str)) else data
        return cls(
            frame_index=int(obj["frame_index"]),
            timestamp=float(obj["timestamp"]),
            pose=pose_from_dict(obj["pose"]),
            condition=Condition.from_dict(obj["condition"]),
            rgb_png=base64.b64decode(obj["rgb_png_b64"], validate=True),
            depth_raw=base64.b64decode(obj["depth_raw_b64"], validate=True),
        )


@dataclass(frozen=True)
class SessionConfig:
    """Shared server/client session settings."""

    endpoint: str = "127.0.0.1:0"
    fps: float = 10.0
    out_dir: Optional[str] = None
    condition: Optional[Condition] = None

    def __post_init__(self) -> None:
        if not (math.isfinite(self.fps) and self.fps > 0):
            raise ValueError(f"fps must be > 0, got {self.fps!r}")
        parse_endpoint(self.endpoint)


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not host:
        raise ValueError(f"endpoint must look like host:port, got {endpoint!r}")
    return host, int(port)


# ---------------------------------------------------------------------------
# Synthetic world source: procedural frame payloads keyed to pose + condition.

SYNTH_WIDTH = 64
SYNTH_HEIGHT = 36

_WEATHER_TINT = {
    "extrasunny": (1.0, 0.93, 0.78),
    "overcast": (0.78, 0.80, 0.84),
    "rain": (0.58, 0.68, 0.88),
    "clear": (0.85, 0.88, 1.0),
}

FrameSynthesizer = Callable[[Pose, Condition, int], tuple[bytes, bytes]]


def synthesize_rgb(
    pose: Pose, condition: Condition, index: int, width: int = SYNTH_WIDTH, height: int = SYNTH_HEIGHT
) -> bytes:
    """Tiny procedural gradient PNG, a deterministic function of pose + condition."""
    u = np.linspace(0.0, 1.0, width)[None, :]
    v = np.linspace(0.0, 1.0, height)[:, None]
    phase = 0.11 * pose.x + 0.23 * pose.y + 0.05 * pose.z + pose.phi_z
    base = 0.5 + 0.5 * np.sin(2 * np.pi * u + phase) * np.cos(2 * np.pi * v - 0.5 * phase)
    brightness = 1.0 if condition.time_of_day == "day" else 0.25
    tint = np.array(_WEATHER_TINT[condition.weather])
    img = np.clip(base[:, :, None] * tint[None, None, :] * brightness * 255.0, 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(img, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def synthesize_depth_codes(
    pose: Pose, index: int, width: int = SYNTH_WIDTH, height: int = SYNTH_HEIGHT
) -> np.ndarray:
    """Dense raw depth codes in [0.05, 0.95], a deterministic function of the pose."""
    u = np.linspace(0.0, 1.0, width)[None, :]
    v = np.linspace(0.0, 1.0, height)[:, None]
    phase = 0.37 * pose.x + 0.73 * pose.y + 0.01 * index
    codes = 0.5 + 0.45 * np.sin(2 * np.pi * u + phase) * np.cos(2 * np.pi * v - phase)
    return codes.astype(np.float32)


def default_synthesizer(pose: Pose, condition: Condition, index: int) -> tuple[bytes, bytes]:
    rgb = synthesize_rgb(pose, condition, index)
    buf = io.BytesIO()
    write_raw_codes(synthesize_depth_codes(pose, index), buf)
    return rgb, buf.getvalue()


@dataclass(frozen=True)
class FrameSource:
    """What the server streams: poses, a starting condition and a synthesizer."""

    poses: Sequence[Pose]
    condition: Condition
    synthesizer: FrameSynthesizer = default_synthesizer


# ---------------------------------------------------------------------------
# Wire helpers.


def send_message(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(LENGTH_PREFIX.pack(len(payload)) + payload)


class _FrameStream:
    """Reads length-prefixed messages and tracks the consumed byte offset."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self.offset = 0

    def _read_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = self._sock.recv(min(65536, n - len(buf)))
            if not chunk:
                break
            buf.extend(chunk)
        self.offset += len(buf)
        return bytes(buf)

    def next_message(self) -> Optional[bytes]:
        start = self.offset
        header = self._read_exact(LENGTH_PREFIX.size)
        if not header:
            return None  # clean end of session
        if len(header) < LENGTH_PREFIX.size:
            raise ProtocolError(f"stream truncated inside a length prefix at byte offset {start}", start)
        (length,) = LENGTH_PREFIX.unpack(header)
        if length == 0 or length > MAX_MESSAGE_BYTES:
            raise ProtocolError(f"corrupt length prefix ({length}) at byte offset {start}", start)
        body = self._read_exact(length)
        if len(body) < length:
            raise ProtocolError(f"stream truncated inside a frame body at byte offset {start}", start)
        return body


def recv_message(sock: socket.socket) -> Optional[bytes]:
    """Read one length-prefixed message; None on clean end-of-stream."""
    return _FrameStream(sock).next_message()


# ---------------------------------------------------------------------------
# Server.


@dataclass
class ServeSummary:
    frames_sent: int
    control_changes: int
    ignored_controls: int
    final_condition: Condition


class FrameServer:
    """Streams one frame message per pose at the configured rate to one client."""

    def __init__(self, source: FrameSource, config: SessionConfig):
        if not source.poses:
            raise ValueError("cannot serve an empty pose list")
        self._source = source
        self._config = config
        self._listener: Optional[socket.socket] = None
        self.address: Optional[tuple[str, int]] = None

    def open(self) -> "FrameServer":
        host, port = parse_endpoint(self._config.endpoint)
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            listener.bind((host, port))
        except OSError:
            listener.close()
            raise
        listener.listen(1)
        listener.settimeout(60.0)
        self._listener = listener
        self.address = listener.getsockname()[:2]
        return self

    def close(self) -> None:
        if self._listener is not None:
            self._listener.close()
            self._listener = None

    def serve(self) -> ServeSummary:
        if self._listener is None:
            self.open()
        conn, _ = self._listener.accept()
        conn.settimeout(60.0)
        try:
            return self._stream(conn)
        finally:
            conn.close()
            self.close()

    def _stream(self, conn: socket.socket) -> ServeSummary:
        fps = self._config.fps
        condition = self._source.condition
        synthesize = self._source.synthesizer
        sent = changes = ignored = 0
        start = time.monotonic()
        for index, pose in enumerate(self._source.poses):
            _sleep_until(start + index / fps)
            condition, new_changes, new_ignored = self._drain_controls(conn, condition)
            changes += new_changes
            ignored += new_ignored
            rgb, depth = synthesize(pose, condition, index)
            message = FrameMessage(index, index / fps, pose, condition, rgb, depth)
            try:
                send_message(conn, message.to_wire())
            except (BrokenPipeError, ConnectionResetError):
                break  # client went away: clean termination with partial count
            sent += 1
        return ServeSummary(sent, changes, ignored, condition)

    @staticmethod
    def _drain_controls(conn: socket.socket, condition: Condition) -> tuple[Condition, int, int]:
        changes = ignored = 0
        while select.select([conn], [], [], 0)[0]:
            payload = recv_message(conn)
            if payload is None:
                break
            try:
                update = json.loads(payload)["set"]
                condition = Condition(
                    str(update.get("time_of_day", condition.time_of_day)),
                    str(update.get("weather", condition.weather)),
                )
                changes += 1
            except (KeyError, TypeError, ValueError):
                ignored += 1  # unknown or invalid combination: keep the current one
        return condition, changes, ignored


def _sleep_until(deadline: float) -> None:
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            return
        time.sleep(min(remaining, 0.05))


def serve_sequence(source: FrameSource, config: SessionConfig) -> ServeSummary:
    """Bind, stream the whole source to one client and return the summary."""
    return FrameServer(source, config).serve()


# ---------------------------------------------------------------------------
# Client.


@dataclass
class CaptureResult:
    persisted: int
    raw_dir: Path


_SENTINEL = object()


class _RawWriter:
    """Writer half of the client: drains the queue and persists raw payloads."""

    def __init__(self, raw_dir: Path, buffer: "queue.Queue"):
        self._raw_dir = raw_dir
        self._buffer = buffer
        self.count = 0
        self.error: Optional[BaseException] = None

    def run(self) -> None:
        arrival = 0
        while True:
            item = self._buffer.get()
            if item is _SENTINEL:
                return
            arrival += 1
            if self.error is not None:
                continue  # already failed; discard to keep the receiver unblocked
            try:
                name = f"{_frame_name_index(item, arrival - 1):06d}.json"
                _write_raw_frame(self._raw_dir / name, item)
                self.count += 1
            except OSError as err:
                self.error = err


def _frame_name_index(payload: bytes, arrival_index: int) -> int:
    # raw persistence must never drop data: fall back to arrival order
    try:
        index = json.loads(payload).get("frame_index")
        return index if isinstance(index, int) and index >= 0 else arrival_index
    except (ValueError, AttributeError):
        return arrival_index


def _write_raw_frame(path: Path, payload: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(payload)


def capture_client(
    config: SessionConfig,
    controls: Optional[Sequence[tuple[int, dict]]] = None,
    queue_capacity: Optional[int] = None,
) -> CaptureResult:
    """Receive a whole session and persist every message verbatim.

    ``controls`` optionally schedules in-band control messages: each
    ``(after_n_received, message)`` pair is sent to the server once that many
    frames have arrived. No image decoding happens on the receive path.
    """
    if config.out_dir is None:
        raise ValueError("capture_client requires SessionConfig.out_dir")
    host, port = parse_endpoint(config.endpoint)
    raw_dir = Path(config.out_dir) / "raw"
    raw_dir.mkdir(parents=True, exist_ok=True)

    capacity = queue_capacity if queue_capacity is not None else max(1, int(4 * config.fps))
    buffer: queue.Queue = queue.Queue(maxsize=capacity)
    writer = _RawWriter(raw_dir, buffer)
    thread = threading.Thread(target=writer.run, name="navforge-raw-writer", daemon=True)
    thread.start()

    pending = sorted(controls or [], key=lambda item: item[0])
    received = 0
    try:
        with socket.create_connection((host, port), timeout=60.0) as sock:
            stream = _FrameStream(sock)
            while True:
                if writer.error is not None:
                    break
                payload = stream.next_message()
                if payload is None:
                    break
                received += 1
                try:
                    buffer.put_nowait(payload)
                except queue.Full:
                    raise QueueOverflowError(
                        f"receive buffer overflow after {received} frames (capacity {capacity})"
                    )
                while pending and pending[0][0] <= received:
                    _, message = pending.pop(0)
                    send_message(sock, canonical_json(message))
    except (ProtocolError, QueueOverflowError) as err:
        _shutdown_writer(buffer, thread)
        err.persisted = writer.count
        raise
    _shutdown_writer(buffer, thread)
    if writer.error is not None:
        raise WriteAbortError(
            f"persisting frames failed after {writer.count} durable frames: {writer.error}",
            persisted=writer.count,
        ) from writer.error
    return CaptureResult(persisted=writer.count, raw_dir=raw_dir)


def _shutdown_writer(buffer: "queue.Queue", thread: threading.Thread) -> None:
    while thread.is_alive():
        try:
            buffer.put(_SENTINEL, timeout=0.05)
            break
        except queue.Full:
            continue
    thread.join(timeout=30.0)


def loopback_capture(
    source: FrameSource,
    config: SessionConfig,
    controls: Optional[Sequence[tuple[int, dict]]] = None,
    queue_capacity: Optional[int] = None,
) -> tuple[ServeSummary, CaptureResult]:
    """Run server and client against each other on an ephemeral local port."""
    server = FrameServer(source, replace(config, endpoint=config.endpoint or "127.0.0.1:0")).open()
    host, port = server.address
    box: dict = {}

    def run_server() -> None:
        try:
            box["summary"] = server.serve()
        except BaseException as err:  # surfaced after the client finishes
            box["error"] = err

    thread = threading.Thread(target=run_server, name="navforge-frame-server", daemon=True)
    thread.start()
    try:
        result = capture_client(
            replace(config, endpoint=f"{host}:{port}"), controls=controls, queue_capacity=queue_capacity
        )
    finally:
        thread.join(timeout=60.0)
        server.close()
    if "error" in box:
        raise box["error"]
    return box["summary"], result


# ---------------------------------------------------------------------------
# Post-processing.


@dataclass
class ProcessReport:
    ok: int
    rejected: int


def postprocess_frames(
    raw_dir: Union[str, Path],
    out_dir: Union[str, Path],
    codec: DepthCodecParams = DepthCodecParams(),
) -> ProcessReport:
    """Split raw frame JSON files into rgb/, depth/, poses.csv and frames.jsonl.

    Malformed frames are copied to ``rejected/`` and counted, never fatal.
    Deterministic and idempotent: rerunning over the same raw directory
    rewrites byte-identical outputs.
    """
    raw = Path(raw_dir)
    if not raw.is_dir():
        raise FileNotFoundError(f"raw frame directory not found: {raw}")
    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)

    ok = rejected = 0
    pose_rows: list[str] = []
    manifest: list[bytes] = []
    for path in sorted(raw.glob("*.json")):
        try:
            row, line = _postprocess_one(path, out, codec)
        except Exception:
            rejected_dir = out / "rejected"
            rejected_dir.mkdir(exist_ok=True)
            shutil.copyfile(path, rejected_dir / path.name)
            rejected += 1
            continue
        pose_rows.append(row)
        manifest.append(line)
        ok += 1

    with open(out / "poses.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(TRAJECTORY_HEADER + "\n")
        fh.writelines(row + "\n" for row in pose_rows)
    with open(out / "frames.jsonl", "wb") as fh:
        for line in manifest:
            fh.write(line + b"\n")
    return ProcessReport(ok=ok, rejected=rejected)


def _postprocess_one(path: Path, out: Path, codec: DepthCodecParams) -> tuple[str, bytes]:
    message = FrameMessage.from_wire(path.read_bytes())
    if not message.rgb_png.startswith(PNG_SIGNATURE):
        raise ValueError(f"{path.name}: rgb payload is not a PNG")
    name = f"{message.frame_index:06d}"

    with open(out / "rgb" / f"{name}.png", "wb") as fh:
        fh.write(message.rgb_png)
    codes = read_raw_codes(message.depth_raw)
    millimeters = to_millimeter_map(decode_depth_map(DepthMap(codes), codec))
    write_depth_png(millimeters, str(out / "depth" / f"{name}.png"))

    row = format_pose_row(message.frame_index, message.timestamp, message.pose)
    line = canonical_json(
        {
            "frame_index": message.frame_index,
            "timestamp": message.timestamp,
            "rgb": f"rgb/{name}.png",
            "depth": f"depth/{name}.png",
            "pose": pose_to_dict(message.pose),
            "condition": message.condition.to_dict(),
        }
    )
    return row, line
