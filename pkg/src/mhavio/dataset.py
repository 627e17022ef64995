"""Sequence datasets: ingestion, synthesis, segmentation and on-disk layout.

A :class:`SequenceDataset` stores everything per window (one window = two
consecutive images, the IMU readings between them and the relative pose
target), so that corruptions can touch a single window without affecting
its neighbours.

Dataset directory layout (``manifest.json`` names the other files)::

    manifest.json     format/version, counts, image shape, source config, suite
    frames.npy        (W, 2, C, H, W) float64 image pairs in [-0.5, 0.5]
    frame_times.npy   (W, 2) float64 timestamps
    imu.csv           header ``timestamp,ax,ay,az,wx,wy,wz``; W * imu_per_frame rows
    poses.txt         KITTI odometry format, W + 1 lines of 12 floats
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import geometry
from .errors import ConfigError, FormatError

log = logging.getLogger(__name__)

IMU_HEADER = ["timestamp", "ax", "ay", "az", "wx", "wy", "wz"]
# FlowNet-style centring; uint8 pixels map to v / 255 - 0.5
PIXEL_OFFSET = 0.5
GRAVITY = 9.81
MANIFEST_FORMAT = "mhavio-dataset"
MANIFEST_VERSION = 1

KITTI_SPLIT = {
    "train": ["00", "01", "02", "05", "08", "09"],
    "test": ["04", "06", "07", "10"],
    "excluded": ["03"],
}


@dataclass(frozen=True)
class ImageFrame:
    timestamp: float
    pixels: np.ndarray  # (C, H, W)


@dataclass(frozen=True)
class ImuReading:
    timestamp: float
    linear_acceleration: np.ndarray
    angular_velocity: np.ndarray


@dataclass(frozen=True)
class SampleWindow:
    image_pair: tuple[ImageFrame, ImageFrame]
    imu_block: np.ndarray        # (imu_per_frame, 6): ax, ay, az, wx, wy, wz
    imu_timestamps: np.ndarray   # (imu_per_frame,)
    target: np.ndarray           # Pose6D


@dataclass
class DatasetConfig:
    """Ingestion settings; also the schema of dataset config files."""

    image_dir: str | None = None
    imu_file: str | None = None
    pose_file: str | None = None
    image_size: tuple[int, int] = (184, 608)
    channels: int = 3
    imu_per_frame: int = 10
    frame_rate: float = 10.0
    min_len: int = 5
    max_len: int = 7
    seed: int = 0
    split: dict = field(default_factory=lambda: {k: list(v) for k, v in KITTI_SPLIT.items()})

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown dataset config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.image_size = tuple(cfg.image_size)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.imu_per_frame < 1:
            raise ConfigError("imu_per_frame must be >= 1")
        if len(self.image_size) != 2 or min(self.image_size) < 1:
            raise ConfigError(f"bad image_size {self.image_size}")
        if not 2 <= self.min_len <= self.max_len:
            raise ConfigError("segmentation bounds need 2 <= min_len <= max_len")


class SequenceDataset:
    """Immutable per-window storage of one driving sequence."""

    def __init__(self, frames: np.ndarray, frame_times: np.ndarray, imu: np.ndarray, imu_times: np.ndarray,
                 poses: np.ndarray, meta: dict | None = None):
        W = len(frames)
        if frames.ndim != 5 or frames.shape[1] != 2:
            raise FormatError(f"frames must be (W, 2, C, H, W), got {frames.shape}")
        if imu.shape[:1] != (W,) or imu.ndim != 3 or imu.shape[2] != 6:
            raise FormatError(f"imu must be ({W}, n, 6), got {imu.shape}")
        if poses.shape != (W + 1, 4, 4):
            raise FormatError(f"expected {W + 1} poses, got {poses.shape}")
        self.frames = _frozen(frames)
        self.frame_times = _frozen(frame_times)
        self.imu = _frozen(imu)
        self.imu_times = _frozen(imu_times)
        self.poses = _frozen(poses)
        self.targets = _frozen(geometry.relative_sequence(poses))
        self.meta = dict(meta or {})

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def imu_per_frame(self) -> int:
        return self.imu.shape[1]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.frames.shape[2:])

    def window(self, i: int) -> SampleWindow:
        return SampleWindow(
            (ImageFrame(float(self.frame_times[i, 0]), self.frames[i, 0]),
             ImageFrame(float(self.frame_times[i, 1]), self.frames[i, 1])),
            self.imu[i], self.imu_times[i], self.targets[i])

    def windows(self) -> list[SampleWindow]:
        return [self.window(i) for i in range(len(self))]

    def path_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.poses[:, :3, 3], axis=0), axis=1).sum())

    def replace(self, frames=None, imu=None, meta=None) -> "SequenceDataset":
        """Copy with some streams swapped; targets always derive from the same poses."""
        return SequenceDataset(
            np.array(self.frames if frames is None else frames),
            np.array(self.frame_times), np.array(self.imu if imu is None else imu), np.array(self.imu_times),
            np.array(self.poses), self.meta if meta is None else meta)

    def subset(self, indices: Sequence[int]) -> "SequenceDataset":
        """Contiguous run of windows as its own dataset."""
        idx = np.asarray(indices)
        if len(idx) and np.any(np.diff(idx) != 1):
            raise ConfigError("subset indices must be contiguous")
        lo, hi = int(idx[0]), int(idx[-1]) + 1
        return SequenceDataset(np.array(self.frames[lo:hi]), np.array(self.frame_times[lo:hi]),
                               np.array(self.imu[lo:hi]), np.array(self.imu_times[lo:hi]),
                               np.array(self.poses[lo:hi + 1]), self.meta)

    def relative_to_absolute(self, relatives: np.ndarray) -> np.ndarray:
        """Compose per-step relative poses starting from this dataset's first pose."""
        return geometry.compose_trajectory(relatives, self.poses[0])


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


# -- file parsing -------------------------------------------------------------------

def read_pose_file(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"pose file not found: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            vals = [float(v) for v in line.split()]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: non-numeric pose entry") from exc
        if len(vals) != 12:
            raise FormatError(f"{path}:{lineno}: expected 12 values, got {len(vals)}")
        T = np.eye(4)
        T[:3, :] = np.reshape(vals, (3, 4))
        geometry.check_rigid(T, where=f" at {path}:{lineno}")
        rows.append(T)
    if not rows:
        raise FormatError(f"{path}: no poses")
    return np.array(rows)


def write_pose_file(path: str | Path, poses: np.ndarray) -> None:
    lines = [" ".join(f"{v:.17g}" for v in T[:3, :].ravel()) for T in poses]
    Path(path).write_text("\n".join(lines) + "\n")


def read_imu_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Return (timestamps (K,), readings (K, 6))."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"IMU file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != IMU_HEADER:
            raise FormatError(f"{path}: header must be {','.join(IMU_HEADER)}")
        try:
            data = np.array([[float(v) for v in row] for row in reader if row], dtype=np.float64)
        except ValueError as exc:
            raise FormatError(f"{path}: non-numeric IMU entry") from exc
    if data.size == 0:
        raise FormatError(f"{path}: no IMU readings")
    if data.shape[1] != 7 or not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: every row needs 7 finite values")
    if np.any(np.diff(data[:, 0]) < 0):
        raise FormatError(f"{path}: timestamps are not ordered")
    return data[:, 0], data[:, 1:]


def write_imu_csv(path: str | Path, times: np.ndarray, readings: np.ndarray) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(IMU_HEADER)
        for t, r in zip(times.ravel(), readings.reshape(-1, 6)):
            w.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in r])


def select_imu_block(times: np.ndarray, readings: np.ndarray, t0: float, t1: float, n: int,
                     where: str = "") -> tuple[np.ndarray, np.ndarray]:
    """Pick ``n`` readings for the interval [t0, t1).

    Each of ``n`` evenly spaced target times takes the nearest reading inside
    the interval.  Fewer than ``n`` readings are padded by repeating the last
    one; an empty interval falls back to the reading nearest ``t0``.
    """
    lo, hi = np.searchsorted(times, t0, "left"), np.searchsorted(times, t1, "left")
    if hi - lo >= n:
        cand = times[lo:hi]
        targets = t0 + (t1 - t0) * np.arange(n) / n
        idx = lo + np.argmin(np.abs(cand[None, :] - targets[:, None]), axis=1)
        return times[idx], readings[idx]
    if hi > lo:
        idx = np.arange(lo, hi)
        log.warning("IMU underrun%s: %d of %d readings, repeating last", where, hi - lo, n)
    else:
        nearest = int(np.argmin(np.abs(times - t0)))
        idx = np.array([nearest])
        log.warning("no IMU readings%s; using nearest reading at t=%.6f", where, times[nearest])
    idx = np.concatenate([idx, np.full(n - len(idx), idx[-1])])
    return times[idx], readings[idx]


def load_images(image_dir: str | Path, size: tuple[int, int], channels: int = 3) -> list[np.ndarray]:
    from PIL import Image

    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise FileNotFoundError(f"image directory not found: {image_dir}")
    files = sorted((p for p in image_dir.glob("*.png") if p.stem.isdigit()), key=lambda p: int(p.stem))
    if not files:
        raise FormatError(f"{image_dir}: no numerically named PNG files")
    h, w = size
    out = []
    for p in files:
        with Image.open(p) as im:
            im = im.convert("RGB" if channels == 3 else "L")
            if im.size != (w, h):
                im = im.resize((w, h), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float64) / 255.0 - PIXEL_OFFSET
        out.append(arr.transpose(2, 0, 1) if arr.ndim == 3 else arr[None])
    return out


def load_sequence(image_dir, imu_file, pose_file, config: DatasetConfig | None = None) -> SequenceDataset:
    """Read a KITTI-odometry-style sequence and synchronize IMU to image intervals.

    Image timestamps come from ``times.txt`` in ``image_dir`` when present,
    otherwise from ``config.frame_rate``.
    """
    config = config or DatasetConfig()
    for p in (image_dir, imu_file, pose_file):
        if not Path(p).exists():
            raise FileNotFoundError(f"missing input: {p}")
    poses = read_pose_file(pose_file)
    imu_t, imu_r = read_imu_csv(imu_file)
    images = load_images(image_dir, config.image_size, config.channels)
    if len(images) != len(poses):
        raise FormatError(f"{len(images)} images but {len(poses)} poses")
    times_file = Path(image_dir) / "times.txt"
    if times_file.is_file():
        frame_t = np.array([float(v) for v in times_file.read_text().split()])
        if len(frame_t) != len(images):
            raise FormatError(f"{times_file}: {len(frame_t)} timestamps for {len(images)} images")
    else:
        frame_t = np.arange(len(images)) / config.frame_rate
    n = config.imu_per_frame
    W = len(images) - 1
    blocks, block_t = np.empty((W, n, 6)), np.empty((W, n))
    for k in range(W):
        block_t[k], blocks[k] = select_imu_block(imu_t, imu_r, frame_t[k], frame_t[k + 1], n, f" in window {k}")
    frames = np.array([[images[k], images[k + 1]] for k in range(W)])
    pair_t = np.stack([frame_t[:-1], frame_t[1:]], axis=1)
    meta = {"source": "ingest", "image_dir": str(image_dir), "imu_file": str(imu_file),
            "pose_file": str(pose_file), "config": config_to_dict(config)}
    return SequenceDataset(frames, pair_t, blocks, block_t, poses, meta)


def config_to_dict(cfg) -> dict:
    d = asdict(cfg)
    return json.loads(json.dumps(d))


# -- segmentation ---------------------------------------------------------------------

def segment(dataset, min_len: int, max_len: int, seed: int) -> list[range]:
    """Cover all windows with consecutive sub-trajectories of random length.

    Lengths are drawn uniformly from [min_len, max_len]; segments are laid
    end to end, and the last one is shifted back so that it ends on the
    final window (it may overlap its predecessor).
    """
    if not 2 <= min_len <= max_len:
        raise ConfigError(f"need 2 <= min_len <= max_len, got {min_len}, {max_len}")
    total = dataset if isinstance(dataset, int) else len(dataset)
    if total < min_len:
        log.warning("dataset of %d windows is shorter than min_len=%d; no segments", total, min_len)
        return []
    rng = np.random.default_rng(seed)
    segments, pos = [], 0
    while pos < total:
        length = min(int(rng.integers(min_len, max_len + 1)), total)
        start = min(pos, total - length)
        segments.append(range(start, start + length))
        pos = start + length
    return segments


# -- synthesis ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Scripted planar motion seen by a downward-looking camera over a textured floor."""

    path: str = "figure8"        # line | arc | figure8
    num_windows: int = 64
    speed: float = 1.0           # m/s (line, arc); amplitude scale for figure8
    turn_rate: float = 0.2       # rad/s (arc); angular frequency for figure8
    noise: float = 0.0           # IMU noise std (accel m/s^2 and gyro rad/s)
    image_size: tuple[int, int] = (8, 16)
    channels: int = 3
    pixel_size: float = 0.25     # metres per pixel on the floor
    imu_per_frame: int = 10
    frame_rate: float = 10.0
    gravity: float = GRAVITY

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.image_size = tuple(cfg.image_size)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.path not in ("line", "arc", "figure8"):
            raise ConfigError(f"unknown path shape {self.path!r}")
        if self.num_windows < 1 or self.imu_per_frame < 1 or self.frame_rate <= 0:
            raise ConfigError("num_windows, imu_per_frame and frame_rate must be positive")
        if self.path == "arc" and self.turn_rate == 0:
            raise ConfigError("arc needs a nonzero turn_rate")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")


def path_state(cfg: SynthConfig, t):
    """Position, velocity, acceleration (world, (..., 3)), yaw and yaw rate at times ``t``."""
    t = np.asarray(t, dtype=np.float64)
    z = np.zeros_like(t)
    v, w = cfg.speed, cfg.turn_rate
    if cfg.path == "line":
        pos = np.stack([v * t, z, z], -1)
        vel = np.stack([v + z, z, z], -1)
        acc = np.stack([z, z, z], -1)
        yaw, yaw_rate = z, z
    elif cfg.path == "arc":
        r = v / w
        pos = np.stack([r * np.sin(w * t), r * (1 - np.cos(w * t)), z], -1)
        vel = np.stack([v * np.cos(w * t), v * np.sin(w * t), z], -1)
        acc = np.stack([-v * w * np.sin(w * t), v * w * np.cos(w * t), z], -1)
        yaw, yaw_rate = w * t, w + z
    else:
        # lemniscate of Gerono: x = A sin(wt), y = A sin(wt) cos(wt)
        A = v / w
        s1, c1, s2, c2 = np.sin(w * t), np.cos(w * t), np.sin(2 * w * t), np.cos(2 * w * t)
        pos = np.stack([A * s1, 0.5 * A * s2, z], -1)
        vel = np.stack([A * w * c1, A * w * c2, z], -1)
        acc = np.stack([-A * w * w * s1, -2 * A * w * w * s2, z], -1)
        yaw = np.arctan2(vel[..., 1], vel[..., 0])
        yaw_rate = (vel[..., 0] * acc[..., 1] - vel[..., 1] * acc[..., 0]) / (vel[..., 0] ** 2 + vel[..., 1] ** 2)
    return pos, vel, acc, yaw, yaw_rate


def _floor_texture(rng: np.random.Generator, channels: int):
    """Smooth random floor pattern, values in [0, 1]."""
    k = 4
    freq = rng.uniform(0.6, 2.5, size=(channels, k, 2)) * rng.choice([-1, 1], size=(channels, k, 2))
    phase = rng.uniform(0, 2 * np.pi, size=(channels, k))
    amp = rng.uniform(0.5, 1.0, size=(channels, k))
    amp /= amp.sum(axis=1, keepdims=True)

    def texture(x, y):
        arg = freq[..., 0, None, None] * x + freq[..., 1, None, None] * y + phase[..., None, None]
        return 0.5 + 0.5 * np.sum(amp[..., None, None] * np.sin(arg), axis=1)

    return texture


def render_view(texture, pos: np.ndarray, yaw: float, size: tuple[int, int], pixel_size: float) -> np.ndarray:
    """Quantized 8-bit view of the floor centred on ``pos`` and rotated by ``yaw``."""
    h, w = size
    u = (np.arange(w) - w / 2 + 0.5) * pixel_size   # forward
    v = (np.arange(h) - h / 2 + 0.5) * pixel_size   # left
    uu, vv = np.meshgrid(u, v)
    c, s = np.cos(yaw), np.sin(yaw)
    x = pos[0] + c * uu - s * vv
    y = pos[1] + s * uu + c * vv
    img = np.round(np.clip(texture(x, y), 0.0, 1.0) * 255.0)
    return img / 255.0 - PIXEL_OFFSET


def synthesize(config: SynthConfig, seed: int) -> SequenceDataset:
    """Deterministic toy sequence with exact ground truth."""
    config.validate()
    rng = np.random.default_rng(seed)
    texture = _floor_texture(rng, config.channels)
    W, n = config.num_windows, config.imu_per_frame
    frame_t = np.arange(W + 1) / config.frame_rate
    pos, _, _, yaw, _ = path_state(config, frame_t)
    poses = np.tile(np.eye(4), (W + 1, 1, 1))
    for k in range(W + 1):
        poses[k, :3, :3] = geometry.euler_to_matrix(yaw[k], 0.0, 0.0)
        poses[k, :3, 3] = pos[k]
    views = np.array([render_view(texture, pos[k], yaw[k], config.image_size, config.pixel_size)
                      for k in range(W + 1)])
    frames = np.stack([views[:-1], views[1:]], axis=1)
    imu_t = frame_t[:-1, None] + np.arange(n)[None, :] / (config.frame_rate * n)
    imu = imu_from_path(config, imu_t)
    if config.noise > 0:
        imu = imu + rng.normal(0.0, config.noise, size=imu.shape)
    pair_t = np.stack([frame_t[:-1], frame_t[1:]], axis=1)
    meta = {"source": "synth", "seed": seed, "config": config_to_dict(config)}
    return SequenceDataset(frames, pair_t, imu, imu_t, poses, meta)


def imu_from_path(config: SynthConfig, t: np.ndarray) -> np.ndarray:
    """Noise-free body-frame specific force and angular velocity at times ``t``."""
    _, _, acc, yaw, yaw_rate = path_state(config, t)
    c, s = np.cos(yaw), np.sin(yaw)
    fx, fy, fz = acc[..., 0], acc[..., 1], acc[..., 2] + config.gravity
    body_ax = c * fx + s * fy
    body_ay = -s * fx + c * fy
    z = np.zeros_like(yaw)
    return np.stack([body_ax, body_ay, fz, z, z, yaw_rate + z], -1)


# -- dataset directories ----------------------------------------------------------------

def save_dataset(dataset: SequenceDataset, out_dir: str | Path, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "frames.npy", np.asarray(dataset.frames))
    np.save(out / "frame_times.npy", np.asarray(dataset.frame_times))
    write_imu_csv(out / "imu.csv", dataset.imu_times, dataset.imu)
    write_pose_file(out / "poses.txt", dataset.poses)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "num_windows": len(dataset),
        "imu_per_frame": dataset.imu_per_frame,
        "image_shape": list(dataset.image_shape),
        "path_length_m": dataset.path_length(),
        "files": {"frames": "frames.npy", "frame_times": "frame_times.npy", "imu": "imu.csv",
                  "poses": "poses.txt"},
        "meta": dataset.meta,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(path: str | Path) -> SequenceDataset:
    path = Path(path)
    mpath = path / "manifest.json" if path.is_dir() else path
    if not mpath.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {mpath}")
    root = mpath.parent
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: invalid JSON") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{mpath}: not a dataset manifest")
    files = manifest["files"]
    frames = np.load(root / files["frames"])
    frame_t = np.load(root / files["frame_times"])
    imu_t, imu_r = read_imu_csv(root / files["imu"])
    n = int(manifest["imu_per_frame"])
    W = int(manifest["num_windows"])
    if len(imu_t) != W * n:
        raise FormatError(f"{root / files['imu']}: expected {W * n} readings, found {len(imu_t)}")
    poses = read_pose_file(root / files["poses"])
    meta = dict(manifest.get("meta", {}))
    if "suite" in manifest:
        meta["suite"] = manifest["suite"]
    return SequenceDataset(frames, frame_t, imu_r.reshape(W, n, 6), imu_t.reshape(W, n), poses, meta)
