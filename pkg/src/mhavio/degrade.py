"""Seeded sensor-corruption injectors and the named degradation suites.

Vision injectors act on the second frame of an affected window (the image
that arrives at the end of the interval); inertial injectors act on the
window's IMU block.  Nothing here touches poses or targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .dataset import ImageFrame, SequenceDataset
from .errors import ConfigError

KINDS = ("occlusion", "noise_blur", "missing_image", "imu_noise_bias", "missing_imu")
VISION_KINDS = ("occlusion", "noise_blur", "missing_image")
INERTIAL_KINDS = ("imu_noise_bias", "missing_imu")
SUITES = ("nominal", "inertial", "vision", "all")

# Occlusion mask of 200x200 px was specified on raw KITTI frames (376 x 1241);
# suite defaults rescale it to the configured image size.
KITTI_RAW_SIZE = (376, 1241)
OCCLUSION_SIDE = 200
PIXEL_LOW, PIXEL_HIGH = -0.5, 0.5
BLUR_TRUNCATE = 3.0

# Suite defaults (rates are fractions of affected windows).
SUITE_DEFAULTS = {
    "occlusion": {"rate": 0.3, "params": {"value": 0.0}},
    "noise_blur": {"rate": 0.3, "params": {"fraction": 0.05, "sigma": 1.0}},
    "missing_image": {"rate": 0.1, "params": {}},
    "imu_noise_bias": {"rate": 0.5, "params": {"accel_std": 0.5, "gyro_bias": [0.02, 0.02, 0.02]}},
    "missing_imu": {"rate": 0.2, "params": {"drop_fraction": 0.3}},
}


@dataclass
class DegradationSpec:
    kind: str
    rate: float = 1.0
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown degradation kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigError(f"rate must lie in [0, 1], got {self.rate}")
        for key, val in self.params.items():
            if not np.all(np.isfinite(np.asarray(val, dtype=float))):
                raise ConfigError(f"parameter {key} is not finite")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "rate": self.rate, "params": dict(self.params), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        return cls(d["kind"], float(d.get("rate", 1.0)), dict(d.get("params", {})), int(d.get("seed", 0)))


# -- frame injectors ------------------------------------------------------------------

def occlude(frame: ImageFrame, spec: DegradationSpec, rng: np.random.Generator) -> ImageFrame:
    """Overwrite one mask-sized block at a random location."""
    c, h, w = frame.pixels.shape
    mh, mw = spec.params.get("mask", (OCCLUSION_SIDE, OCCLUSION_SIDE))
    if mh > h or mw > w or mh < 0 or mw < 0:
        raise ConfigError(f"occlusion mask {mh}x{mw} does not fit a {h}x{w} image")
    out = np.array(frame.pixels)
    if mh and mw:
        r = int(rng.integers(0, h - mh + 1))
        q = int(rng.integers(0, w - mw + 1))
        out[:, r:r + mh, q:q + mw] = spec.params.get("value", 0.0)
    return ImageFrame(frame.timestamp, out)


def noise_and_blur(frame: ImageFrame, spec: DegradationSpec, rng: np.random.Generator) -> ImageFrame:
    """Salt-and-pepper replacement, then a separable Gaussian blur."""
    fraction = float(spec.params.get("fraction", 0.0))
    sigma = float(spec.params.get("sigma", 0.0))
    if not 0.0 <= fraction <= 1.0 or sigma < 0:
        raise ConfigError("noise_blur needs fraction in [0, 1] and sigma >= 0")
    out = np.array(frame.pixels)
    if fraction > 0:
        _, h, w = out.shape
        hit = rng.random((h, w)) < fraction
        salt = rng.random((h, w)) < 0.5
        out[:, hit & salt] = PIXEL_HIGH
        out[:, hit & ~salt] = PIXEL_LOW
    if sigma > 0:
        for axis in (1, 2):
            out = gaussian_filter1d(out, sigma, axis=axis, mode="reflect", truncate=BLUR_TRUNCATE)
    return ImageFrame(frame.timestamp, out)


# -- IMU block injectors ------------------------------------------------------------------

def imu_noise_bias(block: np.ndarray, spec: DegradationSpec, rng: np.random.Generator) -> np.ndarray:
    """White noise on the accelerometer, constant bias on the gyroscope."""
    std = float(spec.params.get("accel_std", 0.0))
    bias = np.asarray(spec.params.get("gyro_bias", (0.0, 0.0, 0.0)), dtype=np.float64)
    if std < 0:
        raise ConfigError("accel_std must be >= 0")
    out = np.array(block, dtype=np.float64)
    if std > 0:
        out[:, :3] += rng.normal(0.0, std, size=out[:, :3].shape)
    out[:, 3:] += bias
    return out


def drop_imu(block: np.ndarray, spec: DegradationSpec, rng: np.random.Generator) -> np.ndarray:
    """Lose readings; each lost reading is held at the previous value (length preserved)."""
    n = len(block)
    count = _drop_count(spec, n)
    if count >= n:
        raise ConfigError(f"cannot drop {count} of {n} IMU readings")
    out = np.array(block, dtype=np.float64)
    if count:
        dropped = np.sort(rng.choice(np.arange(1, n), size=count, replace=False))
        for i in dropped:
            out[i] = out[i - 1]
    return out


def _drop_count(spec: DegradationSpec, n: int) -> int:
    if "drop_count" in spec.params:
        return int(spec.params["drop_count"])
    return int(round(float(spec.params.get("drop_fraction", 0.0)) * n))


# -- dataset level --------------------------------------------------------------------------

def _affected(n_windows: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    return np.flatnonzero(rng.random(n_windows) < rate)


def drop_images(dataset: SequenceDataset, spec: DegradationSpec, rng: np.random.Generator) -> SequenceDataset:
    """Affected windows see their first frame again in place of the missing second one."""
    if spec.rate >= 1.0:
        raise ConfigError("missing_image rate must be < 1")
    hit = _affected(len(dataset), spec.rate, rng)
    if not len(hit):
        return dataset
    frames = np.array(dataset.frames)
    frames[hit, 1] = frames[hit, 0]
    return dataset.replace(frames=frames)


def apply_degradation(dataset: SequenceDataset, spec: DegradationSpec) -> SequenceDataset:
    """Apply one injector to a seeded random ``rate`` fraction of windows."""
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "missing_image":
        return drop_images(dataset, spec, rng)
    hit = _affected(len(dataset), spec.rate, rng)
    if spec.kind in ("occlusion", "noise_blur"):
        op = occlude if spec.kind == "occlusion" else noise_and_blur
        frames = np.array(dataset.frames)
        for i in hit:
            frame = ImageFrame(float(dataset.frame_times[i, 1]), frames[i, 1])
            frames[i, 1] = op(frame, spec, rng).pixels
        return dataset.replace(frames=frames) if len(hit) else dataset
    op = imu_noise_bias if spec.kind == "imu_noise_bias" else drop_imu
    imu = np.array(dataset.imu)
    for i in hit:
        imu[i] = op(imu[i], spec, rng)
    return dataset.replace(imu=imu) if len(hit) else dataset


def default_mask(image_hw: tuple[int, int]) -> tuple[int, int]:
    h, w = image_hw
    return (max(1, round(OCCLUSION_SIDE * h / KITTI_RAW_SIZE[0])),
            max(1, round(OCCLUSION_SIDE * w / KITTI_RAW_SIZE[1])))


def suite_specs(suite: str, image_hw: tuple[int, int], seed: int, overrides: dict | None = None) -> list[DegradationSpec]:
    """The injector list of a named suite with per-injector seeds derived from ``seed``."""
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; expected one of {SUITES}")
    kinds = {"nominal": (), "vision": VISION_KINDS, "inertial": INERTIAL_KINDS,
             "all": VISION_KINDS + INERTIAL_KINDS}[suite]
    overrides = overrides or {}
    specs = []
    for kind in kinds:
        base = SUITE_DEFAULTS[kind]
        params = dict(base["params"])
        if kind == "occlusion":
            params["mask"] = default_mask(image_hw)
        params.update(overrides.get(kind, {}).get("params", {}))
        rate = overrides.get(kind, {}).get("rate", base["rate"])
        kind_seed = int(np.random.SeedSequence([seed, KINDS.index(kind)]).generate_state(1)[0])
        specs.append(DegradationSpec(kind, rate, params, kind_seed))
    return specs


def build_degraded_suite(dataset: SequenceDataset, suite: str, seed: int = 0,
                         overrides: dict | None = None) -> SequenceDataset:
    specs = suite_specs(suite, dataset.image_shape[1:], seed, overrides)
    out = dataset
    for spec in specs:
        out = apply_degradation(out, spec)
    meta = dict(dataset.meta)
    meta["suite"] = suite
    meta["degradations"] = [s.to_dict() for s in specs]
    return out.replace(meta=meta)
