"""End-to-end odometry network, its pose loss and the training loop.

Per window, the visual and inertial features are fused into ``y_t``; a core
LSTM runs over the ``y_t`` of a segment and a linear head regresses the
relative pose ``(tx, ty, tz, yaw, pitch, roll)``.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import save_params
from .dataset import SequenceDataset, segment
from .encoders import (InertialEncoder, InertialEncoderConfig, VisionEncoder, VisionEncoderConfig,
                       flownet_vision_config)
from .errors import ConfigError, ContractError, DimensionError, TrainingError
from .fusion import FusionConfig, make_fusion
from .geometry import wrap_angle
from .nn import LSTM, Adam, Linear, LSTMState, Module

log = logging.getLogger(__name__)

POSE_DIM = 6


@dataclass
class CoreModelConfig:
    hidden: int = 1000
    layers: int = 2
    bidirectional: bool = True

    def __post_init__(self):
        if self.hidden < 1 or self.layers < 1:
            raise ConfigError("core LSTM needs hidden >= 1 and layers >= 1")


@dataclass
class ModelConfig:
    vision: VisionEncoderConfig = field(default_factory=VisionEncoderConfig)
    inertial: InertialEncoderConfig = field(default_factory=lambda: InertialEncoderConfig(hidden=8, layers=1))
    fusion: FusionConfig = field(default_factory=FusionConfig)
    core: CoreModelConfig = field(default_factory=lambda: CoreModelConfig(hidden=16, layers=1))
    seed: int = 0

    def __post_init__(self):
        if self.fusion.visual_width != self.vision.feature_width:
            raise ConfigError(f"fusion.visual_width {self.fusion.visual_width} != vision feature width "
                              f"{self.vision.feature_width}")
        if self.fusion.inertial_width != self.inertial.feature_width:
            raise ConfigError(f"fusion.inertial_width {self.fusion.inertial_width} != inertial feature width "
                              f"{self.inertial.feature_width}")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            return cls(vision=VisionEncoderConfig(**d.get("vision", {})),
                       inertial=InertialEncoderConfig(**d.get("inertial", {"hidden": 8, "layers": 1})),
                       fusion=FusionConfig(**d.get("fusion", {})),
                       core=CoreModelConfig(**d.get("core", {"hidden": 16, "layers": 1})),
                       seed=int(d.get("seed", 0)))
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from exc

    def with_strategy(self, strategy: str) -> "ModelConfig":
        d = self.to_dict()
        d["fusion"]["strategy"] = strategy
        return ModelConfig.from_dict(d)


def toy_model_config(strategy: str = "mha", seed: int = 0) -> ModelConfig:
    """Miniature network for 8 x 16 images (seconds per epoch on one core)."""
    return ModelConfig(
        vision=VisionEncoderConfig(),
        inertial=InertialEncoderConfig(hidden=8, layers=1, input_scale=[0.1, 0.1, 0.1, 1.0, 1.0, 1.0]),
        fusion=FusionConfig(strategy, visual_width=16, inertial_width=16, model_width=16, num_heads=2, head_width=8),
        core=CoreModelConfig(hidden=16, layers=1, bidirectional=True),
        seed=seed)


def paper_model_config(strategy: str = "mha") -> ModelConfig:
    """Published layer sizes (17-layer CNN at 184 x 608, 2x15 IMU-LSTM, 2x1000 core)."""
    vision = flownet_vision_config()
    inertial = InertialEncoderConfig(hidden=15, layers=2, bidirectional=True)
    total = vision.feature_width + inertial.feature_width
    fusion = FusionConfig(strategy, visual_width=vision.feature_width, inertial_width=inertial.feature_width,
                          model_width=total // 2, num_heads=8, head_width=64, num_tokens=2)
    return ModelConfig(vision, inertial, fusion, CoreModelConfig(1000, 2, True))


@dataclass
class TrainConfig:
    beta: float = 1000.0
    lr: float = 5e-5
    batch_size: int = 8
    epochs: int = 80
    seed: int = 0
    min_len: int = 5
    max_len: int = 7
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    target_loss: float | None = None

    def __post_init__(self):
        if self.beta <= 0:
            raise ConfigError("beta must be > 0")
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("lr >= 0, batch_size >= 1 and epochs >= 0 required")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class VIOModel(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.vision = VisionEncoder(cfg.vision, rng)
        self.inertial = InertialEncoder(cfg.inertial, rng)
        self.fusion = make_fusion(cfg.fusion, rng)
        self.core = LSTM(cfg.fusion.model_width, cfg.core.hidden, cfg.core.layers, rng,
                         bidirectional=cfg.core.bidirectional)
        self.head = Linear(self.core.output_size, POSE_DIM, rng)

    def features(self, frames, imu) -> Tensor:
        """Fused feature per window: (B, 2, C, H, W), (B, n, 6) -> (B, model_width)."""
        b_v = self.vision(frames)
        b_i = self.inertial(imu)
        return self.fusion(b_v, b_i)

    def core_forward(self, y_seq: Tensor, state: LSTMState | None = None) -> tuple[Tensor, LSTMState]:
        """(T, B, model_width) fused features -> (T, B, 6) poses and the final core state."""
        out, final = self.core(y_seq, state)
        return self.head(out), final

    def forward_sequence(self, frames, imu, state: LSTMState | None = None) -> tuple[Tensor, LSTMState]:
        """Poses for (T, B, ...) windows; ``state`` threads the core LSTM across calls."""
        frames = np.asarray(frames, dtype=np.float64)
        imu = np.asarray(imu, dtype=np.float64)
        if frames.ndim != 6 or imu.ndim != 4 or frames.shape[:2] != imu.shape[:2]:
            raise DimensionError(f"expected (T, B, 2, C, H, W) frames and (T, B, n, 6) imu, "
                                 f"got {frames.shape} and {imu.shape}")
        T, B = frames.shape[:2]
        y = self.features(frames.reshape(T * B, *frames.shape[2:]), imu.reshape(T * B, *imu.shape[2:]))
        return self.core_forward(y.reshape(T, B, -1), state)

    def predict(self, dataset: SequenceDataset, chunk_len: int | None = None,
                batch_size: int | None = None) -> np.ndarray:
        """Relative poses (W, 6) for a whole sequence in eval mode.

        The sequence is cut into consecutive chunks of ``chunk_len`` windows;
        the forward-direction core state is carried from chunk to chunk and
        any backward direction restarts inside each chunk.  ``batch_size``
        only controls how many windows are encoded per call.
        """
        was_training = self.training
        self.eval()
        try:
            with ad.no_grad():
                W = len(dataset)
                step = batch_size or W
                y = np.concatenate([
                    self.features(dataset.frames[i:i + step], dataset.imu[i:i + step]).data
                    for i in range(0, W, step)])
                chunk = chunk_len or W
                preds, state = [], None
                for lo in range(0, W, chunk):
                    out, final = self.core_forward(Tensor(y[lo:lo + chunk, None]), state)
                    preds.append(out.data[:, 0])
                    state = final.forward_only()
                return np.concatenate(preds)
        finally:
            self.train(was_training)

    def sample_loss(self, item, beta: float = 1000.0) -> Tensor:
        """Loss of one segment (mini-batch of one); ``item = (dataset, window indices)``."""
        dataset, idx = item
        idx = np.asarray(idx)
        preds, _ = self.forward_sequence(dataset.frames[idx][:, None], dataset.imu[idx][:, None])
        return pose_loss(preds, dataset.targets[idx][:, None], beta)


def pose_loss(pred, target, beta) -> Tensor:
    """Batch-mean over time-summed ``|dz|^2 + beta |dpsi|^2``.

    ``pred``/``target`` are (T, M, 6) (or (T, 6) for a single sample).  The
    orientation residual is wrapped to (-pi, pi] before squaring; the wrap
    offset is a constant, so the gradient is that of the plain difference.
    ``beta`` may be a float or a Tensor.
    """
    pred = ad.as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.shape[-1] != POSE_DIM:
        raise DimensionError(f"poses must have {POSE_DIM} components, got {pred.shape[-1]}")
    if pred.ndim == 2:
        pred = pred.reshape(pred.shape[0], 1, POSE_DIM)
        target = target.reshape(target.shape[0], 1, POSE_DIM)
    M = pred.shape[1]
    raw = pred.data[..., 3:] - target[..., 3:]
    wrap_offset = raw - wrap_angle(raw)
    dz = pred[..., :3] - target[..., :3]
    dpsi = pred[..., 3:] - target[..., 3:] - wrap_offset
    trans = (dz * dz).sum()
    rot = (dpsi * dpsi).sum()
    return (trans + beta * rot) * (1.0 / M)


def loss(pred, target, beta: float = 1000.0) -> Tensor:
    """Pose loss over lists of per-step Pose6D (one sample) or (T, M, 6) arrays."""
    if isinstance(pred, (list, tuple)):
        if not isinstance(target, (list, tuple)) or len(pred) != len(target):
            raise ContractError("prediction and target sequences differ in length")
        pred = ad.stack([ad.as_tensor(p) for p in pred])
        target = np.stack([np.asarray(t, dtype=np.float64) for t in target])
    return pose_loss(pred, target, beta)


def _batch_loss(model: VIOModel, dataset: SequenceDataset, segs: Sequence[range], beta: float) -> Tensor:
    """Eq.-style loss of a mini-batch of segments; equal-length segments run together."""
    by_len: dict[int, list[range]] = {}
    for s in segs:
        by_len.setdefault(len(s), []).append(s)
    total = None
    for length, group in sorted(by_len.items()):
        idx = np.array([list(s) for s in group]).T           # (T, b)
        preds, _ = model.forward_sequence(dataset.frames[idx], dataset.imu[idx])
        part = pose_loss(preds, dataset.targets[idx], beta) * float(len(group))
        total = part if total is None else total + part
    return total * (1.0 / len(segs))


def dataset_loss(model: VIOModel, dataset: SequenceDataset, segs: Sequence[range], beta: float) -> float:
    was_training = model.training
    model.eval()
    try:
        with ad.no_grad():
            return float(_batch_loss(model, dataset, segs, beta).data)
    finally:
        model.train(was_training)


@dataclass
class TrainResult:
    model: VIOModel
    log: list
    initial_loss: float
    final_loss: float
    segments: list


def train(dataset: SequenceDataset, train_cfg: TrainConfig, model_cfg: ModelConfig,
          model: VIOModel | None = None, log_path: str | Path | None = None) -> TrainResult:
    """Seeded Adam training over random-length segments of ``dataset``.

    Per-epoch records ``{"epoch", "loss", "wall_time"}`` are returned and, if
    ``log_path`` is given, appended to it as JSON lines.
    """
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    segs = segment(dataset, train_cfg.min_len, train_cfg.max_len, train_cfg.seed)
    if not segs:
        raise ContractError(f"dataset of {len(dataset)} windows is shorter than min_len={train_cfg.min_len}")
    model = model or VIOModel(model_cfg)
    opt = Adam(model.parameters(), lr=train_cfg.lr)
    rng = np.random.default_rng(train_cfg.seed)
    initial = dataset_loss(model, dataset, segs, train_cfg.beta)
    records: list[dict] = []
    log_fh = open(log_path, "w") if log_path else None
    t0 = time.perf_counter()
    step = 0
    try:
        for epoch in range(1, train_cfg.epochs + 1):
            model.train()
            order = rng.permutation(len(segs))
            losses = []
            for b, lo in enumerate(range(0, len(order), train_cfg.batch_size)):
                batch = [segs[i] for i in order[lo:lo + train_cfg.batch_size]]
                opt.zero_grad()
                value = _batch_loss(model, dataset, batch, train_cfg.beta)
                step += 1
                if not np.isfinite(value.data):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b} (optimizer step {step})")
                value.backward()
                opt.step()
                losses.append(float(value.data))
            rec = {"epoch": epoch, "loss": float(np.mean(losses)), "wall_time": time.perf_counter() - t0}
            records.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if train_cfg.checkpoint_every and epoch % train_cfg.checkpoint_every == 0 and train_cfg.checkpoint_dir:
                save_params(Path(train_cfg.checkpoint_dir) / f"epoch_{epoch:04d}.json", model.state_dict(),
                            {"epoch": epoch, "model": model_cfg.to_dict()})
            if train_cfg.target_loss is not None and rec["loss"] <= train_cfg.target_loss:
                log.info("target loss reached at epoch %d", epoch)
                break
    finally:
        if log_fh:
            log_fh.close()
    final = dataset_loss(model, dataset, segs, train_cfg.beta)
    model.eval()
    return TrainResult(model, records, initial, final, segs)


def predict_trajectory(dataset: SequenceDataset, model: VIOModel, chunk_len: int | None = None,
                       batch_size: int | None = None):
    """Deterministic (MAP) trajectory: relative predictions composed from the first pose."""
    from .evaluation import TrajectoryEstimate

    rel = model.predict(dataset, chunk_len=chunk_len, batch_size=batch_size)
    return TrajectoryEstimate(dataset.relative_to_absolute(rel), relatives=rel)
