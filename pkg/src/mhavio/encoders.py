"""Visual (stacked-pair CNN) and inertial (bidirectional LSTM) feature extractors."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import read_checkpoint
from .dataset import ImageFrame
from .errors import ConfigError, ContractError, DimensionError
from .nn import LSTM, BatchNorm2d, Conv2d, Dropout, Module


@dataclass
class VisionEncoderConfig:
    """Conv stack over a channel-stacked image pair.

    ``padding`` entries default to ``kernel // 2``.  The feature vector is the
    flattened output of the last (non-activated) convolution.
    """

    channels: list = field(default_factory=lambda: [8, 8, 8, 2])
    kernels: list = field(default_factory=lambda: [3, 3, 3, 3])
    strides: list = field(default_factory=lambda: [1, 2, 2, 1])
    paddings: list | None = None
    input_size: tuple = (8, 16)
    image_channels: int = 3
    batch_norm: bool = False
    dropout: float = 0.0

    def __post_init__(self):
        self.input_size = tuple(self.input_size)
        if self.paddings is None:
            self.paddings = [k // 2 for k in self.kernels]
        if not (len(self.channels) == len(self.kernels) == len(self.strides) == len(self.paddings)) or not self.channels:
            raise ConfigError("vision encoder needs equal-length, non-empty channels/kernels/strides/paddings")
        if min(self.feature_map_size) < 1:
            raise ConfigError(f"input {self.input_size} vanishes through the conv stack")

    @property
    def num_layers(self) -> int:
        return len(self.channels)

    @property
    def feature_map_size(self) -> tuple[int, int]:
        h, w = self.input_size
        for k, s, p in zip(self.kernels, self.strides, self.paddings):
            h = (h + 2 * p - k) // s + 1
            w = (w + 2 * p - k) // s + 1
        return h, w

    @property
    def feature_width(self) -> int:
        h, w = self.feature_map_size
        return self.channels[-1] * h * w


def flownet_vision_config() -> VisionEncoderConfig:
    """17-layer FlowNetS-style schedule at 184 x 608 input."""
    channels = [64, 128, 256, 256, 512, 512, 512, 512, 1024, 1024, 1024, 1024, 512, 512, 256, 256, 64]
    kernels = [7, 5, 5, 3, 3, 3, 3, 3, 3, 3, 3, 3, 3, 3, 3, 3, 3]
    strides = [2, 2, 2, 1, 2, 1, 2, 1, 2, 1, 1, 1, 1, 1, 1, 1, 1]
    return VisionEncoderConfig(channels, kernels, strides, None, (184, 608), 3, batch_norm=True, dropout=0.0)


class VisionEncoder(Module):
    def __init__(self, cfg: VisionEncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.convs: list[Conv2d] = []
        self.norms: list[BatchNorm2d | None] = []
        in_ch = 2 * cfg.image_channels
        for i, (c, k, s, p) in enumerate(zip(cfg.channels, cfg.kernels, cfg.strides, cfg.paddings)):
            conv = Conv2d(in_ch, c, k, rng, stride=s, padding=p)
            setattr(self, f"conv{i}", conv)
            self.convs.append(conv)
            last = i == cfg.num_layers - 1
            if cfg.batch_norm and not last:
                bn = BatchNorm2d(c)
                setattr(self, f"bn{i}", bn)
                self.norms.append(bn)
            else:
                self.norms.append(None)
            in_ch = c
        self.drop = Dropout(cfg.dropout, rng)

    @property
    def feature_width(self) -> int:
        return self.cfg.feature_width

    def forward(self, pairs) -> Tensor:
        """(B, 2, C, H, W) image pairs -> (B, feature_width)."""
        pairs = ad.as_tensor(pairs)
        B = pairs.shape[0]
        expect = (2, self.cfg.image_channels) + self.cfg.input_size
        if pairs.ndim != 5 or pairs.shape[1:] != expect:
            raise DimensionError(f"vision encoder expects (B, {', '.join(map(str, expect))}), got {pairs.shape}")
        x = pairs.reshape(B, 2 * self.cfg.image_channels, *self.cfg.input_size)
        for i, (conv, bn) in enumerate(zip(self.convs, self.norms)):
            x = conv(x)
            if i < len(self.convs) - 1:
                if bn is not None:
                    x = bn(x)
                x = ad.relu(x)
        x = self.drop(x)
        return x.reshape(B, -1)


def encode_vision(u_v1: ImageFrame, u_v2: ImageFrame, encoder: VisionEncoder) -> Tensor:
    if u_v1.pixels.shape != u_v2.pixels.shape:
        raise DimensionError(f"frame sizes differ: {u_v1.pixels.shape} vs {u_v2.pixels.shape}")
    pair = np.stack([u_v1.pixels, u_v2.pixels])[None]
    return encoder(pair)[0]


@dataclass
class InertialEncoderConfig:
    hidden: int = 15
    layers: int = 2
    bidirectional: bool = True
    input_scale: list = field(default_factory=lambda: [1.0] * 6)

    def __post_init__(self):
        if self.hidden < 1 or self.layers < 1:
            raise ConfigError("inertial encoder needs hidden >= 1 and layers >= 1")
        if len(self.input_scale) != 6:
            raise ConfigError("input_scale needs 6 entries")

    @property
    def feature_width(self) -> int:
        return self.hidden * (2 if self.bidirectional else 1)


class InertialEncoder(Module):
    def __init__(self, cfg: InertialEncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.lstm = LSTM(6, cfg.hidden, cfg.layers, rng, bidirectional=cfg.bidirectional)
        self._scale = np.asarray(cfg.input_scale, dtype=np.float64)

    @property
    def feature_width(self) -> int:
        return self.cfg.feature_width

    def sequence(self, imu) -> Tensor:
        """(B, n, 6) readings -> per-step outputs (n, B, feature_width)."""
        imu = ad.as_tensor(imu)
        if imu.ndim != 3 or imu.shape[2] != 6:
            raise DimensionError(f"inertial encoder expects (B, n, 6) readings, got {imu.shape}")
        x = (imu * self._scale).transpose(1, 0, 2)
        out, _ = self.lstm(x)
        return out

    def forward(self, imu) -> Tensor:
        """Window feature: the bidirectional output at the last reading."""
        return self.sequence(imu)[-1]


def encode_inertial(u_i: np.ndarray, encoder: InertialEncoder) -> Tensor:
    return encoder(np.asarray(u_i, dtype=np.float64)[None])[0]


def load_pretrained(module: Module, path: str | Path, prefix: str = "") -> None:
    """Replace ``module``'s parameters from a checkpoint.

    Entries are looked up as ``prefix + name``.  The file is parsed and every
    entry validated before anything is assigned, so a failed load leaves the
    module untouched.
    """
    params, _ = read_checkpoint(path)
    own = dict(module.named_parameters())
    missing = [n for n in own if prefix + n not in params]
    if missing:
        raise ContractError(f"checkpoint {path} lacks parameters: {', '.join(missing)}")
    bad = [f"{n} (expected {own[n].shape}, got {params[prefix + n].shape})"
           for n in own if params[prefix + n].shape != own[n].shape]
    if bad:
        raise DimensionError(f"checkpoint {path} shape mismatch: {'; '.join(bad)}")
    module.load_state_dict({n: params[prefix + n] for n in own})
