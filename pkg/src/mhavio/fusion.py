"""Fusion of visual and inertial features.

``mha`` is multi-head scaled dot-product self-attention over modality tokens
(a multiplicative interaction); ``concat`` and ``soft`` are the additive
baselines: a linear layer over the concatenation, optionally preceded by
per-modality sigmoid re-weighting masks.  Every strategy maps (B, F_v), (B, F_i) to
(B, model_width).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .nn import Linear, Module, glorot_uniform

STRATEGIES = ("mha", "concat", "soft")


@dataclass
class FusionConfig:
    """Widths of the fusion block.

    The concatenation ``[b_v, b_i]`` is cut into ``num_tokens`` equal tokens
    of width ``model_width``; with the default two tokens and equal feature
    widths, one token is visual and one inertial.
    """

    strategy: str = "mha"
    visual_width: int = 16
    inertial_width: int = 16
    model_width: int = 16
    num_heads: int = 2
    head_width: int = 8
    num_tokens: int = 2
    bias: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown fusion strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if min(self.visual_width, self.inertial_width, self.model_width, self.num_heads,
               self.head_width, self.num_tokens) < 1:
            raise ConfigError("fusion widths and counts must be positive")
        if self.strategy == "mha" and self.in_width != self.num_tokens * self.model_width:
            raise ConfigError(
                f"concatenated width {self.in_width} must equal num_tokens * model_width "
                f"= {self.num_tokens} * {self.model_width}")

    @property
    def in_width(self) -> int:
        return self.visual_width + self.inertial_width


def paper_scale_fusion_config(strategy: str) -> FusionConfig:
    """Fusion widths at the published network scale (visual 540 + inertial 30)."""
    return FusionConfig(strategy, visual_width=540, inertial_width=30, model_width=285,
                        num_heads=8, head_width=64, num_tokens=2)


def attention(q, k, v, return_weights: bool = False):
    """softmax(q k^T / sqrt(d_k)) v over the last two axes."""
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention width mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    d_k = q.shape[-1]
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = ad.matmul(q, k.transpose(*axes)) * (1.0 / np.sqrt(d_k))
    weights = ad.softmax(scores, axis=-1)
    out = ad.matmul(weights, v)
    return (out, weights) if return_weights else out


def tokenize(b_v, b_i, num_tokens: int) -> Tensor:
    x = ad.concat([ad.as_tensor(b_v), ad.as_tensor(b_i)], axis=-1)
    B, F = x.shape
    if F % num_tokens:
        raise DimensionError(f"feature width {F} not divisible into {num_tokens} tokens")
    return x.reshape(B, num_tokens, F // num_tokens)


class MHAFusion(Module):
    def __init__(self, cfg: FusionConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        n, N, d = cfg.num_heads, cfg.model_width, cfg.head_width
        for name in ("w_q", "w_k", "w_v"):
            self.add_parameter(name, glorot_uniform(rng, (n, N, d), N, d))
        self.add_parameter("w_h", glorot_uniform(rng, (n * d, N), n * d, N))
        if cfg.bias:
            for name in ("b_q", "b_k", "b_v"):
                self.add_parameter(name, np.zeros((n, 1, d)))
            self.add_parameter("b_h", np.zeros(N))
        self.last_weights: np.ndarray | None = None

    def attend(self, tokens: Tensor) -> Tensor:
        """(B, T, N) tokens -> (B, T, N) per-token outputs."""
        cfg = self.cfg
        if tokens.ndim != 3 or tokens.shape[2] != cfg.model_width:
            raise DimensionError(f"tokens must be (B, T, {cfg.model_width}), got {tokens.shape}")
        if self.w_h.shape[0] != cfg.num_heads * cfg.head_width:
            raise ConfigError("output projection width != num_heads * head_width")
        B, T, _ = tokens.shape
        x = tokens.reshape(B, 1, T, cfg.model_width)
        q, k, v = (ad.matmul(x, w) for w in (self.w_q, self.w_k, self.w_v))
        if cfg.bias:
            q, k, v = q + self.b_q, k + self.b_k, v + self.b_v
        heads, weights = attention(q, k, v, return_weights=True)       # (B, n, T, d_k)
        self.last_weights = weights.data
        h = heads.transpose(0, 2, 1, 3).reshape(B, T, cfg.num_heads * cfg.head_width)
        out = ad.matmul(h, self.w_h)
        return out + self.b_h if cfg.bias else out

    def forward(self, b_v, b_i) -> Tensor:
        tokens = tokenize(b_v, b_i, self.cfg.num_tokens)
        return self.attend(tokens).mean(axis=1)


class ConcatFusion(Module):
    def __init__(self, cfg: FusionConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.proj = Linear(cfg.in_width, cfg.model_width, rng)

    def forward(self, b_v, b_i) -> Tensor:
        return self.proj(_concat_checked(b_v, b_i, self.cfg))


class SoftFusion(Module):
    """Deterministic soft re-weighting followed by a linear layer.

    Each modality gets its own sigmoid mask, ``s_v = sigmoid(W_v b_v + a_v)``
    and ``s_i = sigmoid(W_i b_i + a_i)``; ``y = W [s_v * b_v, s_i * b_i] + a``.
    Keeping the gates per modality keeps the block additive in (b_v, b_i).
    """

    def __init__(self, cfg: FusionConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.gate_v = Linear(cfg.visual_width, cfg.visual_width, rng)
        self.gate_i = Linear(cfg.inertial_width, cfg.inertial_width, rng)
        self.proj = Linear(cfg.in_width, cfg.model_width, rng)

    def gates(self, b_v, b_i) -> tuple[Tensor, Tensor]:
        _concat_checked(b_v, b_i, self.cfg)
        return ad.sigmoid(self.gate_v(ad.as_tensor(b_v))), ad.sigmoid(self.gate_i(ad.as_tensor(b_i)))

    def forward(self, b_v, b_i) -> Tensor:
        s_v, s_i = self.gates(b_v, b_i)
        return self.proj(ad.concat([s_v * b_v, s_i * b_i], axis=-1))


def _concat_checked(b_v, b_i, cfg: FusionConfig) -> Tensor:
    b_v, b_i = ad.as_tensor(b_v), ad.as_tensor(b_i)
    if b_v.shape[-1] != cfg.visual_width or b_i.shape[-1] != cfg.inertial_width:
        raise DimensionError(
            f"fusion expects widths ({cfg.visual_width}, {cfg.inertial_width}), got ({b_v.shape[-1]}, {b_i.shape[-1]})")
    return ad.concat([b_v, b_i], axis=-1)


def make_fusion(cfg: FusionConfig, rng: np.random.Generator) -> Module:
    return {"mha": MHAFusion, "concat": ConcatFusion, "soft": SoftFusion}[cfg.strategy](cfg, rng)


def fuse_mha(b_v, b_i, block: MHAFusion) -> Tensor:
    return block(b_v, b_i)


def fuse_concat(b_v, b_i, block: ConcatFusion) -> Tensor:
    return block(b_v, b_i)


def fuse_soft(b_v, b_i, block: SoftFusion) -> Tensor:
    return block(b_v, b_i)


def count_fusion_params(strategy: str, cfg: FusionConfig) -> int:
    """Closed-form number of learned parameters in a fusion block."""
    F, N = cfg.in_width, cfg.model_width
    if strategy == "mha":
        n, d = cfg.num_heads, cfg.head_width
        count = 3 * n * N * d + n * d * N
        return count + (3 * n * d + N if cfg.bias else 0)
    if strategy == "concat":
        return F * N + N
    if strategy == "soft":
        Fv, Fi = cfg.visual_width, cfg.inertial_width
        return Fv * Fv + Fv + Fi * Fi + Fi + F * N + N
    raise ConfigError(f"unknown fusion strategy {strategy!r}")


def interaction_witness(f, u, v) -> np.ndarray:
    """f(u, v) - f(u, 0) - f(0, v) + f(0, 0); identically zero for additive fusion."""
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    zu, zv = np.zeros_like(u), np.zeros_like(v)
    with ad.no_grad():
        return (f(u, v).data - f(u, zv).data - f(zu, v).data + f(zu, zv).data)
