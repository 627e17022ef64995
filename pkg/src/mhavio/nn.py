"""Layers, parameter containers and the Adam optimizer."""

from __future__ import annotations

import copy
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError

# Glorot/Xavier uniform: U(-a, a) with a = GLOROT_GAIN * sqrt(6 / (fan_in + fan_out))
GLOROT_GAIN = 1.0


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = GLOROT_GAIN * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Container of named parameters and child modules.

    Parameter names are dotted paths (``core.l0.fwd.w_ih``); their order is
    the attribute assignment order, which makes flattening deterministic.
    """

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", False)

    def __setattr__(self, key, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def add_parameter(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        setattr(self, name, t)
        return t

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        """Replace every parameter; validates the whole mapping before mutating."""
        own = OrderedDict(self.named_parameters())
        missing = [n for n in own if n not in state]
        unexpected = [n for n in state if n not in own]
        if missing or unexpected:
            raise ContractError(f"state mismatch: missing={missing} unexpected={unexpected}")
        bad = [f"{n}: expected {own[n].shape}, got {np.shape(state[n])}"
               for n in own if tuple(np.shape(state[n])) != own[n].shape]
        if bad:
            raise DimensionError("shape mismatch for " + "; ".join(bad))
        for n, p in own.items():
            p.data = np.array(state[n], dtype=ad.DTYPE, copy=True)

    def clone(self) -> "Module":
        return copy.deepcopy(self)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.add_parameter("weight", glorot_uniform(rng, (in_features, out_features), in_features, out_features))
        self.bias = self.add_parameter("bias", np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        super().__init__()
        self.stride, self.padding = stride, padding
        fan_in, fan_out = in_ch * kernel * kernel, out_ch * kernel * kernel
        self.add_parameter("weight", glorot_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in, fan_out))
        self.add_parameter("bias", np.zeros(out_ch))

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator):
        super().__init__()
        self.p = p
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        return ad.dropout(x, self.p, self.rng, self.training)


class BatchNorm2d(Module):
    """Per-channel batch normalization with running statistics for eval mode."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.add_parameter("gamma", np.ones(channels))
        self.add_parameter("beta", np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x: Tensor) -> Tensor:
        shape = (1, -1, 1, 1)
        if self.training:
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            centered = x - mu
            var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu.data.ravel()
            self.running_var = (1 - m) * self.running_var + m * var.data.ravel()
            xn = centered / ad.sqrt(var + self.eps)
        else:
            xn = (x - self.running_mean.reshape(shape)) / np.sqrt(self.running_var.reshape(shape) + self.eps)
        return xn * self.gamma.reshape(shape) + self.beta.reshape(shape)


# -- LSTM --------------------------------------------------------------------------

class LSTMCell(Module):
    """One direction of one LSTM layer; gate order (input, forget, cell, output)."""

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator):
        super().__init__()
        self.input_size, self.hidden_size = input_size, hidden_size
        h4 = 4 * hidden_size
        self.add_parameter("w_ih", glorot_uniform(rng, (input_size, h4), input_size, h4))
        self.add_parameter("w_hh", glorot_uniform(rng, (hidden_size, h4), hidden_size, h4))
        self.add_parameter("bias", np.zeros(h4))

    def step(self, x_proj: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        """Advance one step given the precomputed input projection ``x @ w_ih + bias``."""
        H = self.hidden_size
        gates = x_proj + ad.matmul(h, self.w_hh)
        i = ad.sigmoid(gates[:, 0:H])
        f = ad.sigmoid(gates[:, H:2 * H])
        g = ad.tanh(gates[:, 2 * H:3 * H])
        o = ad.sigmoid(gates[:, 3 * H:4 * H])
        c_new = f * c + i * g
        h_new = o * ad.tanh(c_new)
        return h_new, c_new

    def run(self, x_seq: Tensor, h0=None, c0=None, reverse: bool = False):
        """Run over ``x_seq`` (T, B, F); returns per-step hiddens in input order and final (h, c)."""
        T, B, F = x_seq.shape
        if F != self.input_size:
            raise DimensionError(f"LSTM expects input width {self.input_size}, got {F}")
        proj = ad.linear(x_seq, self.w_ih, self.bias)
        h = h0 if h0 is not None else Tensor(np.zeros((B, self.hidden_size)))
        c = c0 if c0 is not None else Tensor(np.zeros((B, self.hidden_size)))
        outs: list[Tensor] = [None] * T  # type: ignore[list-item]
        order = range(T - 1, -1, -1) if reverse else range(T)
        for t in order:
            h, c = self.step(proj[t], h, c)
            outs[t] = h
        return outs, (h, c)


@dataclass
class LSTMState:
    """Final (h, c) for every layer and direction, indexed [layer][direction]."""

    h: list = field(default_factory=list)
    c: list = field(default_factory=list)

    def detached(self) -> "LSTMState":
        return LSTMState([[None if t is None else t.detach() for t in row] for row in self.h],
                         [[None if t is None else t.detach() for t in row] for row in self.c])

    def forward_only(self) -> "LSTMState":
        """Keep forward-direction states; backward directions restart from zero."""
        return LSTMState([[row[0]] + [None] * (len(row) - 1) for row in self.h],
                         [[row[0]] + [None] * (len(row) - 1) for row in self.c])


class LSTM(Module):
    """Multi-layer, optionally bidirectional LSTM over (time, batch, feature) input.

    The bidirectional output concatenates forward and backward hidden states
    at every step, so the output width is ``2 * hidden_size``.
    """

    def __init__(self, input_size: int, hidden_size: int, num_layers: int, rng: np.random.Generator,
                 bidirectional: bool = True):
        super().__init__()
        self.input_size, self.hidden_size = input_size, hidden_size
        self.num_layers, self.bidirectional = num_layers, bidirectional
        self.num_directions = 2 if bidirectional else 1
        self.layers: list[list[LSTMCell]] = []
        width = input_size
        for layer in range(num_layers):
            cells = []
            for d, tag in enumerate(("fwd", "bwd")[: self.num_directions]):
                cell = LSTMCell(width, hidden_size, rng)
                setattr(self, f"l{layer}_{tag}", cell)
                cells.append(cell)
            self.layers.append(cells)
            width = hidden_size * self.num_directions

    @property
    def output_size(self) -> int:
        return self.hidden_size * self.num_directions

    def forward(self, x_seq: Tensor, state: LSTMState | None = None):
        """Return (outputs (T, B, dirs*H), final LSTMState).

        ``state`` seeds the initial (h, c) per layer/direction; zeros if None.
        """
        if x_seq.ndim != 3:
            raise DimensionError(f"LSTM input must be (time, batch, feature), got {x_seq.shape}")
        final = LSTMState()
        layer_in = x_seq
        for li, cells in enumerate(self.layers):
            hs, cs, dir_outs = [], [], []
            for d, cell in enumerate(cells):
                h0 = state.h[li][d] if state is not None else None  # None entries start at zero
                c0 = state.c[li][d] if state is not None else None
                outs, (h, c) = cell.run(layer_in, h0, c0, reverse=(d == 1))
                dir_outs.append(ad.stack(outs, axis=0))
                hs.append(h)
                cs.append(c)
            final.h.append(hs)
            final.c.append(cs)
            layer_in = dir_outs[0] if len(dir_outs) == 1 else ad.concat(dir_outs, axis=2)
        return layer_in, final


# -- Adam --------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray | None], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[list[np.ndarray], AdamState]:
    """One Adam update with bias correction; returns new arrays and new state."""
    if len(grads) != len(params) or any(g is None for g in grads):
        missing = [i for i, g in enumerate(grads) if g is None]
        raise ContractError(f"adam_step needs one gradient per parameter; missing indices {missing}")
    if not state.m:
        state = AdamState(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])
    t = state.step + 1
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(t, new_m, new_v)


class Adam:
    """Stateful wrapper applying :func:`adam_step` to tensors in place."""

    def __init__(self, params: list[Tensor], lr: float = 5e-5, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = AdamState()

    def step(self) -> None:
        if self.lr == 0.0:
            return
        arrays, self.state = adam_step([p.data for p in self.params], [p.grad for p in self.params],
                                       self.state, self.lr, self.betas[0], self.betas[1], self.eps)
        for p, a in zip(self.params, arrays):
            p.data = a

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
