"""Dot-product attention blocks over video feature maps.

Feature maps are tensors shaped ``(T, HW, C)`` or, batched, ``(B, T, HW, C)``.
Every block adds its output to a residual path, and its output projection
starts at zero so a freshly built block is the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numeric_core as nc
from .errors import ConfigError, DimensionError
from .numeric_core import Parameter, Tensor

INIT_STD = 0.02


def normal_param(name: str, shape, rng: np.random.Generator, std: float = INIT_STD) -> Parameter:
    return Parameter(name, rng.normal(0.0, std, size=shape))


def zero_param(name: str, shape) -> Parameter:
    return Parameter(name, np.zeros(shape))


@dataclass
class ProjectionSet:
    """Query, key, value and output projections of one attention block."""

    w_q: Parameter
    w_k: Parameter
    w_v: Parameter
    w_o: Parameter

    @classmethod
    def create(cls, prefix: str, channels: int, rng: np.random.Generator, std: float = INIT_STD) -> "ProjectionSet":
        c = (channels, channels)
        return cls(
            normal_param(f"{prefix}.w_q", c, rng, std),
            normal_param(f"{prefix}.w_k", c, rng, std),
            normal_param(f"{prefix}.w_v", c, rng, std),
            zero_param(f"{prefix}.w_o", c),
        )

    def parameters(self) -> list[Parameter]:
        return [self.w_q, self.w_k, self.w_v, self.w_o]

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]


class ChannelNorm:
    """Standardize the channel axis, then apply a learned scale and shift."""

    def __init__(self, prefix: str, channels: int):
        self.gamma = Parameter(f"{prefix}.gamma", np.ones(channels))
        self.beta = Parameter(f"{prefix}.beta", np.zeros(channels))

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def __call__(self, y: Tensor) -> Tensor:
        shape = y.shape
        lead = (1,) * (len(shape) - 1)
        g = nc.broadcast_to(nc.reshape(self.gamma.tensor(), lead + (shape[-1],)), shape)
        b = nc.broadcast_to(nc.reshape(self.beta.tensor(), lead + (shape[-1],)), shape)
        return nc.add(nc.mul(nc.standardize_last(y), g), b)


class TemporalPositionalEmbedding:
    """Per-timestep embedding added to the temporal attention input.

    ``kind="learned"`` trains a ``(t_max, C)`` table; ``kind="sinusoidal"``
    uses the fixed sine/cosine table and is excluded from training.
    """

    def __init__(self, name: str, t_max: int, channels: int, rng: np.random.Generator, kind: str = "learned"):
        if kind == "learned":
            self.e = normal_param(name, (t_max, channels), rng)
        elif kind == "sinusoidal":
            self.e = Parameter(name, sinusoidal_table(t_max, channels), trainable=False)
        else:
            raise ConfigError(f"unknown positional embedding kind {kind!r}")
        self.kind = kind

    @property
    def t_max(self) -> int:
        return self.e.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.e]


def sinusoidal_table(t_max: int, channels: int) -> np.ndarray:
    pos = np.arange(t_max)[:, None]
    i = np.arange(channels)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / channels)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# ---------------------------------------------------------------- kernels

def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """softmax(q k^T / sqrt(C)) v over the last two axes.

    q is ``(..., n_q, C)``, k and v are ``(..., n_k, C)`` with equal leading
    axes. With ``return_weights`` the row-stochastic weights come back too.
    """
    if (q.ndim != k.ndim or q.shape[:-2] != k.shape[:-2] or q.shape[-1] != k.shape[-1]
            or k.shape[:-1] != v.shape[:-1]):
        raise DimensionError(f"attention operands disagree: q{q.shape} k{k.shape} v{v.shape}")
    c = q.shape[-1]
    if c < 1:
        raise DimensionError("attention needs at least one channel")
    mm = nc.matmul if q.ndim == 2 else nc.batched_matmul
    scores = nc.scale(mm(q, nc.transpose_last2(k)), 1.0 / math.sqrt(c))
    weights = nc.softmax_last(scores)
    out = mm(weights, v)
    return (out, weights) if return_weights else out


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return nc.reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"feature map must be (T, HW, C) or (B, T, HW, C), got {x.shape}")


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return nc.reshape(y, y.shape[1:]) if squeeze else y


def _check_channels(x: Tensor, p: ProjectionSet) -> None:
    if x.shape[-1] != p.channels:
        raise DimensionError(f"feature map has {x.shape[-1]} channels, projections expect {p.channels}")


def _attend(inp: Tensor, p: ProjectionSet, norm: ChannelNorm | None, record):
    """Attention of ``inp`` over its second-to-last axis, projected by W_O."""
    q = nc.linear(inp, p.w_q.tensor())
    k = nc.linear(inp, p.w_k.tensor())
    v = nc.linear(inp, p.w_v.tensor())
    a, weights = scaled_dot_attention(q, k, v, return_weights=True)
    if record is not None:
        record.append(weights.numpy())
    y = nc.linear(a, p.w_o.tensor())
    return norm(y) if norm is not None else y


def nl_block(x: Tensor, p: ProjectionSet, norm: ChannelNorm | None = None, record=None) -> Tensor:
    """Joint attention across all T*HW positions of a clip."""
    xb, squeeze = _batched(x)
    _check_channels(xb, p)
    b, t, hw, c = xb.shape
    flat = nc.reshape(xb, (b, t * hw, c))
    y = _attend(flat, p, norm, record)
    return _unbatch(nc.add(xb, nc.reshape(y, xb.shape)), squeeze)


def spatial_block(x: Tensor, p: ProjectionSet, norm: ChannelNorm | None = None, record=None) -> Tensor:
    """Attention among the spatial positions of each frame; frames never interact."""
    xb, squeeze = _batched(x)
    _check_channels(xb, p)
    b, t, hw, c = xb.shape
    frames = nc.reshape(xb, (b * t, hw, c))
    y = _attend(frames, p, norm, record)
    return _unbatch(nc.add(xb, nc.reshape(y, xb.shape)), squeeze)


def temporal_block(x: Tensor, p: ProjectionSet, pe: TemporalPositionalEmbedding | None = None,
                   norm: ChannelNorm | None = None, record=None) -> Tensor:
    """Attention along time at every spatial position.

    The positional embedding, when given, enters only the q/k/v inputs; the
    residual path carries ``x`` unchanged.
    """
    xb, squeeze = _batched(x)
    _check_channels(xb, p)
    b, t, hw, c = xb.shape
    inp = xb
    if pe is not None:
        if t > pe.t_max:
            raise DimensionError(f"clip has T={t} frames but the positional embedding covers {pe.t_max}")
        e = pe.e.tensor()
        if t < pe.t_max:
            e = nc.slice_axis(e, 0, 0, t)
        inp = nc.add(xb, nc.broadcast_to(nc.reshape(e, (1, t, 1, c)), xb.shape))
    seq = nc.reshape(nc.permute_axes(inp, (0, 2, 1, 3)), (b * hw, t, c))
    y = _attend(seq, p, norm, record)
    y = nc.permute_axes(nc.reshape(y, (b, hw, t, c)), (0, 2, 1, 3))
    return _unbatch(nc.add(xb, y), squeeze)


# ---------------------------------------------------------------- block objects

class _AttentionLayer:
    kind = ""

    def __init__(self, name: str, channels: int, rng: np.random.Generator, norm: bool = False):
        self.name = name
        self.proj = ProjectionSet.create(name, channels, rng)
        self.norm = ChannelNorm(f"{name}.norm", channels) if norm else None
        self.retain_attention = False
        self.last_attention: dict[str, np.ndarray] = {}

    def parameters(self) -> list[Parameter]:
        params = self.proj.parameters()
        if self.norm is not None:
            params += self.norm.parameters()
        return params

    def _record(self):
        return [] if self.retain_attention else None

    def _keep(self, role: str, rec) -> None:
        if rec is not None:
            self.last_attention[role] = rec[0]


class NLBlock(_AttentionLayer):
    kind = "nl"

    def __call__(self, x: Tensor) -> Tensor:
        rec = self._record()
        y = nl_block(x, self.proj, self.norm, rec)
        self._keep("joint", rec)
        return y


class SpatialBlock(_AttentionLayer):
    kind = "sa"

    def __call__(self, x: Tensor) -> Tensor:
        rec = self._record()
        y = spatial_block(x, self.proj, self.norm, rec)
        self._keep("spatial", rec)
        return y


class TemporalBlock(_AttentionLayer):
    """Temporal attention; with a positional embedding this is the TAPE block."""

    kind = "ta"

    def __init__(self, name: str, channels: int, rng: np.random.Generator, norm: bool = False,
                 pe: str | None = None, t_max: int | None = None):
        super().__init__(name, channels, rng, norm)
        self.pe = None
        if pe is not None:
            if not t_max or t_max < 1:
                raise ConfigError("a positional embedding needs t_max >= 1")
            self.pe = TemporalPositionalEmbedding(f"{name}.pe", t_max, channels, rng, kind=pe)
            self.kind = "tape"

    def parameters(self) -> list[Parameter]:
        params = super().parameters()
        if self.pe is not None:
            params += self.pe.parameters()
        return params

    def __call__(self, x: Tensor) -> Tensor:
        rec = self._record()
        y = temporal_block(x, self.proj, self.pe, self.norm, rec)
        self._keep("temporal", rec)
        return y


class DNLBlock:
    """Spatial attention followed by temporal attention with separate projections."""

    kind = "dnl"

    def __init__(self, name: str, channels: int, rng: np.random.Generator, norm: bool = False):
        self.name = name
        self.spatial = SpatialBlock(f"{name}.s", channels, rng, norm)
        self.temporal = TemporalBlock(f"{name}.t", channels, rng, norm)

    @property
    def retain_attention(self) -> bool:
        return self.spatial.retain_attention

    @retain_attention.setter
    def retain_attention(self, flag: bool) -> None:
        self.spatial.retain_attention = flag
        self.temporal.retain_attention = flag

    @property
    def last_attention(self) -> dict[str, np.ndarray]:
        return {**self.spatial.last_attention, **self.temporal.last_attention}

    def parameters(self) -> list[Parameter]:
        return self.spatial.parameters() + self.temporal.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        return self.temporal(self.spatial(x))


def dnl_block(x: Tensor, spatial: ProjectionSet, temporal: ProjectionSet) -> Tensor:
    return temporal_block(spatial_block(x, spatial), temporal)
