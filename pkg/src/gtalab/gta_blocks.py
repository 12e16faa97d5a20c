"""Global temporal attention.

Instead of computing attention weights from query/key products, each path
owns learned ``T x T`` matrices that mix the value representation along time.
The same matrices are applied to every sample and every spatial position (the
pixel path) or every learned region (the region path). With cross-channel
multi-head mixing the channels are split into ``G`` groups, every group gets
``N_h = G`` heads, head outputs are summed over groups, and head ``k`` fills
output channels ``[k*C/G, (k+1)*C/G)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numeric_core as nc
from .attention_blocks import normal_param, zero_param
from .errors import ConfigError, DimensionError
from .numeric_core import Parameter, Tensor

BANK_STD = 0.02


@dataclass
class GtaConfig:
    regions: int = 0            # K; 0 means C // 8 (at least 1)
    groups: int = 8             # G
    heads: int = 0              # N_h; 0 means G
    pixel: bool = True
    region: bool = True
    ccmh: bool = True

    def resolved(self, channels: int) -> "GtaConfig":
        """Copy with defaults filled in for ``channels``, validated."""
        k = self.regions or max(1, channels // 8)
        g = self.groups if self.ccmh else 1
        h = (self.heads or g) if self.ccmh else 1
        cfg = GtaConfig(k, g, h, self.pixel, self.region, self.ccmh)
        cfg.validate(channels)
        return cfg

    def validate(self, channels: int) -> None:
        problems = []
        if not (self.pixel or self.region):
            problems.append("at least one of the pixel and region paths must be enabled")
        if self.regions < 1:
            problems.append(f"region count K={self.regions} must be >= 1")
        if self.groups < 1 or self.heads < 1:
            problems.append(f"groups={self.groups} and heads={self.heads} must be >= 1")
        if self.ccmh:
            if self.heads != self.groups:
                problems.append(f"cross-channel multi-head needs heads == groups, got {self.heads} != {self.groups}")
            if self.groups >= 1 and channels % self.groups:
                problems.append(f"channels C={channels} not divisible by groups G={self.groups}")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class GtaParams:
    """Learnable tensors of one GTA block. Disabled paths hold ``None``."""

    w_v_pixel: Parameter | None = None
    w_o_pixel: Parameter | None = None
    m_pixel: Parameter | None = None
    w_v_region: Parameter | None = None
    w_o_region: Parameter | None = None
    m_region: Parameter | None = None
    w_g: Parameter | None = None
    cfg: GtaConfig = field(default_factory=GtaConfig)

    @classmethod
    def create(cls, prefix: str, frames: int, channels: int, cfg: GtaConfig,
               rng: np.random.Generator) -> "GtaParams":
        cfg = cfg.resolved(channels)
        bank = (cfg.groups, cfg.heads, frames, frames) if cfg.ccmh else (frames, frames)
        cc = (channels, channels)
        p = cls(cfg=cfg)
        if cfg.pixel:
            p.w_v_pixel = normal_param(f"{prefix}.pixel.w_v", cc, rng)
            p.m_pixel = normal_param(f"{prefix}.pixel.m", bank, rng, BANK_STD)
            p.w_o_pixel = zero_param(f"{prefix}.pixel.w_o", cc)
        if cfg.region:
            p.w_g = normal_param(f"{prefix}.region.w_g", (cfg.regions, channels), rng)
            p.w_v_region = normal_param(f"{prefix}.region.w_v", cc, rng)
            p.m_region = normal_param(f"{prefix}.region.m", bank, rng, BANK_STD)
            p.w_o_region = zero_param(f"{prefix}.region.w_o", cc)
        return p

    def parameters(self) -> list[Parameter]:
        order = (self.w_v_pixel, self.m_pixel, self.w_o_pixel,
                 self.w_g, self.w_v_region, self.m_region, self.w_o_region)
        return [p for p in order if p is not None]


# ---------------------------------------------------------------- mixing kernels

def temporal_mix(v: Tensor, m: Tensor) -> Tensor:
    """out[b, t, s, c] = sum_u m[t, u] v[b, u, s, c] for v shaped (B, T, S, C)."""
    b, t, s, c = v.shape
    if m.shape != (t, t):
        raise DimensionError(f"global attention matrix is {m.shape}, clip has T={t}")
    slab = nc.reshape(nc.permute_axes(v, (1, 0, 2, 3)), (t, b * s * c))
    mixed = nc.matmul(m, slab)
    return nc.permute_axes(nc.reshape(mixed, (t, b, s, c)), (1, 0, 2, 3))


def ccmh_mix_batched(v: Tensor, bank: Tensor) -> Tensor:
    """Cross-channel multi-head mixing of v shaped (B, T, S, C) with a (G, N_h, T, T) bank."""
    b, t, s, c = v.shape
    if bank.ndim != 4 or bank.shape[2:] != (t, t):
        raise DimensionError(f"bank has shape {bank.shape}, clip has T={t}")
    g, h = bank.shape[:2]
    if h != g:
        raise ConfigError(f"cross-channel multi-head needs heads == groups, got {h} != {g}")
    if c % g:
        raise ConfigError(f"channels C={c} not divisible by groups G={g}")
    cg = c // g
    # V_g slabs: (G, T, B*S*Cg)
    vg = nc.permute_axes(nc.reshape(v, (b, t, s, g, cg)), (3, 1, 0, 2, 4))
    vg = nc.reshape(vg, (g, t, b * s * cg))
    heads = nc.reshape(bank, (g, h * t, t))
    per_group = nc.batched_matmul(heads, vg)           # MH_g: (G, N_h*T, B*S*Cg)
    summed = nc.sum_axis(per_group, 0)                 # MH_G: (N_h*T, B*S*Cg)
    out = nc.permute_axes(nc.reshape(summed, (h, t, b, s, cg)), (2, 1, 3, 0, 4))
    return nc.reshape(out, (b, t, s, c))


def ccmh_mix(v: Tensor, bank: Tensor, groups: int | None = None, heads: int | None = None) -> Tensor:
    """Cross-channel multi-head mixing of a single (T, C) value slab."""
    if v.ndim != 2:
        raise DimensionError(f"ccmh_mix expects a (T, C) slab, got {v.shape}")
    if groups is not None and bank.shape[0] != groups or heads is not None and bank.shape[1] != heads:
        raise DimensionError(f"bank shape {bank.shape} disagrees with G={groups}, N_h={heads}")
    t, c = v.shape
    return nc.reshape(ccmh_mix_batched(nc.reshape(v, (1, t, 1, c)), bank), (t, c))


def _mix(v: Tensor, m: Parameter, cfg: GtaConfig) -> Tensor:
    return ccmh_mix_batched(v, m.tensor()) if cfg.ccmh else temporal_mix(v, m.tensor())


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return nc.reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"feature map must be (T, HW, C) or (B, T, HW, C), got {x.shape}")


# ---------------------------------------------------------------- paths

def pixel_gta(x: Tensor, params: GtaParams) -> Tensor:
    """A_P: every spatial position's value sequence mixed by the shared pixel bank."""
    if params.m_pixel is None:
        raise ConfigError("pixel path is disabled for this block")
    xb, squeeze = _batched(x)
    v = nc.linear(xb, params.w_v_pixel.tensor())
    a = _mix(v, params.m_pixel, params.cfg)
    return nc.reshape(a, a.shape[1:]) if squeeze else a


def region_transform(x_t: Tensor, w_g: Tensor) -> tuple[Tensor, Tensor]:
    """Region map g_r = w_g x_t^T (K x HW) and pooled regions x_g = g_r x_t (K x C).

    ``x_t`` may carry leading batch axes, ``(..., HW, C)``.
    """
    if w_g.ndim != 2 or x_t.shape[-1] != w_g.shape[1]:
        raise DimensionError(f"region projector {w_g.shape} does not match features {x_t.shape}")
    if x_t.ndim == 2:
        g_r = nc.matmul(w_g, nc.transpose_last2(x_t))
        return g_r, nc.matmul(g_r, x_t)
    g_r = nc.transpose_last2(nc.linear(x_t, nc.transpose_last2(w_g)))
    return g_r, nc.batched_matmul(g_r, x_t)


def region_gta(x: Tensor, params: GtaParams, region_map: Tensor | None = None, record=None) -> Tensor:
    """A_R: regions pooled per frame, mixed along time, projected back with that frame's map.

    ``region_map`` (K x HW) replaces ``w_g x(t)^T`` at every frame; it exists as
    a test hook.
    """
    if params.m_region is None:
        raise ConfigError("region path is disabled for this block")
    xb, squeeze = _batched(x)
    b, t, hw, c = xb.shape
    frames = nc.reshape(xb, (b * t, hw, c))
    if region_map is None:
        g_r, x_g = region_transform(frames, params.w_g.tensor())
    else:
        if region_map.ndim != 2 or region_map.shape[1] != hw:
            raise DimensionError(f"region map {region_map.shape} does not cover HW={hw}")
        g_r = nc.broadcast_to(nc.reshape(region_map, (1,) + region_map.shape), (b * t,) + region_map.shape)
        x_g = nc.batched_matmul(g_r, frames)
    if record is not None:
        record.append(g_r.numpy().reshape(b, t, -1, hw))
    k = g_r.shape[1]
    v = nc.reshape(nc.linear(x_g, params.w_v_region.tensor()), (b, t, k, c))
    mixed = nc.reshape(_mix(v, params.m_region, params.cfg), (b * t, k, c))
    a = nc.reshape(nc.batched_matmul(nc.transpose_last2(g_r), mixed), (b, t, hw, c))
    return nc.reshape(a, a.shape[1:]) if squeeze else a


def gta_block(x: Tensor, params: GtaParams, record=None) -> Tensor:
    """Y = X + A_P W_P^O + A_R W_R^O, skipping disabled paths."""
    xb, squeeze = _batched(x)
    y = xb
    if params.m_pixel is not None:
        y = nc.add(y, nc.linear(pixel_gta(xb, params), params.w_o_pixel.tensor()))
    if params.m_region is not None:
        y = nc.add(y, nc.linear(region_gta(xb, params, record=record), params.w_o_region.tensor()))
    if y is xb:
        raise ConfigError("GTA block has no enabled path")
    return nc.reshape(y, y.shape[1:]) if squeeze else y


class GTABlock:
    kind = "gta"

    def __init__(self, name: str, frames: int, channels: int, rng: np.random.Generator,
                 cfg: GtaConfig | None = None):
        self.name = name
        self.frames = frames
        self.params = GtaParams.create(name, frames, channels, cfg or GtaConfig(), rng)
        self.retain_attention = False
        self.last_attention: dict[str, np.ndarray] = {}

    @property
    def cfg(self) -> GtaConfig:
        return self.params.cfg

    def parameters(self) -> list[Parameter]:
        return self.params.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        rec = [] if self.retain_attention else None
        y = gta_block(x, self.params, record=rec)
        if rec:
            self.last_attention["region_map"] = rec[0]
        return y
