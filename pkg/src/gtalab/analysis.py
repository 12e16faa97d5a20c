"""Closed-form cost accounting and attention-matrix export.

Counting convention (tag ``mad2``): a multiply-add is 2 flops, bias-like
additions (including the positional embedding and normalization) are free,
and each softmax element costs 4 flops. With ``N = T*H*W`` and ``S = H*W``::

    nl    8*N*C^2 + 4*N^2*C + 4*N^2
    sa    T * (8*S*C^2 + 4*S^2*C + 4*S^2)
    ta    S * (8*T*C^2 + 4*T^2*C + 4*T^2)          (tape: same flops)
    dnl   sa + ta
    gta   pixel:  4*S*T*C^2 + 2*S*T^2*C*N_h
          region: 4*T*K*S*C      transform (w_g x^T, then g_r x)
                  2*T*K*C^2      value projection on K regions
                  2*K*T^2*C*N_h  mixing on K regions
                  2*T*S*K*C      back-projection g_r^T
                  2*T*S*C^2      output projection on the HW grid

Without cross-channel heads ``N_h`` is 1. Parameters: 4*C^2 per projection
set, +2*C with norm, +T_max*C for a learned embedding; GTA holds 2*C^2 and a
bank of ``G*N_h*T^2`` (or ``T^2``) per enabled path, plus ``K*C`` for w_g.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numeric_core as nc
from .errors import ConfigError, ContractError
from .gta_blocks import GTABlock
from .plan import BlockSpec, parse_block, parse_plan

CONVENTION = "mad2"
SOFTMAX_FLOPS = 4

# Two stages of the ResNet-50 video backbone hosting the attention blocks:
# (block count, C, H, W) at T=8, and the bare backbone budget in GFLOPs.
REFERENCE_T = 8
REFERENCE_STAGES = ((2, 512, 28, 28), (3, 1024, 14, 14))
REFERENCE_BACKBONE_GFLOPS = 32.7
REFERENCE_EXTRA_GFLOPS = {"nl": 28.4, "dnl": 17.2, "gta": 17.5}
REFERENCE_EXTRA_PARAMS = 31.2e6 - 23.9e6


def _check_dims(t: int, h: int, w: int, c: int) -> None:
    for name, v in (("T", t), ("H", h), ("W", w), ("C", c)):
        if not isinstance(v, (int, np.integer)) or v < 1:
            raise ConfigError(f"{name}={v!r} must be a positive integer")


def _projection(c: int, norm: bool) -> int:
    return 4 * c * c + (2 * c if norm else 0)


def _attention_flops(n: int, c: int) -> int:
    """q/k/v/o projections, QK^T and MV, softmax, for one sequence of length n."""
    return 8 * n * c * c + 4 * n * n * c + SOFTMAX_FLOPS * n * n


def _as_block(kind, config) -> BlockSpec:
    if isinstance(kind, BlockSpec):
        return kind
    if config is None:
        return parse_block(kind)
    if isinstance(config, BlockSpec):
        return config
    opts = ",".join(f"{k}={v}" for k, v in dict(config).items())
    return parse_block(f"{kind}[{opts}]" if opts else kind)


def count_block(kind, t: int, h: int, w: int, c: int, config=None) -> tuple[int, int]:
    """(flops, params) of one block at clip geometry T x H x W with C channels.

    ``kind`` is a block kind or a :class:`BlockSpec`; ``config`` is an option
    mapping such as ``{"g": 8, "k": 4}``.
    """
    from .model import gta_config

    _check_dims(t, h, w, c)
    b = _as_block(kind, config)
    s = h * w
    norm = b.switch("norm", False) if b.kind != "gta" else False
    if b.kind == "nl":
        return _attention_flops(t * s, c), _projection(c, norm)
    if b.kind == "sa":
        return t * _attention_flops(s, c), _projection(c, norm)
    if b.kind in ("ta", "tape"):
        params = _projection(c, norm)
        if b.kind == "tape":
            t_max = b.integer("tmax", t)
            if t_max < t:
                raise ConfigError(f"tape tmax={t_max} is shorter than T={t}")
            if b.opt("pe", "learned") == "learned":
                params += t_max * c
        return s * _attention_flops(t, c), params
    if b.kind == "dnl":
        return t * _attention_flops(s, c) + s * _attention_flops(t, c), 2 * _projection(c, norm)
    if b.kind == "gta":
        cfg = gta_config(b).resolved(c)
        heads = cfg.heads if cfg.ccmh else 1
        bank = cfg.groups * cfg.heads * t * t if cfg.ccmh else t * t
        k = cfg.regions
        flops = params = 0
        if cfg.pixel:
            flops += 4 * s * t * c * c + 2 * s * t * t * c * heads
            params += 2 * c * c + bank
        if cfg.region:
            flops += (4 * t * k * s * c + 2 * t * k * c * c + 2 * k * t * t * c * heads
                      + 2 * t * s * k * c + 2 * t * s * c * c)
            params += 2 * c * c + bank + k * c
        return flops, params
    raise ConfigError(f"unknown block kind {b.kind!r}")


@dataclass(frozen=True)
class FlopRow:
    kind: str
    t: int
    h: int
    w: int
    c: int
    config: str
    flops: int
    params: int


@dataclass
class FlopReport:
    rows: list[FlopRow] = field(default_factory=list)
    convention: str = CONVENTION

    @property
    def flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    def add(self, block: BlockSpec, t: int, h: int, w: int, c: int) -> FlopRow:
        flops, params = count_block(block, t, h, w, c)
        row = FlopRow(block.kind, t, h, w, c, block.to_text(), flops, params)
        self.rows.append(row)
        return row

    def to_csv(self) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(["kind", "T", "H", "W", "C", "config", "flops", "params"])
        for r in self.rows:
            out.writerow([r.kind, r.t, r.h, r.w, r.c, r.config, r.flops, r.params])
        return buf.getvalue()

    def table(self) -> str:
        head = f"{'config':<28} {'T':>3} {'H':>4} {'W':>4} {'C':>5} {'GFLOPs':>10} {'params':>12}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.config:<28} {r.t:>3} {r.h:>4} {r.w:>4} {r.c:>5} "
                         f"{r.flops / 1e9:>10.3f} {r.params:>12,d}")
        lines.append("-" * len(head))
        lines.append(f"{'total':<28} {'':>3} {'':>4} {'':>4} {'':>5} "
                     f"{self.flops / 1e9:>10.3f} {self.params:>12,d}")
        lines.append(f"convention: {self.convention} (multiply-add = 2 flops, biases free, softmax 4/element)")
        return "\n".join(lines)


def count_plan(blocks, sites: Iterable[tuple[int, int, int, int]]) -> FlopReport:
    """Apply the plan once at every (T, H, W, C) site."""
    blocks = parse_plan(blocks) if isinstance(blocks, str) else tuple(blocks)
    report = FlopReport()
    for t, h, w, c in sites:
        for b in blocks:
            report.add(b, t, h, w, c)
    return report


def reference_sites(t: int = REFERENCE_T) -> list[tuple[int, int, int, int]]:
    return [(t, h, w, c) for n, c, h, w in REFERENCE_STAGES for _ in range(n)]


def parse_dims(text: str) -> list[tuple[int, int, int, int]]:
    """``"reference"`` or ``T,H,W,C[*n]`` items separated by ``;``."""
    text = text.strip()
    if text.lower() == "reference":
        return reference_sites()
    sites = []
    for item in filter(None, (s.strip() for s in text.split(";"))):
        body, _, rep = item.partition("*")
        try:
            dims = tuple(int(v) for v in body.split(","))
            n = int(rep) if rep else 1
        except ValueError:
            raise ConfigError(f"dims item {item!r} is not T,H,W,C[*n]") from None
        if len(dims) != 4 or n < 1:
            raise ConfigError(f"dims item {item!r} is not T,H,W,C[*n]")
        _check_dims(*dims)
        sites += [dims] * n
    if not sites:
        raise ConfigError("no dims given")
    return sites


def model_param_count(spec) -> int:
    """Trainable parameter count of ``build_model(spec)`` from the closed forms."""
    spec.validate()
    total = spec.patch * spec.patch * spec.c_in * spec.c
    if spec.stem_bias:
        total += spec.tokens * spec.c
    hp, wp = spec.h // spec.patch, spec.w // spec.patch
    for b in spec.blocks:
        total += count_block(b, spec.t, hp, wp, spec.c)[1]
    return total + spec.c * spec.classes + spec.classes


# ---------------------------------------------------------------- attention export

@dataclass
class AttentionDump:
    matrices: dict[str, np.ndarray]        # file stem -> matrix
    roles: dict[str, str]                  # file stem -> role label
    block_index: dict[str, int]
    sample_id: object = None
    files: list[Path] = field(default_factory=list)


def _write_matrix(path: Path, m: np.ndarray) -> None:
    m = np.atleast_2d(m)
    with open(path, "w") as fh:
        for row in m:
            fh.write(",".join("%.17g" % v for v in row) + "\n")


def read_matrix(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def _layer_matrices(i: int, layer) -> list[tuple[str, str, np.ndarray]]:
    out = []
    att = layer.last_attention
    if "joint" in att:
        out.append((f"block{i}_joint", "joint", att["joint"][0]))
    if "spatial" in att:
        for t, m in enumerate(att["spatial"]):
            out.append((f"block{i}_spatial_t{t}", "spatial", m))
    if "temporal" in att:
        for p, m in enumerate(att["temporal"]):
            out.append((f"block{i}_temporal_pos{p}", "temporal", m))
    if isinstance(layer, GTABlock):
        for path, param in (("pixel", layer.params.m_pixel), ("region", layer.params.m_region)):
            if param is None:
                continue
            bank = param.value.data
            frames = bank.shape[-1]
            out.append((f"block{i}_mhat_{path}", f"mhat_{path}", bank.reshape(-1, frames)))
            out.append((f"block{i}_mhat_{path}_mean", f"mhat_{path}_mean",
                        bank.reshape(-1, frames, frames).mean(axis=0)))
        if "region_map" in att:
            for t, m in enumerate(att["region_map"][0]):
                out.append((f"block{i}_region_map_t{t}", "region_map", m))
    return out


def dump_attention(model, sample, out_dir, sample_id=None) -> AttentionDump:
    """Run one clip and write every attention matrix of every block as CSV.

    Softmax maps come from this forward pass; M-hat banks are the raw
    parameters, flattened to ``(G*N_h*T, T)`` rows.
    """
    if not model.layers or not all(layer.retain_attention for layer in model.layers):
        raise ContractError("attention retention is disabled; call model.set_retain_attention(True) first")
    frames = getattr(sample, "frames", sample)
    if sample_id is None:
        sample_id = getattr(sample, "provenance", None)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4:
        raise ContractError(f"expected a single clip (T, H, W, c_in), got shape {frames.shape}")
    with nc.no_tape():
        model(frames)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump = AttentionDump({}, {}, {}, sample_id)
    for i, layer in enumerate(model.layers):
        for stem, role, m in _layer_matrices(i, layer):
            path = out / f"{stem}.csv"
            _write_matrix(path, m)
            dump.matrices[stem] = m
            dump.roles[stem] = role
            dump.block_index[stem] = i
            dump.files.append(path)
    return dump


def row_mass_spread(m: np.ndarray) -> float:
    """max - min of the row sums; a flat (constant-row) matrix gives 0."""
    mass = np.asarray(m).sum(axis=-1)
    return float(mass.max() - mass.min())


def extra_costs(plans: Sequence[str], sites=None) -> dict[str, FlopReport]:
    sites = reference_sites() if sites is None else sites
    return {p: count_plan(p, sites) for p in plans}
