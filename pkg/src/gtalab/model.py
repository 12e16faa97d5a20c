"""Video classifier assembly and checkpoint persistence.

A model is a patch-projection stem, an ordered stack of attention blocks, a
mean pool over time and space, and a linear classifier. Checkpoints use a
little-endian binary container::

    b"GTACKPT1"
    u32 length + UTF-8 spec text (key=value lines)
    per parameter, in registry order:
        u32 length + UTF-8 name
        u32 rank, u64 extent * rank
        f64 values, row-major
    u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numeric_core as nc
from .attention_blocks import DNLBlock, NLBlock, SpatialBlock, TemporalBlock, normal_param, zero_param
from .container import Reader, pack_array, pack_text, seal
from .errors import ConfigError, DimensionError, FormatError, IntegrityError
from .gta_blocks import GTABlock, GtaConfig
from .numeric_core import Parameter, Tensor
from .plan import BlockSpec, parse_plan, parse_switch, plan_to_text

CKPT_MAGIC = b"GTACKPT1"


@dataclass(frozen=True)
class ModelSpec:
    t: int = 8
    h: int = 16
    w: int = 16
    c_in: int = 1
    patch: int = 4
    c: int = 16
    classes: int = 2
    blocks: tuple[BlockSpec, ...] = field(default=())
    seed: int = 0
    stem_bias: bool = True

    _INT_KEYS = ("t", "h", "w", "c_in", "patch", "c", "classes", "seed")

    @property
    def tokens(self) -> int:
        return (self.h // self.patch) * (self.w // self.patch)

    def problems(self) -> list[str]:
        out = []
        for key in ("t", "h", "w", "c_in", "patch", "c", "classes"):
            if getattr(self, key) < 1:
                out.append(f"{key}={getattr(self, key)} must be >= 1")
        if self.seed < 0:
            out.append(f"seed={self.seed} must be >= 0")
        if self.patch >= 1 and (self.h % self.patch or self.w % self.patch):
            out.append(f"patch={self.patch} must divide h={self.h} and w={self.w}")
        for i, b in enumerate(self.blocks):
            try:
                if b.kind == "gta":
                    gta_config(b).resolved(self.c)
                elif b.kind == "tape" and b.integer("tmax", self.t) < self.t:
                    out.append(f"block {i} (tape): tmax={b.opt('tmax')} is shorter than the clip, t={self.t}")
            except ConfigError as exc:
                out.append(f"block {i} ({b.kind}): {exc}")
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise ConfigError("invalid model spec: " + "; ".join(problems))

    def to_text(self) -> str:
        lines = [f"{k}={getattr(self, k)}" for k in self._INT_KEYS]
        lines.append(f"stem_bias={'on' if self.stem_bias else 'off'}")
        lines.append(f"blocks={plan_to_text(self.blocks)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_pairs(cls, pairs: dict[str, str], base: "ModelSpec | None" = None) -> "ModelSpec":
        base = base or cls()
        kw = {}
        for key, value in pairs.items():
            key = key.strip()
            if key in cls._INT_KEYS:
                try:
                    kw[key] = int(value)
                except ValueError:
                    raise ConfigError(f"spec key {key!r} needs an integer, got {value!r}") from None
            elif key == "stem_bias":
                kw[key] = parse_switch(value, "stem_bias")
            elif key == "blocks":
                kw[key] = parse_plan(value)
            else:
                raise ConfigError(f"unknown model spec key {key!r}")
        return replace(base, **kw)

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        pairs = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"spec line {n} is not key=value: {line!r}")
            k, v = line.split("=", 1)
            if k.strip() in pairs:
                raise ConfigError(f"spec key {k.strip()!r} repeated")
            pairs[k.strip()] = v.strip()
        return cls.from_pairs(pairs)


def gta_config(b: BlockSpec) -> GtaConfig:
    return GtaConfig(
        regions=b.integer("k", 0),
        groups=b.integer("g", 8),
        heads=b.integer("heads", 0),
        pixel=b.switch("pixel", True),
        region=b.switch("region", True),
        ccmh=b.switch("ccmh", True),
    )


def make_block(name: str, b: BlockSpec, spec: ModelSpec, rng: np.random.Generator):
    norm = b.switch("norm", False)
    if b.kind == "nl":
        return NLBlock(name, spec.c, rng, norm)
    if b.kind == "sa":
        return SpatialBlock(name, spec.c, rng, norm)
    if b.kind == "ta":
        return TemporalBlock(name, spec.c, rng, norm)
    if b.kind == "tape":
        return TemporalBlock(name, spec.c, rng, norm, pe=b.opt("pe", "learned"),
                             t_max=b.integer("tmax", spec.t))
    if b.kind == "dnl":
        return DNLBlock(name, spec.c, rng, norm)
    if b.kind == "gta":
        return GTABlock(name, spec.t, spec.c, rng, gta_config(b))
    raise ConfigError(f"unknown block kind {b.kind!r}")


class Model:
    """Instantiated classifier with an ordered, uniquely named parameter registry."""

    def __init__(self, spec: ModelSpec):
        spec.validate()
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        p = spec.patch
        self.w_stem = normal_param("stem.w", (p * p * spec.c_in, spec.c), rng)
        self.b_stem = normal_param("stem.pos_bias", (spec.tokens, spec.c), rng) if spec.stem_bias else None
        self.layers = [make_block(f"block{i}", b, spec, rng) for i, b in enumerate(spec.blocks)]
        self.w_head = normal_param("head.w", (spec.c, spec.classes), rng)
        self.b_head = zero_param("head.b", (spec.classes,))
        self.registry: dict[str, Parameter] = {}
        for param in self._collect():
            if param.name in self.registry:
                raise ConfigError(f"duplicate parameter name {param.name!r}")
            self.registry[param.name] = param

    def _collect(self) -> list[Parameter]:
        params = [self.w_stem] + ([self.b_stem] if self.b_stem is not None else [])
        for layer in self.layers:
            params += layer.parameters()
        return params + [self.w_head, self.b_head]

    def parameters(self) -> list[Parameter]:
        return list(self.registry.values())

    def trainable(self) -> list[Parameter]:
        return [p for p in self.registry.values() if p.trainable]

    @property
    def param_count(self) -> int:
        return sum(math.prod(p.shape) for p in self.registry.values())

    def set_retain_attention(self, flag: bool) -> None:
        for layer in self.layers:
            layer.retain_attention = flag

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.registry.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.value.data, dtype="<f8").tobytes())
        return h.hexdigest()

    # ------------------------------------------------------------- forward

    def stem(self, frames: Tensor) -> Tensor:
        """(B, T, H, W, c_in) clips -> (B, T, HW/p^2, C) patch tokens."""
        s = self.spec
        frames = _as_batch(frames, s)
        b, p = frames.shape[0], s.patch
        hp, wp = s.h // p, s.w // p
        x = nc.reshape(frames, (b, s.t, hp, p, wp, p, s.c_in))
        x = nc.permute_axes(x, (0, 1, 2, 4, 3, 5, 6))
        x = nc.reshape(x, (b, s.t, hp * wp, p * p * s.c_in))
        x = nc.linear(x, self.w_stem.tensor())
        if self.b_stem is not None:
            bias = nc.reshape(self.b_stem.tensor(), (1, 1, hp * wp, s.c))
            x = nc.add(x, nc.broadcast_to(bias, x.shape))
        return x

    def features(self, frames: Tensor) -> Tensor:
        x = self.stem(frames)
        for layer in self.layers:
            x = layer(x)
        return x

    def pool(self, x: Tensor) -> Tensor:
        return nc.mean_axis(nc.mean_axis(x, 2), 1)

    def head(self, pooled: Tensor) -> Tensor:
        logits = nc.linear(pooled, self.w_head.tensor())
        bias = nc.reshape(self.b_head.tensor(), (1, self.spec.classes))
        return nc.add(logits, nc.broadcast_to(bias, logits.shape))

    def forward(self, frames) -> Tensor:
        return self.head(self.pool(self.features(frames)))

    __call__ = forward


def _as_batch(frames, s: ModelSpec) -> Tensor:
    frames = frames if isinstance(frames, Tensor) else Tensor(frames)
    if frames.ndim == 4:
        frames = nc.reshape(frames, (1,) + frames.shape)
    want = (s.t, s.h, s.w, s.c_in)
    if frames.ndim != 5 or frames.shape[1:] != want:
        raise DimensionError(f"expected clips shaped (B, {', '.join(map(str, want))}), got {frames.shape}")
    return frames


def build_model(spec: ModelSpec) -> Model:
    return Model(spec)


# ---------------------------------------------------------------- checkpoints

def checkpoint_bytes(model: Model) -> bytes:
    parts = [CKPT_MAGIC, pack_text(model.spec.to_text())]
    for name, p in model.registry.items():
        parts.append(pack_text(name))
        parts.append(pack_array(p.value.data))
    return seal(b"".join(parts))


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def read_checkpoint(blob: bytes) -> tuple[ModelSpec, list[tuple[str, np.ndarray]]]:
    r = Reader(blob, CKPT_MAGIC)
    spec_at = r.pos
    try:
        spec = ModelSpec.from_text(r.text())
    except ConfigError as exc:
        raise FormatError(f"embedded spec is invalid: {exc}", offset=spec_at) from None
    entries = []
    while not r.done:
        name = r.text()
        entries.append((name, r.array()))
    return spec, entries


def load_checkpoint(path, spec: ModelSpec | None = None) -> Model:
    """Rebuild the model stored at ``path``.

    With ``spec`` the parameters are checked against a model built from that
    spec instead of the embedded one; the first name or shape disagreement
    raises :class:`IntegrityError`.
    """
    stored_spec, entries = read_checkpoint(Path(path).read_bytes())
    model = Model(spec if spec is not None else stored_spec)
    expected = list(model.registry.items())
    for i, (name, arr) in enumerate(entries):
        if i >= len(expected):
            raise IntegrityError(f"checkpoint has extra parameter {name!r}")
        want_name, param = expected[i]
        if name != want_name:
            raise IntegrityError(f"parameter {i} is {name!r} in the checkpoint but {want_name!r} in the spec")
        if arr.shape != param.shape:
            raise IntegrityError(f"parameter {name!r} has shape {arr.shape}, spec expects {param.shape}")
    if len(entries) < len(expected):
        raise IntegrityError(f"checkpoint lacks parameter {expected[len(entries)][0]!r}")
    for (name, arr), (_, param) in zip(entries, expected):
        param.value = arr
    return model
