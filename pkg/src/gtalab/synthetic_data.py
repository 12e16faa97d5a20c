"""Synthetic clips whose label is decidable only from frame order.

Each generator draws ``n/2`` class-0 trajectories and emits every one twice:
once as drawn (label 0) and once with its frames reversed (label 1). The two
classes therefore have identical per-frame marginals, and any classifier that
ignores frame order is stuck at chance.

Datasets persist in a little-endian container::

    b"GTADATA1"
    u32 length + UTF-8 recipe text (key=value lines)
    u64 sample count
    per sample: u32 label, u32 rank, u64 extent * rank, f64 values
    u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError, FormatError
from .container import Reader, pack_array, pack_text, seal

DATA_MAGIC = b"GTADATA1"
NOISE = 0.05
TASKS = ("directional_dot", "reveal_cover")
_SPLITS = {"train": 0, "test": 1}


@dataclass(frozen=True)
class Recipe:
    task: str
    n: int
    t: int
    h: int
    w: int
    seed: int
    split: str = "train"
    noise: float = NOISE

    def to_text(self) -> str:
        return "".join(f"{k}={getattr(self, k)!r}\n" if k == "noise" else f"{k}={getattr(self, k)}\n"
                       for k in ("task", "n", "t", "h", "w", "seed", "split", "noise"))

    @classmethod
    def from_text(cls, text: str) -> "Recipe":
        kv = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        try:
            return cls(kv["task"], int(kv["n"]), int(kv["t"]), int(kv["h"]), int(kv["w"]),
                       int(kv["seed"]), kv["split"], float(kv["noise"]))
        except (KeyError, ValueError) as exc:
            raise FormatError(f"dataset recipe is incomplete or malformed: {exc}") from None

    def rng(self) -> np.random.Generator:
        # one independent stream per (task, split) for a given seed
        ss = np.random.SeedSequence(self.seed, spawn_key=(TASKS.index(self.task), _SPLITS[self.split]))
        return np.random.default_rng(ss)


@dataclass
class VideoSample:
    frames: np.ndarray          # (T, H, W, 1) in [0, 1]
    label: int
    provenance: tuple = field(default=())


@dataclass
class VideoDataset:
    samples: list[VideoSample]
    recipe: Recipe

    @property
    def split(self) -> str:
        return self.recipe.split

    def __len__(self) -> int:
        return len(self.samples)

    def frames(self, index=None) -> np.ndarray:
        pick = self.samples if index is None else [self.samples[i] for i in index]
        return np.stack([s.frames for s in pick])

    def labels(self, index=None) -> np.ndarray:
        pick = self.samples if index is None else [self.samples[i] for i in index]
        return np.array([s.label for s in pick], dtype=np.int64)

    def geometry(self) -> tuple[int, ...]:
        return self.samples[0].frames.shape

    def class_counts(self) -> dict[int, int]:
        labels = self.labels()
        return {int(c): int((labels == c).sum()) for c in np.unique(labels)}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for s in self.samples:
            h.update(struct.pack("<I", s.label))
            h.update(np.ascontiguousarray(s.frames, dtype="<f8").tobytes())
        return h.hexdigest()


def _check_geometry(n: int, t: int, h: int, w: int, noise: float) -> None:
    problems = []
    if n < 2 or n % 2:
        problems.append(f"n={n} must be a positive even number (exact class balance)")
    if t < 2:
        problems.append(f"t={t} must be >= 2")
    if h < 1 or w < 1:
        problems.append(f"h={h} and w={w} must be >= 1")
    if not 0.0 <= noise < 1.0:
        problems.append(f"noise={noise} must be in [0, 1)")
    if problems:
        raise ConfigError("; ".join(problems))


def _twin_pairs(trajectories: list[np.ndarray], recipe: Recipe, rng: np.random.Generator) -> VideoDataset:
    samples = []
    for i, base in enumerate(trajectories):
        clip = base
        if recipe.noise > 0:
            clip = np.clip(base + rng.uniform(-recipe.noise, recipe.noise, size=base.shape), 0.0, 1.0)
        clip = clip[..., None]
        samples.append(VideoSample(clip, 0, (recipe.task, recipe.seed, 2 * i)))
        samples.append(VideoSample(clip[::-1].copy(), 1, (recipe.task, recipe.seed, 2 * i + 1)))
    for s in samples:
        s.frames.flags.writeable = False
    return VideoDataset(samples, recipe)


def gen_directional_dot(n: int, t: int, h: int, w: int, seed: int, split: str = "train",
                        noise: float = NOISE) -> VideoDataset:
    """A one-pixel dot crossing a random row left to right (label 0) or right to left (label 1)."""
    _check_geometry(n, t, h, w, noise)
    if w < t:
        raise ConfigError(f"w={w} must be >= t={t} so the dot can move every frame")
    recipe = Recipe("directional_dot", n, t, h, w, seed, split, noise)
    rng = recipe.rng()
    max_speed = (w - 1) // (t - 1)
    trajectories = []
    for _ in range(n // 2):
        speed = int(rng.integers(1, max_speed + 1))
        start = int(rng.integers(0, w - speed * (t - 1)))
        row = int(rng.integers(0, h))
        clip = np.zeros((t, h, w))
        clip[np.arange(t), row, start + speed * np.arange(t)] = 1.0
        trajectories.append(clip)
    return _twin_pairs(trajectories, recipe, rng)


def gen_reveal_cover(n: int, t: int, h: int, w: int, seed: int, split: str = "train",
                     noise: float = NOISE) -> VideoDataset:
    """A random texture uncovered by a shrinking occluder (label 0) or covered by a growing one (label 1)."""
    _check_geometry(n, t, h, w, noise)
    if h < 2 or w < 2:
        raise ConfigError(f"h={h} and w={w} must be >= 2 for an occluder to move")
    recipe = Recipe("reveal_cover", n, t, h, w, seed, split, noise)
    rng = recipe.rng()
    trajectories = []
    for _ in range(n // 2):
        texture = rng.random((h, w))
        side = int(rng.integers(0, 4))          # occluder anchored left, right, top, bottom
        length = w if side < 2 else h
        first = int(rng.integers((length + 1) // 2, length + 1))
        last = int(rng.integers(0, length // 2))
        extents = np.rint(np.linspace(first, last, t)).astype(int)
        clip = np.repeat(texture[None], t, axis=0)
        for f, e in enumerate(extents):
            if e == 0:
                continue
            if side == 0:
                clip[f, :, :e] = 0.0
            elif side == 1:
                clip[f, :, w - e:] = 0.0
            elif side == 2:
                clip[f, :e, :] = 0.0
            else:
                clip[f, h - e:, :] = 0.0
        trajectories.append(clip)
    return _twin_pairs(trajectories, recipe, rng)


GENERATORS = {"directional_dot": gen_directional_dot, "reveal_cover": gen_reveal_cover}


def generate(task: str, n: int, t: int, h: int, w: int, seed: int, split: str = "train",
             noise: float = NOISE) -> VideoDataset:
    if task not in GENERATORS:
        raise ConfigError(f"unknown task {task!r}; expected one of {', '.join(TASKS)}")
    if split not in _SPLITS:
        raise ConfigError(f"split must be train or test, got {split!r}")
    return GENERATORS[task](n, t, h, w, seed, split, noise)


def permute_time(sample: VideoSample, perm: Sequence[int]) -> VideoSample:
    perm = [int(p) for p in perm]
    t = sample.frames.shape[0]
    if sorted(perm) != list(range(t)):
        raise ContractError(f"{perm} is not a permutation of 0..{t - 1}")
    frames = sample.frames[perm].copy()
    frames.flags.writeable = False
    return VideoSample(frames, sample.label, sample.provenance + (("perm", tuple(perm)),))


# ---------------------------------------------------------------- persistence

def dataset_bytes(ds: VideoDataset) -> bytes:
    parts = [DATA_MAGIC, pack_text(ds.recipe.to_text()), struct.pack("<Q", len(ds))]
    for s in ds.samples:
        parts.append(struct.pack("<I", s.label))
        parts.append(pack_array(s.frames))
    return seal(b"".join(parts))


def save_dataset(ds: VideoDataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def read_dataset(blob: bytes) -> VideoDataset:
    r = Reader(blob, DATA_MAGIC)
    recipe = Recipe.from_text(r.text())
    count_at = r.pos
    count = r.u64()
    samples = []
    for i in range(count):
        label = r.u32()
        frames = r.array()
        frames.flags.writeable = False
        samples.append(VideoSample(frames, label, (recipe.task, recipe.seed, i)))
    if not r.done:
        raise FormatError(f"{len(r.buf) - r.pos} unexpected bytes after {count} samples", offset=r.pos)
    if count != recipe.n:
        raise FormatError(f"recipe promises {recipe.n} samples, container holds {count}", offset=count_at)
    return VideoDataset(samples, recipe)


def load_dataset(path) -> VideoDataset:
    return read_dataset(Path(path).read_bytes())


def with_split(recipe: Recipe, split: str, n: int | None = None) -> Recipe:
    return replace(recipe, split=split, n=recipe.n if n is None else n)
