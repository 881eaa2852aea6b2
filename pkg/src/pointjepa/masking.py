"""Target-block and context sampling over sequencer positions."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from pointjepa.errors import InvalidArgument

MAX_REDRAWS = 100


class Strategy(str, Enum):
    MULTI_BLOCK = "multi-block"
    SINGLE_CONTIGUOUS = "single-contiguous"
    SINGLE_RANDOM = "single-random"


@dataclass(frozen=True)
class MaskConfig:
    target_ratio: tuple = (0.15, 0.2)
    target_count: int = 4
    context_ratio: tuple = (0.4, 0.75)
    strategy: Strategy = Strategy.MULTI_BLOCK

    def __post_init__(self):
        object.__setattr__(self, "target_ratio", tuple(float(v) for v in self.target_ratio))
        object.__setattr__(self, "context_ratio", tuple(float(v) for v in self.context_ratio))
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        for name in ("target_ratio", "context_ratio"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi <= 1:
                raise InvalidArgument(f"{name} must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
        if self.target_count < 1:
            raise InvalidArgument("target_count must be >= 1")


@dataclass(frozen=True)
class MaskSample:
    target_blocks: list  # list of int64 arrays of ordering positions
    context: np.ndarray

    @property
    def target_union(self) -> np.ndarray:
        return np.unique(np.concatenate(self.target_blocks))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def block_length(u: float, c: int) -> int:
    return max(1, round_half_up(u * c))


def length_bounds(ratio, c: int) -> tuple:
    """Smallest and largest block length reachable for a ratio range."""
    return block_length(ratio[0], c), block_length(ratio[1], c)


def sample_target_blocks(c: int, cfg: MaskConfig, rng: np.random.Generator) -> list:
    """Draw ``cfg.target_count`` contiguous, possibly overlapping blocks."""
    if c < 2:
        raise InvalidArgument(f"need at least 2 positions to mask, got {c}")
    lo, hi = cfg.target_ratio
    blocks = []
    for _ in range(cfg.target_count):
        length = block_length(rng.uniform(lo, hi), c)
        s = int(rng.integers(0, c - length + 1))
        blocks.append(np.arange(s, s + length, dtype=np.int64))
    return blocks


def sample_context(c: int, target_union, cfg: MaskConfig, rng: np.random.Generator) -> np.ndarray:
    """A contiguous run over the positions left after removing targets."""
    available = np.setdiff1d(np.arange(c, dtype=np.int64), np.asarray(target_union, dtype=np.int64))
    a = available.shape[0]
    if a == 0:
        raise InvalidArgument("no positions left for the context")
    lo, hi = cfg.context_ratio
    length = block_length(rng.uniform(lo, hi), a)
    s = int(rng.integers(0, a - length + 1))
    return available[s : s + length]


def sample_single_block(c: int, cfg: MaskConfig, rng: np.random.Generator) -> MaskSample:
    """One target block of ``target_ratio`` size; every other position is context."""
    if c < 2:
        raise InvalidArgument(f"need at least 2 positions to mask, got {c}")
    lo, hi = cfg.target_ratio
    length = block_length(rng.uniform(lo, hi), c)
    if length >= c:
        raise InvalidArgument(f"target block of {length} leaves no context at c={c}")
    if cfg.strategy is Strategy.SINGLE_RANDOM:
        target = np.sort(rng.choice(c, size=length, replace=False)).astype(np.int64)
    else:
        s = int(rng.integers(0, c - length + 1))
        target = np.arange(s, s + length, dtype=np.int64)
    context = np.setdiff1d(np.arange(c, dtype=np.int64), target)
    return MaskSample([target], context)


def sample_mask(c: int, cfg: MaskConfig, rng: np.random.Generator) -> MaskSample:
    if cfg.strategy is not Strategy.MULTI_BLOCK:
        return sample_single_block(c, cfg, rng)
    # Redraw in the rare case the targets swallow every position.
    for _ in range(MAX_REDRAWS):
        blocks = sample_target_blocks(c, cfg, rng)
        union = np.unique(np.concatenate(blocks))
        if union.shape[0] < c:
            return MaskSample(blocks, sample_context(c, union, cfg, rng))
    raise InvalidArgument(f"targets cover all {c} positions in {MAX_REDRAWS} draws")
