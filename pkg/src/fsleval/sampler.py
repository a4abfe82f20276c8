"""Deterministic K-way N-shot episode construction.

Episode randomness never flows through a shared sequential generator: each
episode derives its own 64-bit seed from (master_seed, episode_index), so
episode content is identical whatever order or thread count evaluates it.
All sampling is integer SplitMix64 plus Fisher-Yates, bit-reproducible
across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataio import EmbeddingDataset

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class InsufficientDataError(ValueError):
    """Dataset cannot supply the requested episode shape."""


def splitmix64(value: int) -> int:
    """One SplitMix64 step: the first output of a stream seeded at value."""
    z = (value + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Minimal SplitMix64 stream with unbiased bounded sampling."""

    __slots__ = ("_state",)

    def __init__(self, seed: int) -> None:
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, bound: int) -> int:
        """Uniform integer in [0, bound) via rejection (no modulo bias)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        threshold = (1 << 64) - ((1 << 64) % bound)
        while True:
            value = self.next_u64()
            if value < threshold:
                return value % bound

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]


def derive_episode_seed(master_seed: int, episode_index: int) -> int:
    """Per-episode seed: SplitMix64(master_seed + episode_index + 1)."""
    return splitmix64((master_seed + episode_index + 1) & _MASK64)


def sample_without_replacement(
    candidates: Sequence[int], k: int, rng: SplitMix64
) -> list[int]:
    """Draw k items uniformly without replacement (partial Fisher-Yates)."""
    pool = list(candidates)
    if k > len(pool):
        raise ValueError(f"cannot draw {k} items from {len(pool)} candidates")
    for i in range(k):
        j = i + rng.below(len(pool) - i)
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:k]


@dataclass(frozen=True)
class EpisodeConfig:
    """K-way N-shot protocol parameters for one evaluation run."""

    ways: int
    shots: int
    queries: int = 15
    episodes: int = 600
    master_seed: int = 0

    def __post_init__(self) -> None:
        for name in ("ways", "shots", "queries", "episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass(frozen=True)
class Episode:
    """One sampled task: disjoint support and query item positions.

    ``classes`` is sorted; local class id j refers to ``classes[j]``.
    ``support`` is (ways, shots) and ``query`` (ways, queries) of dataset
    item positions, row j drawn from ``classes[j]``.
    """

    episode_index: int
    seed: int
    classes: tuple[int, ...]
    support: np.ndarray
    query: np.ndarray


def eligible_classes(dataset: EmbeddingDataset, config: EpisodeConfig) -> list[int]:
    """Class ids with at least shots + queries items, in sorted order."""
    need = config.shots + config.queries
    return sorted(c for c, rows in dataset.class_index.items() if rows.size >= need)


def sample_episode(
    dataset: EmbeddingDataset, config: EpisodeConfig, episode_index: int
) -> Episode:
    """Sample episode ``episode_index`` of the configured stream.

    Classes are drawn uniformly without replacement from the eligible
    classes, then shots + queries item positions per class; the first
    ``shots`` form the support row. Classes with too few items are excluded
    from eligibility; an error is raised only if fewer than ``ways`` remain.
    """
    if not 0 <= episode_index < config.episodes:
        raise ValueError(
            f"episode_index {episode_index} outside 0..{config.episodes - 1}"
        )
    eligible = eligible_classes(dataset, config)
    if len(eligible) < config.ways:
        raise InsufficientDataError(
            f"{config.ways}-way episode needs {config.ways} classes with"
            f" >= {config.shots + config.queries} items;"
            f" dataset has {len(eligible)} eligible of {dataset.num_classes}"
        )
    seed = derive_episode_seed(config.master_seed, episode_index)
    rng = SplitMix64(seed)

    classes = sorted(sample_without_replacement(eligible, config.ways, rng))
    support = np.empty((config.ways, config.shots), dtype=np.int64)
    query = np.empty((config.ways, config.queries), dtype=np.int64)
    for local, cid in enumerate(classes):
        picks = sample_without_replacement(
            dataset.class_index[cid].tolist(), config.shots + config.queries, rng
        )
        support[local] = picks[: config.shots]
        query[local] = picks[config.shots :]
    support.flags.writeable = False
    query.flags.writeable = False
    return Episode(episode_index, seed, tuple(classes), support, query)
