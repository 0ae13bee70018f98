"""Masking-ratio schedules and the multimodal future-token masking strategies."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .types import MaskingStrategy, MaskSet, ModalitySpec, Schedule, TokenLayout


def scheduled_count(r: float, schedule: Schedule, total: int) -> int:
    """Number of tokens to mask for ratio r, clamped to [1, total].

    IDENTITY keeps the raw ratio; COSINE maps r -> cos(pi*r/2) so small ratios
    mask aggressively and large ratios mask little.
    """
    if not (0.0 < r < 1.0):
        raise ValueError(f"masking ratio must lie in the open interval (0, 1), got {r}")
    if total < 1:
        raise ValueError(f"total token count must be >= 1, got {total}")
    if schedule is Schedule.IDENTITY:
        gamma = r
    elif schedule is Schedule.COSINE:
        gamma = math.cos(math.pi * r / 2.0)
    else:
        raise ValueError(f"unknown schedule {schedule}")
    return min(max(int(gamma * total), 1), total)


def _draw_ratio(rng: np.random.Generator) -> float:
    # uniform on the open interval: reject the (measure-zero) endpoint 0.0
    r = float(rng.random())
    while r == 0.0:
        r = float(rng.random())
    return r


def _random_subset_mask(rng: np.random.Generator, total: int, count: int) -> np.ndarray:
    mask = np.zeros(total, dtype=np.uint8)
    mask[rng.choice(total, size=count, replace=False)] = 1
    return mask


def _exclusive_from_common(common: np.ndarray, num_modalities: int,
                           rng: np.random.Generator) -> list[np.ndarray]:
    """Per-modality masks where each non-common token stays visible in exactly
    one uniformly chosen modality and is masked in the other K-1."""
    visible_idx = np.flatnonzero(common == 0)
    owner = rng.integers(0, num_modalities, size=visible_idx.size)
    masks = []
    for i in range(num_modalities):
        m = np.ones_like(common)
        m[visible_idx[owner == i]] = 0
        masks.append(m)
    return masks


@dataclass
class MaskSampler:
    """Draws one MaskSet per call; stateless apart from its rng."""

    strategy: MaskingStrategy
    schedule: Schedule
    layout: TokenLayout
    modalities: tuple[ModalitySpec, ...]
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    def sample(self) -> MaskSet:
        names = [m.name for m in self.modalities]
        total = self.layout.future_tokens
        strategy = self.strategy

        if strategy is MaskingStrategy.FULLY_MASKED:
            per = {name: np.ones(total, dtype=np.uint8) for name in names}
            return MaskSet(per_modality=per, ratio=1.0, scheduled_count=total,
                           ratios={name: 1.0 for name in names})

        if strategy is MaskingStrategy.FULLY_INDEPENDENT_DIFF_R:
            per, ratios = {}, {}
            for name in names:
                r = _draw_ratio(self.rng)
                count = scheduled_count(r, self.schedule, total)
                per[name] = _random_subset_mask(self.rng, total, count)
                ratios[name] = r
            first = names[0]
            return MaskSet(per_modality=per, ratio=ratios[first],
                           scheduled_count=int(per[first].sum()), ratios=ratios)

        r = _draw_ratio(self.rng)
        count = scheduled_count(r, self.schedule, total)
        ratios = {name: r for name in names}

        if strategy is MaskingStrategy.FULLY_INDEPENDENT_SAME_R:
            per = {name: _random_subset_mask(self.rng, total, count) for name in names}
        elif strategy is MaskingStrategy.FULLY_SHARED:
            shared = _random_subset_mask(self.rng, total, count)
            per = {name: shared.copy() for name in names}
        elif strategy is MaskingStrategy.PARTIALLY_SHARED_EXCLUSIVE:
            common = _random_subset_mask(self.rng, total, count)
            masks = _exclusive_from_common(common, len(names), self.rng)
            per = dict(zip(names, masks))
        else:
            raise ValueError(f"unknown masking strategy {strategy}")
        return MaskSet(per_modality=per, ratio=r, scheduled_count=count, ratios=ratios)


def sample_masks(sampler: MaskSampler) -> MaskSet:
    return sampler.sample()
