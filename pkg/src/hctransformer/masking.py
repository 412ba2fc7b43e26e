"""Split clip feature maps into human and context position sets."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

DEFAULT_THRESHOLD = 0.5


class MaskSource(enum.Enum):
    PROVIDED = "provided"
    MAXPOOL = "maxpool-fallback"
    DATASET_AVERAGE = "dataset-average-fallback"


@dataclass
class HumanMask:
    grid: np.ndarray
    source: MaskSource = MaskSource.PROVIDED

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2:
            raise ValueError(f"mask grid must be H x W, got shape {self.grid.shape}")
        if np.any(self.grid < 0) or np.any(self.grid > 1):
            raise ValueError("mask entries must lie in [0, 1]")


@dataclass
class ClipPartition:
    human_set: list[tuple[tuple[int, int], np.ndarray]]
    context_set: list[tuple[tuple[int, int], np.ndarray]]

    @property
    def human_positions(self) -> set[tuple[int, int]]:
        return {p for p, _ in self.human_set}

    @property
    def context_positions(self) -> set[tuple[int, int]]:
        return {p for p, _ in self.context_set}


def _check_threshold(threshold: float) -> None:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")


def human_indicator(grid: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Boolean map, True where a position counts as human (``mask >= threshold``)."""
    _check_threshold(threshold)
    return np.asarray(grid) >= threshold


def partition(features: np.ndarray, mask: HumanMask, threshold: float = DEFAULT_THRESHOLD) -> ClipPartition:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3 or features.shape[:2] != mask.grid.shape:
        raise ValueError(f"feature map {features.shape} does not match mask grid {mask.grid.shape}")
    is_human = human_indicator(mask.grid, threshold)
    human, context = [], []
    h, w = mask.grid.shape
    for r in range(h):
        for c in range(w):
            item = ((r, c), features[r, c])
            (human if is_human[r, c] else context).append(item)
    return ClipPartition(human, context)


def dataset_average(masks) -> HumanMask:
    """Elementwise mean of a collection of training masks (grids or HumanMask)."""
    grids = [m.grid if isinstance(m, HumanMask) else np.asarray(m, dtype=np.float64) for m in masks]
    if not grids:
        raise ValueError("dataset_average: no masks")
    return HumanMask(np.mean(np.stack(grids), axis=0), MaskSource.PROVIDED)


def fallback_mask(clip_masks: list[HumanMask], dataset_avg: HumanMask,
                  threshold: float = DEFAULT_THRESHOLD) -> list[HumanMask]:
    """Replace masks whose human set is empty.

    An empty clip takes the elementwise max over the video's masks; when every
    clip is empty the whole video takes the dataset-average mask.
    """
    if not clip_masks:
        raise ValueError("fallback_mask: empty clip list")
    shape = clip_masks[0].grid.shape
    if any(m.grid.shape != shape for m in clip_masks) or dataset_avg.grid.shape != shape:
        raise ValueError("fallback_mask: masks do not share one spatial shape")
    empty = [not human_indicator(m.grid, threshold).any() for m in clip_masks]
    if all(empty):
        return [HumanMask(dataset_avg.grid.copy(), MaskSource.DATASET_AVERAGE) for _ in clip_masks]
    pooled = np.max(np.stack([m.grid for m in clip_masks]), axis=0)
    return [HumanMask(pooled.copy(), MaskSource.MAXPOOL) if e else m for m, e in zip(clip_masks, empty)]


def effective_masks(masks: np.ndarray, dataset_avg: np.ndarray,
                    threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Array form of :func:`fallback_mask` for one video: (M, H, W) -> (M, H, W)."""
    fixed = fallback_mask([HumanMask(m) for m in masks], HumanMask(dataset_avg), threshold)
    return np.stack([m.grid for m in fixed])


def position_masks(masks: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> tuple[np.ndarray, np.ndarray]:
    """Flattened (..., H*W) boolean human and context indicators for batched models."""
    hum = human_indicator(masks, threshold)
    hum = hum.reshape(hum.shape[:-2] + (-1,))
    return hum, ~hum
