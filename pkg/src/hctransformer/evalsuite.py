"""Accuracy, gradient-times-activation attribution, Human Ratio and the Davies-Bouldin index."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .layers import bind
from .model import ModelState, PreparedSplit, eval_subsets, forward, make_batch

log = logging.getLogger(__name__)


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"accuracy: {predictions.shape} predictions vs {labels.shape} labels")
    if labels.size == 0:
        raise ValueError("accuracy: empty input")
    return float(np.mean(predictions == labels))


def confusion_matrix(predictions, labels, n_cls: int) -> np.ndarray:
    cm = np.zeros((n_cls, n_cls), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm


@dataclass
class AttributionMap:
    maps: np.ndarray  # (M, H, W), each clip max-normalised to [0, 1]
    threshold_coef: float = 0.5

    def binarized(self) -> np.ndarray:
        return binarize(self.maps, self.threshold_coef)


def binarize(maps: np.ndarray, threshold_coef: float = 0.5) -> np.ndarray:
    """Per-clip set of positions at or above ``threshold_coef`` times the clip maximum."""
    peak = maps.reshape(maps.shape[0], -1).max(axis=1)[:, None, None]
    return (maps >= threshold_coef * peak) & (peak > 0)


def saliency(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    """relu(sum_d grad * x) per position, max-normalised per clip. (..., N, D) -> (..., N)."""
    s = np.maximum((grad * x).sum(axis=-1), 0.0)
    peak = s.max(axis=-1, keepdims=True)
    return np.divide(s, peak, out=np.zeros_like(s), where=peak > 0)


def attribution_maps(state: ModelState, prep: PreparedSplit, indices, target_classes,
                     grid: tuple[int, int], threshold_coef: float = 0.5) -> list[AttributionMap]:
    """Gradient-times-activation maps of the target-class logit for each selected video."""
    subsets = eval_subsets(state.model)
    out_maps = []
    for idx, cls in zip(np.atleast_1d(indices), np.atleast_1d(target_classes)):
        batch = make_batch([(prep, np.array([idx]))])
        batch.labels = np.array([-1])
        with dc.Tape():
            P = bind(state.params, lambda n: False)
            x = dc.leaf(batch.features)
            out = forward(state, P, batch, x=x, subsets=subsets)
            score = dc.take(dc.reshape(out.logits, (-1,)), [int(cls)], axis=0)
            grads = dc.backward(dc.sum_all(score))
        g = dc.grad_of(grads, x)
        if not np.isfinite(g).all():
            raise dc.NonFiniteError(f"attribution: non-finite gradient for video {idx}")
        s = saliency(g[0], batch.features[0])
        out_maps.append(AttributionMap(s.reshape((s.shape[0],) + tuple(grid)), threshold_coef))
    return out_maps


@dataclass
class HumanRatio:
    ratio: float  # percentage
    used: int
    skipped: int


def human_ratio(maps, masks, threshold_coef: float = 0.5, denominator: str = "attribution") -> HumanRatio:
    """Mean overlap between binarised attribution and human masks over keyframes, in percent.

    ``maps`` and ``masks`` are sequences of (H, W) keyframe grids. Keyframes
    whose binarised map is empty are skipped and counted. ``denominator`` picks
    the normaliser: attribution area (default), mask area, or their union.
    """
    if denominator not in ("attribution", "mask", "union"):
        raise ValueError(f"human_ratio: unknown denominator {denominator!r}")
    values, skipped = [], 0
    for m, h in zip(maps, masks):
        m = np.asarray(m, dtype=np.float64)
        h = np.asarray(h) >= 0.5
        if m.shape != h.shape:
            raise ValueError(f"human_ratio: map {m.shape} and mask {h.shape} do not align")
        b = binarize(m[None], threshold_coef)[0]
        if not b.any():
            skipped += 1
            continue
        inter = (b & h).sum()
        denom = {"attribution": b.sum(), "mask": h.sum(), "union": (b | h).sum()}[denominator]
        values.append(inter / denom if denom else 0.0)
    if skipped:
        log.info("human_ratio: skipped %d keyframes with empty attribution", skipped)
    ratio = 100.0 * float(np.mean(values)) if values else float("nan")
    return HumanRatio(ratio, len(values), skipped)


def davies_bouldin(features, labels) -> float:
    """Mean over classes of the worst (s_i + s_j) / d_ij; s is mean distance to the class centroid."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("davies_bouldin: need at least two classes")
    cents = np.stack([x[labels == c].mean(axis=0) for c in classes])
    scatter = np.array([np.linalg.norm(x[labels == c] - cents[i], axis=1).mean() for i, c in enumerate(classes)])
    dist = np.linalg.norm(cents[:, None] - cents[None], axis=-1)
    worst = np.zeros(len(classes))
    for i in range(len(classes)):
        ratios = []
        for j in range(len(classes)):
            if i == j:
                continue
            if dist[i, j] < 1e-12:
                log.warning("davies_bouldin: classes %s and %s have coincident centroids", classes[i], classes[j])
                return math.inf
            ratios.append((scatter[i] + scatter[j]) / dist[i, j])
        worst[i] = max(ratios)
    return float(worst.mean())


@dataclass
class MetricsReport:
    variant: str
    source_accuracy: float | None = None
    target_accuracy: float | None = None
    human_ratio: float | None = None
    human_ratio_skipped: int = 0
    davies_bouldin_target: float | None = None
    loss_trace_final: dict = field(default_factory=dict)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    def to_csv(self, path: str | Path) -> None:
        row = {k: v for k, v in asdict(self).items() if k != "loss_trace_final"}
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            w.writeheader()
            w.writerow(row)


def keyframe_ratio(state: ModelState, prep: PreparedSplit, masks: np.ndarray, indices, target_classes,
                   grid: tuple[int, int], threshold_coef: float = 0.5,
                   denominator: str = "attribution") -> tuple[HumanRatio, list[AttributionMap]]:
    """Human Ratio over every clip (the keyframes) of the selected videos."""
    amaps = attribution_maps(state, prep, indices, target_classes, grid, threshold_coef)
    frames = [m for a in amaps for m in a.maps]
    gts = [g for i in np.atleast_1d(indices) for g in masks[i]]
    return human_ratio(frames, gts, threshold_coef, denominator), amaps


def dump_maps(out_dir: str | Path, amaps: list[AttributionMap], indices) -> None:
    """One flat little-endian float64 file per video, (M, H, W) row-major."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, a in zip(np.atleast_1d(indices), amaps):
        (out / f"video_{int(i):05d}.f64").write_bytes(np.ascontiguousarray(a.maps, dtype="<f8").tobytes())
