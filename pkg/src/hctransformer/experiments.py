"""In-memory experiment runners shared by the scripts and the acceptance suite."""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, replace

import numpy as np

from .config import AblationFlags, ModelConfig, TrainConfig
from .evalsuite import accuracy, davies_bouldin, keyframe_ratio
from .model import prepare_split
from .synthbench import BenchSpec, generate_dataset
from .training import checkpoint_bytes, predict_prepared, two_stage_train

VARIANTS = {
    "backbone": "no_hm_encoder,no_ctx_encoder,no_decoder",
    "hm": "no_ctx_encoder,no_decoder",
    "ctx": "no_hm_encoder,no_decoder",
    "late": "no_decoder",
    "full": "",
    "full-prototypes": "no_prototypes",
    "full-masking": "no_masking",
}


@dataclass
class VariantResult:
    variant: str
    seed: int
    source_accuracy: float
    target_accuracy: float
    human_ratio: float | None
    davies_bouldin: float | None
    checkpoint_sha256: str
    seconds: float
    trace_finite: bool


def run_variant(name: str, seed: int, bench: BenchSpec | None = None, model: ModelConfig | None = None,
                train: TrainConfig | None = None, attribution_videos: int = 120,
                data=None) -> VariantResult:
    """Generate (or reuse) the benchmark for ``seed``, train one variant and score it."""
    t0 = time.perf_counter()
    bench = replace(bench or BenchSpec(), seed=seed)
    source, target, target_labels = data if data is not None else generate_dataset(bench)
    model = replace(model or ModelConfig(M=bench.M, D=bench.D), ablation=AblationFlags.parse(VARIANTS[name]))
    train = replace(train or TrainConfig(), seed=seed)
    state, trace = two_stage_train(source, target, model, train, bench.n_cls)
    src_prep = prepare_split(source, model)
    tgt_prep = prepare_split(target, model)
    tgt_pred = predict_prepared(state, tgt_prep)
    ratio = None
    if attribution_videos:
        idx = np.arange(min(attribution_videos, len(target)))
        ratio = keyframe_ratio(state, tgt_prep, target.masks, idx, tgt_pred.labels[idx],
                               (bench.H, bench.W))[0].ratio
    return VariantResult(
        variant=name,
        seed=seed,
        source_accuracy=accuracy(predict_prepared(state, src_prep).labels, source.labels),
        target_accuracy=accuracy(tgt_pred.labels, target_labels),
        human_ratio=ratio,
        davies_bouldin=davies_bouldin(tgt_pred.features, target_labels),
        checkpoint_sha256=hashlib.sha256(checkpoint_bytes(state)).hexdigest(),
        seconds=time.perf_counter() - t0,
        trace_finite=all(np.isfinite(r["total"]) for r in trace),
    )


def run_matrix(names, seeds, bench: BenchSpec | None = None, **kwargs) -> list[VariantResult]:
    out = []
    for seed in seeds:
        data = generate_dataset(replace(bench or BenchSpec(), seed=seed))
        for name in names:
            out.append(run_variant(name, seed, bench, data=data, **kwargs))
    return out


def seed_average(results: list[VariantResult], field: str) -> dict[str, float]:
    by: dict[str, list[float]] = {}
    for r in results:
        by.setdefault(r.variant, []).append(getattr(r, field))
    return {k: float(np.mean(v)) for k, v in by.items()}
