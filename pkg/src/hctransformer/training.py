"""Adversarial schedules, optimizers, the two-stage procedure, inference and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc, prototypes
from .config import AblationFlags, ModelConfig, StageConfig, TrainConfig
from .layers import bind
from .model import (BACKBONE, CTX_ONLY, FULL, HM_ONLY, LATE_FUSION, LOSS_TERMS, Batch, ModelState,
                    PreparedSplit, eval_subsets, forward, init_model, is_stage1, make_batch, prepare_split)
from .synthbench import Split, VideoRecord

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("step", "L_hm", "L_ctx", "L_hc", "L_video", "total", "lr", "grl_coef")


def grl_coefficient(p: float, gamma: float = 10.0) -> float:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {p}")
    return 2.0 / (1.0 + math.exp(-gamma * p)) - 1.0


def learning_rate(lr0: float, p: float, alpha: float = 10.0, beta: float = 0.75) -> float:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {p}")
    return lr0 / (1.0 + alpha * p) ** beta


class SGD:
    def __init__(self, weight_decay: float = 0.0, momentum: float = 0.0):
        self.wd = weight_decay
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        for n, g in grads.items():
            if self.wd:
                g = g + self.wd * params[n]
            if self.momentum:
                v = self.momentum * self.velocity.get(n, 0.0) + g
                self.velocity[n] = v
                g = v
            params[n] = params[n] - lr * g


class Adam:
    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for n, g in grads.items():
            if self.wd:
                g = g + self.wd * params[n]
            m = self.b1 * self.m.get(n, 0.0) + (1 - self.b1) * g
            v = self.b2 * self.v.get(n, 0.0) + (1 - self.b2) * g * g
            self.m[n], self.v[n] = m, v
            params[n] = params[n] - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(stage: StageConfig, tc: TrainConfig):
    if stage.optimizer == "sgd":
        return SGD(stage.weight_decay, stage.momentum)
    return Adam(tc.adam_betas, tc.adam_eps, stage.weight_decay)


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class StepResult:
    breakdown: dict[str, float]
    grads: dict[str, np.ndarray]


def loss_and_grads(state: ModelState, batch: Batch, trainable: Callable[[str], bool], grl_coeff: float,
                   rng: np.random.Generator | None, human_only: bool = False) -> StepResult:
    with dc.Tape():
        P = bind(state.params, trainable)
        out = forward(state, P, batch, grl_coeff=grl_coeff, rng=rng, human_only=human_only)
        breakdown = out.breakdown()
        for k, v in breakdown.items():
            if not math.isfinite(v):
                raise NonFiniteLoss(f"non-finite loss term {k} = {v}")
        g = dc.backward(out.total)
    grads = {n: dc.grad_of(g, P[n]) for n in state.params if trainable(n)}
    return StepResult(breakdown, grads)


def paired_batches(n_source: int, n_target: int, per_side: int, rng: np.random.Generator):
    """One epoch of (source idx, target idx) pairs; the smaller split is cycled."""
    steps = math.ceil(max(n_source, n_target) / per_side)
    need = steps * per_side

    def order(n):
        reps = math.ceil(need / n)
        return np.concatenate([rng.permutation(n) for _ in range(reps)])[:need]

    src, tgt = order(n_source), order(n_target)
    for s in range(steps):
        sl = slice(s * per_side, (s + 1) * per_side)
        yield src[sl], tgt[sl]


def train_stage(state: ModelState, source: PreparedSplit, target: PreparedSplit, stage: StageConfig,
                trainable: Callable[[str], bool], rng: np.random.Generator, trace: list[dict],
                step0: int = 0, on_epoch: Callable[[int], None] | None = None, human_only: bool = False) -> int:
    tc = state.train
    opt = make_optimizer(stage, tc)
    steps_per_epoch = math.ceil(max(len(source), len(target)) / tc.batch_pairs)
    total = max(1, stage.epochs * steps_per_epoch)
    it = 0
    for epoch in range(stage.epochs):
        for s_idx, t_idx in paired_batches(len(source), len(target), tc.batch_pairs, rng):
            p = it / total
            lr = learning_rate(stage.lr0, p, tc.lr_alpha, tc.lr_beta)
            coeff = grl_coefficient(p, tc.grl_gamma)
            batch = make_batch([(source, s_idx), (target, t_idx)])
            res = loss_and_grads(state, batch, trainable, coeff, rng, human_only)
            opt.step(state.params, res.grads, lr)
            trace.append({"step": step0 + it, **res.breakdown, "lr": lr, "grl_coef": coeff})
            it += 1
        log.debug("epoch %d/%d total=%.4f", epoch + 1, stage.epochs, trace[-1]["total"])
        if on_epoch is not None:
            on_epoch(epoch + 1)
    return step0 + it


def context_features(prep: PreparedSplit) -> tuple[np.ndarray, np.ndarray]:
    """Raw context-position features and their video labels."""
    sel = prep.context
    feats = prep.features[sel]
    labels = np.broadcast_to(prep.labels[:, None, None], sel.shape)[sel]
    return feats, labels


def build_prototypes(state: ModelState, source: PreparedSplit, target: PreparedSplit, seed: int) -> None:
    cfg = state.model
    K = cfg.num_prototypes(state.n_cls)
    src_x, src_y = context_features(source)
    clf = prototypes.train_context_classifier(src_x, src_y, state.n_cls, seed, epochs=cfg.ctx_clf_epochs)
    tgt_x, _ = context_features(target)
    banks, meta = [], {}
    for name, feats in (("source", src_x), ("target", tgt_x)):
        bank = prototypes.build_bank(feats, clf, K, cfg.keep_fraction, seed, name,
                                     cfg.kmeans_max_iters, cfg.kmeans_tol)
        banks.append(bank.prototypes)
        meta[name] = {"kept_fraction": bank.kept_fraction, "inertia_trace": bank.inertia_trace}
    state.banks = np.stack(banks)
    state.bank_meta = meta


def two_stage_train(source: Split, target: Split, model_cfg: ModelConfig, train_cfg: TrainConfig,
                    n_cls: int) -> tuple[ModelState, list[dict]]:
    """Stage 1 fits the human branch with SGD; stage 2 fits the rest with Adam, human branch frozen."""
    if source is None or target is None or len(source) == 0 or len(target) == 0:
        raise ValueError("two_stage_train: both a labeled source split and a target split are required")
    if np.any(source.labels < 0):
        raise ValueError("two_stage_train: source split must be fully labeled")
    if np.any(target.labels >= 0):
        raise ValueError("two_stage_train: target labels must be withheld during training")
    tc = train_cfg
    state = init_model(model_cfg, n_cls, tc, seed=tc.seed)
    rng = np.random.default_rng(tc.seed)
    src = prepare_split(source, model_cfg)
    tgt = prepare_split(target, model_cfg)
    trace: list[dict] = []
    kind = state.variant
    step = 0
    if kind == BACKBONE:
        step = train_stage(state, src, tgt, tc.stage1, lambda n: True, rng, trace, step)
        return state, trace
    if kind in (FULL, HM_ONLY, LATE_FUSION):
        step = train_stage(state, src, tgt, tc.stage1, is_stage1, rng, trace, step, human_only=True)
    if kind == HM_ONLY:
        return state, trace
    if kind == FULL and model_cfg.warm_start_classifier:
        state.params["cls.W"] = state.params["hm_cls.W"].copy()
        state.params["cls.b"] = state.params["hm_cls.b"].copy()
    if not model_cfg.ablation.no_prototypes:
        build_prototypes(state, src, tgt, tc.seed)
    refresh = model_cfg.prototype_refresh_epochs

    def on_epoch(epoch):
        if refresh and not model_cfg.ablation.no_prototypes and epoch % refresh == 0:
            build_prototypes(state, src, tgt, tc.seed + epoch)

    stage2_trainable = (lambda n: True) if kind == CTX_ONLY else (lambda n: not is_stage1(n))
    train_stage(state, src, tgt, tc.stage2, stage2_trainable, rng, trace, step, on_epoch)
    return state, trace


# --- inference ---------------------------------------------------------------------


@dataclass
class Predictions:
    labels: np.ndarray
    scores: np.ndarray
    features: np.ndarray


def predict_prepared(state: ModelState, prep: PreparedSplit, chunk: int = 256) -> Predictions:
    P = bind(state.params, lambda n: False)
    subsets = eval_subsets(state.model)
    scores, feats = [], []
    for start in range(0, len(prep), chunk):
        idx = np.arange(start, min(start + chunk, len(prep)))
        batch = make_batch([(prep, idx)])
        batch.labels = np.full(len(idx), -1)
        out = forward(state, P, batch, subsets=subsets)
        scores.append(out.probs)
        feats.append(out.feature)
    s = np.concatenate(scores)
    return Predictions(np.argmax(s, axis=1), s, np.concatenate(feats))


def predict_split(state: ModelState, split: Split) -> Predictions:
    unlabeled = Split(split.features, split.masks, np.full(len(split), -1), split.domain)
    return predict_prepared(state, prepare_split(unlabeled, state.model))


def predict(video: VideoRecord, state: ModelState, dataset_avg: np.ndarray | None = None) -> tuple[int, np.ndarray]:
    """Class label and class scores for one video on the deterministic path."""
    split = Split(video.clips[None], video.mask[None], np.array([-1]), video.domain)
    prep = prepare_split(split, state.model, dataset_avg)
    pred = predict_prepared(state, prep)
    return int(pred.labels[0]), pred.scores[0]


# --- checkpoints and traces ----------------------------------------------------------

CKPT_MAGIC = b"HCTCKPT\x00"
CKPT_VERSION = 1


def _config_doc(state: ModelState) -> dict:
    return {"model": asdict(state.model), "train": asdict(state.train), "n_cls": state.n_cls,
            "bank_meta": state.bank_meta}


def checkpoint_bytes(state: ModelState) -> bytes:
    tensors = dict(state.params)
    if state.banks is not None:
        tensors["prototypes.source"] = state.banks[0]
        tensors["prototypes.target"] = state.banks[1]
    buf = io.BytesIO()
    meta = json.dumps(_config_doc(state), sort_keys=True).encode()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        nb = name.encode()
        arr = np.asarray(arr, dtype="<f8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def save_checkpoint(path: str | Path, state: ModelState) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def _model_config(doc: dict) -> ModelConfig:
    doc = dict(doc)
    doc["ablation"] = AblationFlags(**doc["ablation"])
    return ModelConfig(**doc)


def _train_config(doc: dict) -> TrainConfig:
    doc = dict(doc)
    doc["stage1"] = StageConfig(**doc["stage1"])
    doc["stage2"] = StageConfig(**doc["stage2"])
    doc["adam_betas"] = tuple(doc["adam_betas"])
    return TrainConfig(**doc)


def load_checkpoint_bytes(raw: bytes) -> ModelState:
    if raw[:8] != CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, meta_len = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 16
    doc = json.loads(raw[off:off + meta_len])
    off += meta_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nl,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nl].decode()
        off += nl
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", raw, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(raw, "<f8", size, off).reshape(shape).astype(np.float64)
        off += 8 * size
    banks = None
    if "prototypes.source" in tensors:
        banks = np.stack([tensors.pop("prototypes.source"), tensors.pop("prototypes.target")])
    return ModelState(tensors, _model_config(doc["model"]), _train_config(doc["train"]), doc["n_cls"],
                      banks, doc.get("bank_meta", {}))


def load_checkpoint(path: str | Path) -> ModelState:
    return load_checkpoint_bytes(Path(path).read_bytes())


def write_trace(path: str | Path, trace: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in trace:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in TRACE_COLUMNS})
