"""HCTransformer assembly: parameter layout, model variants, and the batched forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import context_encoder, diffcore as dc, hc_decoder, human_encoder
from .config import ModelConfig, TrainConfig
from .layers import Bound, ParamStore, class_loss, discriminate, domain_loss, discriminator_names, linear
from .masking import dataset_average, effective_masks, position_masks

FULL, HM_ONLY, CTX_ONLY, LATE_FUSION, BACKBONE = "full", "hm", "ctx", "late", "backbone"
LOSS_TERMS = ("L_hm", "L_ctx", "L_hc", "L_video")


def variant(cfg: ModelConfig) -> str:
    a = cfg.ablation
    has_hm, has_ctx = not a.no_hm_encoder, not a.no_ctx_encoder
    if has_hm and has_ctx:
        return LATE_FUSION if a.no_decoder else FULL
    if has_hm:
        return HM_ONLY
    if has_ctx:
        return CTX_ONLY
    return BACKBONE


@dataclass
class ModelState:
    params: dict[str, np.ndarray]
    model: ModelConfig
    train: TrainConfig
    n_cls: int
    banks: np.ndarray | None = None  # (2, K, D): source bank, target bank
    bank_meta: dict = field(default_factory=dict)

    @property
    def variant(self) -> str:
        return variant(self.model)


def init_model(cfg: ModelConfig, n_cls: int, train: TrainConfig | None = None, seed: int = 0) -> ModelState:
    cfg.validate()
    store = ParamStore(np.random.default_rng(seed))
    kind = variant(cfg)
    M, D, D_v = cfg.M, cfg.D, cfg.D_v
    if kind == BACKBONE:
        store.linear("bb.fc", D, D_v)
        store.linear("bb.cls", D_v, n_cls)
        store.discriminator("disc.bb", D_v)
    if kind in (FULL, HM_ONLY, LATE_FUSION):
        human_encoder.init_params(store, M, D, D_v, n_cls)
    if kind in (FULL, CTX_ONLY, LATE_FUSION):
        context_encoder.init_params(store, M, D, D_v, cfg.L_e, cfg.separate_proto_params)
    if kind == FULL:
        hc_decoder.init_params(store, M, D_v, cfg.L_d, cfg.decoder_self_attn)
        if cfg.zero_init_decoder:
            for n in store.arrays:
                if n.startswith("dec.") and (".o." in n or ".fc2." in n):
                    store.arrays[n] = np.zeros_like(store.arrays[n])
    if kind in (FULL, CTX_ONLY, LATE_FUSION):
        store.linear("cls", D_v, n_cls)
        store.discriminator("disc.video", D_v)
    return ModelState(store.arrays, cfg, train or TrainConfig(), n_cls)


def count_discriminators(state: ModelState) -> int:
    return len(discriminator_names(state.params))


STAGE1_PREFIXES = ("hm.", "hm_cls.", "disc.trn", "disc.proj")


def is_stage1(name: str) -> bool:
    return name.startswith(STAGE1_PREFIXES)


# --- data --------------------------------------------------------------------------


@dataclass
class PreparedSplit:
    """A split flattened to (n, M, N, D) with per-position human/context indicators."""

    features: np.ndarray
    human: np.ndarray
    context: np.ndarray
    labels: np.ndarray
    domain: int

    def __len__(self):
        return len(self.labels)


def prepare_split(split, cfg: ModelConfig, dataset_avg: np.ndarray | None = None) -> PreparedSplit:
    n, M, H, W, D = split.features.shape
    feats = split.features.reshape(n, M, H * W, D)
    if cfg.ablation.no_masking:
        ones = np.ones((n, M, H * W), dtype=bool)
        return PreparedSplit(feats, ones, ones.copy(), split.labels, split.domain)
    avg = dataset_average(split.masks.reshape(-1, H, W)).grid if dataset_avg is None else dataset_avg
    masks = np.stack([effective_masks(m, avg, cfg.mask_threshold) for m in split.masks])
    human, context = position_masks(masks, cfg.mask_threshold)
    return PreparedSplit(feats, human, context, split.labels, split.domain)


@dataclass
class Batch:
    features: np.ndarray  # (B, M, N, D)
    human: np.ndarray  # (B, M, N)
    context: np.ndarray
    labels: np.ndarray  # (B,), -1 for unlabeled
    domains: np.ndarray  # (B,)

    def __len__(self):
        return len(self.labels)


def make_batch(parts: list[tuple[PreparedSplit, np.ndarray]]) -> Batch:
    return Batch(
        np.concatenate([p.features[i] for p, i in parts]),
        np.concatenate([p.human[i] for p, i in parts]),
        np.concatenate([p.context[i] for p, i in parts]),
        np.concatenate([p.labels[i] for p, i in parts]),
        np.concatenate([np.full(len(i), p.domain) for p, i in parts]),
    )


# --- forward -----------------------------------------------------------------------


@dataclass
class Outputs:
    losses: dict[str, dc.DiffArray]
    logits: dc.DiffArray  # score used for prediction and attribution
    probs: np.ndarray
    feature: np.ndarray  # video-level feature before the classifier
    inter: dict = field(default_factory=dict)

    @property
    def total(self) -> dc.DiffArray:
        t = self.losses["L_hm"]
        for k in LOSS_TERMS[1:]:
            t = t + self.losses[k]
        return t

    def breakdown(self) -> dict[str, float]:
        out = {k: float(self.losses[k].data) for k in LOSS_TERMS}
        out["total"] = float(self.total.data)
        return out


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(state: ModelState, P: Bound, batch: Batch, x: dc.DiffArray | None = None, grl_coeff: float = 1.0,
            rng: np.random.Generator | None = None, subsets: dict | None = None,
            temperature: float = 1.0, lambdas: dict | None = None, human_only: bool = False) -> Outputs:
    """Run the configured variant on a batch and assemble every loss term.

    ``x`` may be supplied as a differentiable view of ``batch.features``
    (used by gradient checks and attribution). TRN subsets come from ``subsets``
    when given, otherwise from ``rng``. ``human_only`` stops after the human
    encoder, which is all the first training stage needs.
    """
    cfg, tc = state.model, state.train
    lam = {"hm": tc.lambda_hm, "ctx": tc.lambda_ctx, "hc": tc.lambda_hc, "H": tc.lambda_H}
    if lambdas:
        lam.update(lambdas)
    kind = variant(cfg)
    x = dc.constant(batch.features) if x is None else x
    zero = dc.constant(0.0)
    losses = {k: zero for k in LOSS_TERMS}
    inter: dict = {"parts": {}}
    parts = inter["parts"]

    if kind == BACKBONE:
        pooled = dc.mean_pool(dc.mean_pool(x, axis=2), axis=1)
        feat = dc.relu(linear(P, "bb.fc", pooled))
        logits = linear(P, "bb.cls", feat)
        cls = class_loss(logits, batch.labels)
        adv = domain_loss(discriminate(P, "disc.bb", feat, grl_coeff), batch.domains)
        losses["L_video"] = cls + dc.scale(adv, lam["H"])
        return Outputs(losses, logits, _softmax(logits.data), feat.data, inter)

    hm_logits = None
    if kind in (FULL, HM_ONLY, LATE_FUSION):
        x_hat = human_encoder.aggregate_human(P, x, batch.human)
        proj = linear(P, "hm.proj", x_hat)
        hm = {"x_hat": x_hat, "proj": proj,
              "Z_hm": human_encoder.trn_forward(P, proj, rng, cfg.trn_subsets, subsets)}
        inter.update(hm)
        losses["L_hm"] = human_encoder.human_encoder_loss(
            P, hm["Z_hm"], hm["proj"], batch.labels, batch.domains, lam["hm"], grl_coeff, parts)
        hm_feat = human_encoder.video_feature(hm["Z_hm"])
        hm_logits = linear(P, "hm_cls", hm_feat)
        if kind == HM_ONLY or human_only:
            return Outputs(losses, hm_logits, _softmax(hm_logits.data), hm_feat.data, inter)

    banks = None if cfg.ablation.no_prototypes else state.banks
    if not cfg.ablation.no_prototypes and banks is None:
        raise ValueError("forward: prototype banks have not been built")
    tokens = context_encoder.context_inputs(P, x, batch.context, banks, batch.domains)
    per_layer = context_encoder.context_encode(P, tokens, cfg.L_e, cfg.separate_proto_params,
                                               weights_out=inter.setdefault("ctx_attn", []))
    inter["tokens"] = tokens
    inter["Z_ctx_layers"] = per_layer
    losses["L_ctx"] = context_encoder.context_alignment_loss(P, per_layer, batch.domains, lam["ctx"],
                                                             grl_coeff, parts)
    if kind == FULL:
        dec = hc_decoder.hc_decode(P, inter["Z_hm"], per_layer[-1], cfg.L_d, temperature,
                                   weights_out=inter.setdefault("dec_attn", []))
        inter["Z_hc_layers"] = dec.per_layer
        losses["L_hc"] = hc_decoder.hc_alignment_loss(P, dec, batch.domains, lam["hc"], grl_coeff, parts)
        feat = human_encoder.video_feature(dec.final)
    else:
        feat = dc.mean_pool(per_layer[-1], axis=per_layer[-1].ndim - 2)
    logits = linear(P, "cls", feat)
    cls = class_loss(logits, batch.labels)
    adv = domain_loss(discriminate(P, "disc.video", feat, grl_coeff), batch.domains)
    losses["L_video"] = cls + dc.scale(adv, lam["H"])
    parts["video_cls"], parts["video_adv"] = float(cls.data), float(adv.data)
    if kind == LATE_FUSION:
        probs = 0.5 * (_softmax(hm_logits.data) + _softmax(logits.data))
        score = hm_logits + logits
        feature = np.concatenate([hm_feat.data, feat.data], axis=-1)
        return Outputs(losses, score, probs, feature, inter)
    return Outputs(losses, logits, _softmax(logits.data), feat.data, inter)


def eval_subsets(cfg: ModelConfig) -> dict[int, np.ndarray]:
    """Fixed TRN subsets for the deterministic inference path."""
    rng = np.random.default_rng(cfg.eval_seed)
    return {i: human_encoder.trn_subsets(cfg.M, i, cfg.trn_subsets, rng) for i in range(1, cfg.M)}
