"""Context temporal modeling guided by prototype tokens, with per-layer alignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .layers import Bound, ParamStore, attend, discriminate, domain_loss, ffn, linear, norm


@dataclass
class ContextTokens:
    clip_tokens: dc.DiffArray
    prototype_tokens: dc.DiffArray | None
    layer_index: int = 0


def init_params(store: ParamStore, M: int, D: int, D_v: int, L_e: int, separate_proto: bool = False) -> None:
    store.linear("ctx.proj", D, D_v)
    store.vector("ctx.pos", (M, D_v), 0.02)
    streams = ("", ".proto") if separate_proto else ("",)
    for l in range(1, L_e + 1):
        for s in streams:
            base = f"ctx.layer{l}{s}"
            store.norm(f"{base}.ln1", D_v)
            store.attention(f"{base}.self", D_v, D_v, D_v)
            store.attention(f"{base}.cross", D_v, D_v, D_v)
            store.norm(f"{base}.ln2", D_v)
            store.ffn(f"{base}.ffn", D_v, 2 * D_v)
    for l in range(1, L_e + 1):
        store.discriminator(f"disc.ctx{l}", D_v)


def context_pool(x: dc.DiffArray, context: np.ndarray) -> dc.DiffArray:
    """Mean over context positions per clip; a clip with no context positions yields zeros."""
    context = np.asarray(context, dtype=bool)
    counts = np.maximum(context.sum(axis=-1), 1)
    pool = (context / counts[..., None])[..., None, :]
    out = dc.matmul(dc.constant(pool), x)
    return dc.reshape(out, out.shape[:-2] + (out.shape[-1],))


def context_inputs(P: Bound, x: dc.DiffArray, context: np.ndarray, banks: np.ndarray | None,
                   domains: np.ndarray) -> ContextTokens:
    """Layer-0 tokens. ``x`` is (B, M, N, D); ``banks`` is (2, K, D) indexed by domain."""
    pooled = context_pool(x, context)
    clip_tokens = linear(P, "ctx.proj", pooled) + P["ctx.pos"]
    proto = None
    if banks is not None:
        projected = linear(P, "ctx.proj", dc.constant(banks))
        proto = dc.take(projected, np.asarray(domains, dtype=np.int64), axis=0)
    return ContextTokens(clip_tokens, proto, 0)


def _stream_block(P: Bound, base: str, z: dc.DiffArray, other: dc.DiffArray | None,
                  weights_out: list | None) -> dc.DiffArray:
    h = norm(P, f"{base}.ln1", z)
    a = z + attend(P, f"{base}.self", h, h, weights_out=weights_out)
    if other is not None:
        a = a + attend(P, f"{base}.cross", h, norm(P, f"{base}.ln1", other), weights_out=weights_out)
    return a + ffn(P, f"{base}.ffn", norm(P, f"{base}.ln2", a))


def context_encode(P: Bound, tokens: ContextTokens, L_e: int, separate_proto: bool = False,
                   weights_out: list | None = None) -> list[dc.DiffArray]:
    """Per-layer clip outputs [Z_1 .. Z_{L_e}]; the last is the encoder output."""
    if L_e < 1:
        raise ValueError("context_encode: L_e must be at least 1")
    Z, C = tokens.clip_tokens, tokens.prototype_tokens
    outs = []
    for l in range(1, L_e + 1):
        base = f"ctx.layer{l}"
        Z_next = _stream_block(P, base, Z, C, weights_out)
        if C is not None and l < L_e:
            C = _stream_block(P, f"{base}.proto" if separate_proto else base, C, Z, weights_out)
        Z = Z_next
        outs.append(Z)
    return outs


def context_alignment_loss(P: Bound, per_layer: list[dc.DiffArray], domains, lam: float,
                           grl_coeff: float, parts: dict | None = None) -> dc.DiffArray:
    """lam / L_e times the summed per-layer domain cross-entropy, averaged over clip tokens."""
    L_e = len(per_layer)
    if lam == 0:
        if parts is not None:
            parts["ctx"] = []
        return dc.constant(0.0)
    terms = [domain_loss(discriminate(P, f"disc.ctx{l}", Z, grl_coeff), domains)
             for l, Z in enumerate(per_layer, start=1)]
    loss = dc.scale(terms[0], lam / L_e)
    for t in terms[1:]:
        loss = loss + dc.scale(t, lam / L_e)
    if parts is not None:
        parts["ctx"] = [float(t.data) for t in terms]
    return loss
