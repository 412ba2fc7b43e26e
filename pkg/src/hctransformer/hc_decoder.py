"""Query-based human-context decoder and its per-layer, per-granularity alignment."""

from __future__ import annotations

from dataclasses import dataclass

from . import diffcore as dc
from .layers import Bound, ParamStore, attend, discriminate, domain_loss, ffn, norm


@dataclass
class InteractionFeatures:
    per_layer: list[dc.DiffArray]

    @property
    def final(self) -> dc.DiffArray:
        return self.per_layer[-1]


def init_params(store: ParamStore, M: int, D_v: int, L_d: int, self_attn: bool = False) -> None:
    for l in range(1, L_d + 1):
        base = f"dec.layer{l}"
        if self_attn:
            store.norm(f"{base}.ln0", D_v)
            store.attention(f"{base}.self", D_v, D_v, D_v)
        store.norm(f"{base}.ln1", D_v)
        store.norm(f"{base}.ln_mem", D_v)
        store.attention(f"{base}.cross", D_v, D_v, D_v)
        store.norm(f"{base}.ln2", D_v)
        store.ffn(f"{base}.ffn", D_v, 2 * D_v)
    for l in range(1, L_d + 1):
        for i in range(1, M):
            store.discriminator(f"disc.hc{l}_{i}", D_v)


def hc_decode(P: Bound, Z_hm: dc.DiffArray, Z_ctx: dc.DiffArray, L_d: int, temperature: float = 1.0,
              weights_out: list | None = None) -> InteractionFeatures:
    """Human temporal rows query the final context tokens; residuals carry Z_hm forward."""
    if Z_hm.shape[-1] != Z_ctx.shape[-1]:
        raise ValueError(f"hc_decode: feature dims differ, {Z_hm.shape[-1]} vs {Z_ctx.shape[-1]}")
    Z = Z_hm
    layers = []
    for l in range(1, L_d + 1):
        base = f"dec.layer{l}"
        if f"{base}.self.q.W" in P:
            h0 = norm(P, f"{base}.ln0", Z)
            Z = Z + attend(P, f"{base}.self", h0, h0)
        mem = norm(P, f"{base}.ln_mem", Z_ctx)
        a = Z + attend(P, f"{base}.cross", norm(P, f"{base}.ln1", Z), mem,
                       temperature=temperature, weights_out=weights_out)
        Z = a + ffn(P, f"{base}.ffn", norm(P, f"{base}.ln2", a))
        layers.append(Z)
    return InteractionFeatures(layers)


def hc_alignment_loss(P: Bound, features: InteractionFeatures, domains, lam: float, grl_coeff: float,
                      parts: dict | None = None) -> dc.DiffArray:
    L_d = len(features.per_layer)
    n_rows = features.final.shape[-2]
    if lam == 0:
        if parts is not None:
            parts["hc"] = []
        return dc.constant(0.0)
    terms = []
    for l, Z in enumerate(features.per_layer, start=1):
        for i in range(1, n_rows + 1):
            zi = dc.reshape(dc.take(Z, [i - 1], axis=Z.ndim - 2), Z.shape[:-2] + (Z.shape[-1],))
            terms.append(domain_loss(discriminate(P, f"disc.hc{l}_{i}", zi, grl_coeff), domains))
    w = lam / (L_d * n_rows)
    loss = dc.scale(terms[0], w)
    for t in terms[1:]:
        loss = loss + dc.scale(t, w)
    if parts is not None:
        parts["hc"] = [float(t.data) for t in terms]
    return loss
