"""Human-aware temporal modeling: set aggregation, multi-granularity TRN, and its loss."""

from __future__ import annotations

from itertools import combinations

import numpy as np

from . import diffcore as dc
from .layers import Bound, ParamStore, attend, class_loss, discriminate, domain_loss, ffn, linear, norm


def init_params(store: ParamStore, M: int, D: int, D_v: int, n_cls: int) -> None:
    store.norm("hm.ln", D)
    store.attention("hm.attn", D, D, D)
    store.linear("hm.proj", D, D_v)
    for i in range(1, M):
        store.linear(f"hm.trn{i}.fc1", (i + 1) * D_v, D_v)
        store.linear(f"hm.trn{i}.fc2", D_v, D_v)
    store.linear("hm_cls", D_v, n_cls)
    for i in range(1, M):
        store.discriminator(f"disc.trn{i}", D_v)
    for i in range(1, M):
        store.discriminator(f"disc.proj{i}", D_v)


def aggregate_human(P: Bound, x: dc.DiffArray, human: np.ndarray) -> dc.DiffArray:
    """Mean of self-attended human tokens per clip.

    ``x`` is (..., N, D) over all N grid positions and ``human`` the matching
    (..., N) indicator. Context positions are excluded as keys and from the
    mean, so the result equals attention over the human set alone.
    """
    human = np.asarray(human, dtype=bool)
    counts = human.sum(axis=-1)
    if np.any(counts == 0):
        raise ValueError("aggregate_human: empty human set (mask fallback was not applied)")
    h = norm(P, "hm.ln", x)
    y = x + attend(P, "hm.attn", h, h, key_mask=human[..., None, :])
    pool = (human / counts[..., None])[..., None, :]
    out = dc.matmul(dc.constant(pool), y)
    return dc.reshape(out, out.shape[:-2] + (out.shape[-1],))


def aggregate_human_set(P: Bound, tokens) -> dc.DiffArray:
    """Set form of :func:`aggregate_human` for one clip: (n, D) tokens -> (D,)."""
    tokens = tokens if isinstance(tokens, dc.DiffArray) else dc.constant(tokens)
    if tokens.shape[0] == 0:
        raise ValueError("aggregate_human: empty human set (mask fallback was not applied)")
    out = aggregate_human(P, dc.reshape(tokens, (1,) + tokens.shape), np.ones((1, tokens.shape[0]), bool))
    return dc.reshape(out, (tokens.shape[-1],))


def trn_subsets(M: int, i: int, n_samples: int, rng: np.random.Generator | None) -> np.ndarray:
    """Ordered clip subsets of size i+1; all of them when at most ``n_samples`` exist."""
    every = list(combinations(range(M), i + 1))
    if len(every) <= n_samples:
        return np.array(every, dtype=np.int64)
    if rng is None:
        raise ValueError("trn_subsets: rng required when subsets are sampled")
    pick = np.sort(rng.choice(len(every), size=n_samples, replace=False))
    return np.array([every[k] for k in pick], dtype=np.int64)


def trn_forward(P: Bound, projected: dc.DiffArray, rng: np.random.Generator | None,
                n_samples: int = 3, subsets: dict[int, np.ndarray] | None = None) -> dc.DiffArray:
    """(..., M, D_v) projected clips -> (..., M-1, D_v); row i-1 models i+1 clips."""
    M = projected.shape[-2]
    if M < 2:
        raise ValueError(f"trn_forward: need at least 2 clips, got {M}")
    lead = projected.shape[:-2]
    rows = []
    for i in range(1, M):
        idx = subsets[i] if subsets is not None else trn_subsets(M, i, n_samples, rng)
        picked = dc.take(projected, idx, axis=projected.ndim - 2)
        flat = dc.reshape(picked, lead + (idx.shape[0], (i + 1) * projected.shape[-1]))
        z = linear(P, f"hm.trn{i}.fc2", dc.relu(linear(P, f"hm.trn{i}.fc1", flat)))
        z = dc.mean_pool(z, axis=len(lead), keepdims=True)
        rows.append(z)
    return dc.concat(rows, axis=len(lead))


def encode(P: Bound, x: dc.DiffArray, human: np.ndarray, rng: np.random.Generator | None,
           n_samples: int = 3) -> dict[str, dc.DiffArray]:
    x_hat = aggregate_human(P, x, human)
    proj = linear(P, "hm.proj", x_hat)
    return {"x_hat": x_hat, "proj": proj, "Z_hm": trn_forward(P, proj, rng, n_samples)}


def video_feature(Z: dc.DiffArray) -> dc.DiffArray:
    """Average over the temporal-granularity rows."""
    return dc.mean_pool(Z, axis=Z.ndim - 2)


def human_encoder_loss(P: Bound, Z_hm: dc.DiffArray, proj: dc.DiffArray, labels, domains,
                       lam: float, grl_coeff: float, parts: dict | None = None) -> dc.DiffArray:
    """Source classification on the pooled rows plus per-granularity and per-clip alignment.

    The per-clip term covers clips 1..M-1, one discriminator each.
    """
    labels = np.asarray(labels)
    domains = np.asarray(domains)
    if np.any((labels >= 0) & (domains == 1)):
        raise ValueError("human_encoder_loss: target-domain samples must not carry labels")
    n_rows = Z_hm.shape[-2]
    cls = class_loss(linear(P, "hm_cls", video_feature(Z_hm)), labels)
    loss = cls
    trn_terms, proj_terms = [], []
    if lam != 0:
        for i in range(1, n_rows + 1):
            zi = dc.reshape(dc.take(Z_hm, [i - 1], axis=Z_hm.ndim - 2), Z_hm.shape[:-2] + (Z_hm.shape[-1],))
            trn_terms.append(domain_loss(discriminate(P, f"disc.trn{i}", zi, grl_coeff), domains))
            pi = dc.reshape(dc.take(proj, [i - 1], axis=proj.ndim - 2), proj.shape[:-2] + (proj.shape[-1],))
            proj_terms.append(domain_loss(discriminate(P, f"disc.proj{i}", pi, grl_coeff), domains))
        for t in trn_terms + proj_terms:
            loss = loss + dc.scale(t, lam / n_rows)
    if parts is not None:
        parts["cls"] = float(cls.data)
        parts["trn"] = [float(t.data) for t in trn_terms]
        parts["proj"] = [float(t.data) for t in proj_terms]
    return loss
