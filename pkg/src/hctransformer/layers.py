"""Parameter store and the small functional layers the encoders and decoder share."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import diffcore as dc

Bound = dict[str, dc.DiffArray]


class ParamStore:
    """Named float64 arrays, initialised from one seeded generator in insertion order."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.arrays: dict[str, np.ndarray] = {}

    def _put(self, name: str, value: np.ndarray) -> None:
        if name in self.arrays:
            raise KeyError(f"duplicate parameter {name}")
        self.arrays[name] = np.asarray(value, dtype=np.float64)

    def linear(self, name: str, fan_in: int, fan_out: int) -> None:
        bound = 1.0 / np.sqrt(fan_in)
        self._put(f"{name}.W", self.rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        self._put(f"{name}.b", np.zeros(fan_out))

    def norm(self, name: str, dim: int) -> None:
        self._put(f"{name}.g", np.ones(dim))
        self._put(f"{name}.b", np.zeros(dim))

    def attention(self, name: str, d_query: int, d_kv: int, d_model: int) -> None:
        self.linear(f"{name}.q", d_query, d_model)
        self.linear(f"{name}.k", d_kv, d_model)
        self.linear(f"{name}.v", d_kv, d_model)
        self.linear(f"{name}.o", d_model, d_query)

    def ffn(self, name: str, dim: int, hidden: int) -> None:
        self.linear(f"{name}.fc1", dim, hidden)
        self.linear(f"{name}.fc2", hidden, dim)

    def discriminator(self, name: str, dim: int) -> None:
        self.linear(f"{name}.fc1", dim, dim)
        self.linear(f"{name}.fc2", dim, 2)

    def vector(self, name: str, shape, std: float) -> None:
        self._put(name, self.rng.normal(0.0, std, size=shape))


def bind(arrays: dict[str, np.ndarray], trainable: Callable[[str], bool] = lambda n: True) -> Bound:
    """Wrap every array as a leaf on the active tape; frozen ones carry no gradient."""
    return {n: dc.DiffArray(a, requires_grad=trainable(n)) for n, a in arrays.items()}


def linear(P: Bound, name: str, x: dc.DiffArray) -> dc.DiffArray:
    return dc.affine(x, P[f"{name}.W"], P[f"{name}.b"])


def norm(P: Bound, name: str, x: dc.DiffArray) -> dc.DiffArray:
    return dc.layer_norm(x, P[f"{name}.g"], P[f"{name}.b"])


def attend(P: Bound, name: str, query: dc.DiffArray, memory: dc.DiffArray, key_mask=None,
           temperature: float = 1.0, weights_out: list | None = None) -> dc.DiffArray:
    q = linear(P, f"{name}.q", query)
    k = linear(P, f"{name}.k", memory)
    v = linear(P, f"{name}.v", memory)
    out, w = dc.attention(q, k, v, key_mask=key_mask, temperature=temperature, return_weights=True)
    if weights_out is not None:
        weights_out.append(w.data)
    return linear(P, f"{name}.o", out)


def ffn(P: Bound, name: str, x: dc.DiffArray) -> dc.DiffArray:
    return linear(P, f"{name}.fc2", dc.relu(linear(P, f"{name}.fc1", x)))


def discriminate(P: Bound, name: str, x: dc.DiffArray, grl_coeff: float) -> dc.DiffArray:
    """Domain logits for ``x`` behind a gradient-reversal layer."""
    h = dc.grad_reverse(x, grl_coeff)
    return linear(P, f"{name}.fc2", dc.relu(linear(P, f"{name}.fc1", h)))


def domain_loss(logits: dc.DiffArray, domains: np.ndarray) -> dc.DiffArray:
    """Mean domain cross-entropy; ``domains`` is broadcast over any token axes."""
    lead = logits.shape[:-1]
    labels = np.broadcast_to(np.asarray(domains).reshape((-1,) + (1,) * (len(lead) - 1)), lead)
    return dc.cross_entropy(logits, labels)


def class_loss(logits: dc.DiffArray, labels: np.ndarray) -> dc.DiffArray:
    """Cross-entropy over labeled samples only (label -1 marks an unlabeled sample)."""
    labels = np.asarray(labels)
    w = (labels >= 0).astype(np.float64)
    return dc.cross_entropy(logits, np.where(labels >= 0, labels, 0), w)


def discriminator_names(arrays: dict[str, np.ndarray]) -> list[str]:
    names = []
    for n in arrays:
        if n.startswith("disc.") and n.endswith(".fc1.W"):
            names.append(n[: -len(".fc1.W")])
    return names
