"""Per-domain context prototype banks: entropy filtering followed by k-means."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc


@dataclass
class PrototypeBank:
    prototypes: np.ndarray
    domain: str
    kept_fraction: float = 1.0
    inertia_trace: list[float] = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.prototypes.shape[0]


@dataclass
class ContextClassifier:
    """Affine classifier over raw context features, used only to rank confidence."""

    W: np.ndarray
    b: np.ndarray

    def probabilities(self, features: np.ndarray) -> np.ndarray:
        z = np.asarray(features) @ self.W + self.b
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


def train_context_classifier(features: np.ndarray, labels: np.ndarray, n_cls: int, seed: int,
                             epochs: int = 5, lr: float = 0.1, batch: int = 256) -> ContextClassifier:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    d = features.shape[1]
    bound = 1.0 / math.sqrt(d)
    W = rng.uniform(-bound, bound, size=(d, n_cls))
    b = np.zeros(n_cls)
    for _ in range(epochs):
        order = rng.permutation(len(features))
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            with dc.Tape():
                Wl, bl = dc.leaf(W), dc.leaf(b)
                loss = dc.cross_entropy(dc.affine(dc.constant(features[idx]), Wl, bl), labels[idx])
                grads = dc.backward(loss)
            W = W - lr * dc.grad_of(grads, Wl)
            b = b - lr * dc.grad_of(grads, bl)
    return ContextClassifier(W, b)


def predictive_entropy(probs: np.ndarray) -> np.ndarray:
    p = np.clip(probs, 1e-300, 1.0)
    return -(probs * np.log(p)).sum(axis=1)


def entropy_filter(features: np.ndarray, classifier: ContextClassifier, keep_fraction: float = 0.5) -> np.ndarray:
    """The ceil(keep_fraction * n) features with the lowest predictive entropy, in input order."""
    features = np.asarray(features, dtype=np.float64)
    if len(features) == 0:
        raise ValueError("entropy_filter: empty feature list")
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"entropy_filter: keep_fraction must lie in (0, 1], got {keep_fraction}")
    ent = predictive_entropy(classifier.probabilities(features))
    n_keep = math.ceil(keep_fraction * len(features))
    keep = np.sort(np.argsort(ent, kind="stable")[:n_keep])
    return features[keep]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp_init(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    closest = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, K):
        total = closest.sum()
        if total <= 0:
            nxt = x[rng.integers(len(x))]
        else:
            nxt = x[rng.choice(len(x), p=closest / total)]
        centers.append(nxt)
        closest = np.minimum(closest, _sq_dists(x, nxt[None])[:, 0])
    return np.array(centers)


def cluster_prototypes(features: np.ndarray, K: int, seed: int = 0, max_iters: int = 100,
                       tol: float = 1e-6, domain: str = "source") -> PrototypeBank:
    """Lloyd's k-means with k-means++ seeding; empty clusters jump to the farthest point."""
    x = np.asarray(features, dtype=np.float64)
    if len(x) < K:
        raise ValueError(f"cluster_prototypes: {len(x)} features cannot form {K} clusters")
    rng = np.random.default_rng(seed)
    centers = kmeans_pp_init(x, K, rng)
    trace: list[float] = []
    for _ in range(max_iters):
        d = _sq_dists(x, centers)
        assign = np.argmin(d, axis=1)  # first minimum wins ties
        point_d = d[np.arange(len(x)), assign]
        trace.append(float(point_d.sum()))
        new = centers.copy()
        for k in range(K):
            members = assign == k
            if members.any():
                new[k] = x[members].mean(axis=0)
        for k in range(K):
            if not (assign == k).any():
                far = int(np.argmax(point_d))
                new[k] = x[far]
                point_d[far] = 0.0
        shift = np.sqrt(((new - centers) ** 2).sum(1)).max()
        centers = new
        if shift < tol:
            break
    final = _sq_dists(x, centers).min(axis=1).sum()
    trace.append(float(final))
    return PrototypeBank(centers, domain, inertia_trace=trace)


def build_bank(features: np.ndarray, classifier: ContextClassifier, K: int, keep_fraction: float,
               seed: int, domain: str, max_iters: int = 100, tol: float = 1e-6) -> PrototypeBank:
    kept = entropy_filter(features, classifier, keep_fraction)
    bank = cluster_prototypes(kept, K, seed=seed, max_iters=max_iters, tol=tol, domain=domain)
    bank.kept_fraction = len(kept) / len(features)
    return bank
