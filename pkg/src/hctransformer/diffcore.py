"""Minimal define-by-run reverse-mode differentiation over float64 numpy arrays.

Every forward op appends a node to the active :class:`Tape`; :func:`backward`
walks the tape in reverse creation order, which is already a topological order.
Arrays that do not require a gradient are pruned from the backward pass.
"""

from __future__ import annotations

import enum
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

LN_EPS = 1e-5
MASK_FILL = -1e9


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class OpKind(enum.Enum):
    MATMUL = "matmul"
    ADD = "add"
    MUL = "elementwise-multiply"
    CONCAT = "concat"
    MEAN_POOL = "mean-pool"
    SOFTMAX = "softmax"
    RELU = "relu"
    AFFINE = "affine"
    LAYER_NORM = "layer-norm"
    ATTENTION = "scaled-dot-product-attention"
    CROSS_ENTROPY = "cross-entropy-with-logits"
    GRAD_REVERSAL = "gradient-reversal"


_local = threading.local()


def active_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Tape:
    """Records nodes created while it is active. Confined to one thread."""

    def __init__(self):
        self.nodes: list[DiffArray] = []
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        return False

    def record(self, node: "DiffArray") -> None:
        node.tape_id = len(self.nodes)
        self.nodes.append(node)


class DiffArray:
    """A float64 array, optionally linked into the active tape."""

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op", "tape_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents: tuple[DiffArray, ...] = ()
        self.backward_fn: Callable | None = None
        self.op: str | None = None
        self.tape_id: int | None = None
        if requires_grad:
            tape = active_tape()
            if tape is not None:
                tape.record(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"DiffArray(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    # operator sugar for the common cases
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(_lift(other), _lift(-1.0)))

    def __neg__(self):
        return mul(self, _lift(-1.0))

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


def constant(x) -> DiffArray:
    return DiffArray(x, requires_grad=False)


def leaf(x, requires_grad: bool = True) -> DiffArray:
    return DiffArray(np.array(x, dtype=np.float64, copy=True), requires_grad=requires_grad)


def _check_finite(op: str, inputs: Iterable[DiffArray]) -> None:
    for i, x in enumerate(inputs):
        if not np.isfinite(x.data).all():
            raise NonFiniteError(f"{op}: input {i} contains non-finite values")


def _make(op: str, data: np.ndarray, parents: Sequence[DiffArray], backward_fn) -> DiffArray:
    needs = any(p.requires_grad for p in parents)
    out = DiffArray.__new__(DiffArray)
    out.data = data
    out.requires_grad = needs
    out.parents = tuple(parents)
    out.backward_fn = backward_fn if needs else None
    out.op = op
    out.tape_id = None
    if needs:
        tape = active_tape()
        if tape is None:
            raise TapeError(f"{op}: differentiable input used outside an active tape")
        tape.record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --- primitive ops -----------------------------------------------------------


def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    _check_finite("matmul", (a, b))
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if a.ndim == 1:
                ga = _unbroadcast(np.matmul(g[..., None, :], np.swapaxes(b.data, -1, -2))[..., 0, :], a.shape)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if a.ndim == 1:
                gb = _unbroadcast(a.data[:, None] * g[..., None, :], b.shape)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def add(a: DiffArray, b: DiffArray) -> DiffArray:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    _check_finite("add", (a, b))

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make("add", out, (a, b), bw)


def mul(a: DiffArray, b: DiffArray) -> DiffArray:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"elementwise-multiply: cannot broadcast {a.shape} with {b.shape}") from None
    _check_finite("elementwise-multiply", (a, b))

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make("elementwise-multiply", out, (a, b), bw)


def concat(xs: Sequence[DiffArray], axis: int = -1) -> DiffArray:
    if not xs:
        raise ShapeError("concat: no inputs")
    ref = list(xs[0].shape)
    nd = len(ref)
    ax = axis % nd
    for x in xs[1:]:
        s = list(x.shape)
        if len(s) != nd or s[:ax] + s[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"concat(axis={axis}): incompatible shapes {xs[0].shape} and {x.shape}")
    _check_finite("concat", xs)
    out = np.concatenate([x.data for x in xs], axis=ax)
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) if x.requires_grad else None
            for i, x in enumerate(xs)
        )

    return _make(f"concat({axis})", out, tuple(xs), bw)


def mean_pool(x: DiffArray, axis: int, keepdims: bool = False) -> DiffArray:
    if x.ndim == 0 or not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"mean-pool: axis {axis} out of range for shape {x.shape}")
    _check_finite("mean-pool", (x,))
    n = x.shape[axis]
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make(f"mean-pool({axis})", out, (x,), bw)


def softmax(x: DiffArray) -> DiffArray:
    _check_finite("softmax", (x,))
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make("softmax", s, (x,), bw)


def relu(x: DiffArray) -> DiffArray:
    _check_finite("relu", (x,))
    pos = x.data > 0
    out = np.where(pos, x.data, 0.0)

    def bw(g):
        return (g * pos,)

    return _make("relu", out, (x,), bw)


def affine(x: DiffArray, w: DiffArray, b: DiffArray) -> DiffArray:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is (in, out), ``b`` is (out,)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"affine: x{x.shape}, W{w.shape}, b{b.shape} do not conform")
    _check_finite("affine", (x, w, b))
    out = x.data @ w.data + b.data

    def bw(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = gb = None
        if w.requires_grad:
            gw = x.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])
        if b.requires_grad:
            gb = g.reshape(-1, w.shape[1]).sum(axis=0)
        return gx, gw, gb

    return _make("affine", out, (x, w, b), bw)


def layer_norm(x: DiffArray, gamma: DiffArray, beta: DiffArray, eps: float = LN_EPS) -> DiffArray:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer-norm: feature dim {d} vs gamma{gamma.shape}, beta{beta.shape}")
    _check_finite("layer-norm", (x, gamma, beta))
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _make("layer-norm", out, (x, gamma, beta), bw)


def cross_entropy(logits: DiffArray, labels, weights=None) -> DiffArray:
    """Weighted mean of ``-log softmax(logits)[label]`` over all leading positions.

    ``labels`` has the leading shape of ``logits``; entries with zero weight
    (for instance unlabeled target samples) contribute nothing. Returns 0 when
    every weight is zero.
    """
    labels = np.asarray(labels)
    if logits.ndim < 1 or labels.shape != logits.shape[:-1]:
        raise ShapeError(f"cross-entropy: logits{logits.shape} vs labels{labels.shape}")
    _check_finite("cross-entropy", (logits,))
    c = logits.shape[-1]
    z = logits.data.reshape(-1, c)
    lab = labels.reshape(-1).astype(np.int64)
    w = np.ones(len(lab)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape != lab.shape:
        raise ShapeError(f"cross-entropy: weights{np.shape(weights)} vs labels{labels.shape}")
    total = w.sum()
    active = w != 0
    if np.any((lab[active] < 0) | (lab[active] >= c)):
        raise ValueError(f"cross-entropy: labels outside [0, {c})")
    safe = np.where(active, lab, 0)
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    nll = lse - z[np.arange(len(lab)), safe]
    out = np.array((w * nll).sum() / total) if total > 0 else np.array(0.0)

    def bw(g):
        if total == 0:
            return (np.zeros_like(logits.data),)
        p = np.exp(z - lse[:, None])
        p[np.arange(len(lab)), safe] -= 1.0
        return ((g * w[:, None] / total * p).reshape(logits.shape),)

    return _make("cross-entropy", out, (logits,), bw)


def grad_reverse(x: DiffArray, coeff: float) -> DiffArray:
    """Identity forward; the adjoint is ``-coeff`` times the incoming gradient."""
    _check_finite("gradient-reversal", (x,))

    def bw(g):
        return (-coeff * g,)

    return _make(f"gradient-reversal({coeff})", x.data, (x,), bw)


# --- plumbing ops --------------------------------------------------------------


def reshape(x: DiffArray, shape) -> DiffArray:
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return _make("reshape", out, (x,), bw)


def swap_last(x: DiffArray) -> DiffArray:
    out = np.swapaxes(x.data, -1, -2)

    def bw(g):
        return (np.swapaxes(g, -1, -2),)

    return _make("swap-last", out, (x,), bw)


def take(x: DiffArray, index, axis: int = 0) -> DiffArray:
    index = np.asarray(index, dtype=np.int64)
    ax = axis % x.ndim
    out = np.take(x.data, index, axis=ax)

    def bw(g):
        gx = np.zeros_like(x.data)
        # indexed axis first so np.add.at scatters duplicate indices correctly
        gm = np.moveaxis(g, tuple(range(ax, ax + index.ndim)), tuple(range(index.ndim)))
        np.add.at(np.moveaxis(gx, ax, 0), index, gm)
        return (gx,)

    return _make("take", out, (x,), bw)


def sum_all(x: DiffArray) -> DiffArray:
    out = np.array(x.data.sum())

    def bw(g):
        return (np.full(x.shape, float(g)),)

    return _make("sum", out, (x,), bw)


def scale(x: DiffArray, c: float) -> DiffArray:
    c = float(c)

    def bw(g):
        return (g * c,)

    return _make("scale", x.data * c, (x,), bw)


def attention(q: DiffArray, k: DiffArray, v: DiffArray, key_mask=None,
              temperature: float = 1.0, return_weights: bool = False):
    """Single-head scaled dot-product attention composed from primitives.

    ``key_mask`` (broadcastable to the score shape) marks valid keys with True;
    invalid keys receive a large negative bias before the softmax.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: q{q.shape}, k{k.shape}, v{v.shape} do not conform")
    scores = scale(matmul(q, swap_last(k)), 1.0 / (np.sqrt(q.shape[-1]) * temperature))
    if key_mask is not None:
        bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, MASK_FILL)
        scores = add(scores, constant(bias))
    w = softmax(scores)
    out = matmul(w, v)
    return (out, w) if return_weights else out


_DISPATCH = {
    OpKind.MATMUL: lambda ins, at: matmul(*ins),
    OpKind.ADD: lambda ins, at: add(*ins),
    OpKind.MUL: lambda ins, at: mul(*ins),
    OpKind.CONCAT: lambda ins, at: concat(ins, at.get("axis", -1)),
    OpKind.MEAN_POOL: lambda ins, at: mean_pool(ins[0], at["axis"], at.get("keepdims", False)),
    OpKind.SOFTMAX: lambda ins, at: softmax(ins[0]),
    OpKind.RELU: lambda ins, at: relu(ins[0]),
    OpKind.AFFINE: lambda ins, at: affine(*ins),
    OpKind.LAYER_NORM: lambda ins, at: layer_norm(*ins, eps=at.get("eps", LN_EPS)),
    OpKind.ATTENTION: lambda ins, at: attention(*ins, key_mask=at.get("key_mask")),
    OpKind.CROSS_ENTROPY: lambda ins, at: cross_entropy(ins[0], at["labels"], at.get("weights")),
    OpKind.GRAD_REVERSAL: lambda ins, at: grad_reverse(ins[0], at["coefficient"]),
}


def forward_op(kind: OpKind, inputs: Sequence[DiffArray], attrs: dict | None = None) -> DiffArray:
    return _DISPATCH[OpKind(kind)](list(inputs), attrs or {})


def backward(loss: DiffArray) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(node) for every tape node that requires a gradient.

    Returns a map from ``id(node)`` to its gradient; use :func:`grad_of` for lookup.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise TapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    tape = active_tape()
    if tape is None:
        raise TapeError("backward: no active tape")
    grads: dict[int, np.ndarray] = {}
    if not loss.requires_grad:
        return grads
    grads[id(loss)] = np.ones(())
    for node in reversed(tape.nodes[: loss.tape_id + 1]):
        g = grads.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if not np.isfinite(pg).all():
                raise NonFiniteError(f"backward: non-finite gradient produced by {node.op}")
            k = id(parent)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg
    return grads


def grad_of(grads: dict[int, np.ndarray], x: DiffArray) -> np.ndarray:
    g = grads.get(id(x))
    return np.zeros_like(x.data) if g is None else g


def grad_check(fn: Callable[[DiffArray], DiffArray], point, step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|)."""
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    point = np.array(point, dtype=np.float64)
    with Tape():
        x = leaf(point)
        out = fn(x)
        analytic = grad_of(backward(out), x)
    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        with Tape():
            fp = float(fn(constant(point.copy())).data)
        flat[i] = old - step
        with Tape():
            fm = float(fn(constant(point.copy())).data)
        flat[i] = old
        numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
    if not np.isfinite(numeric).all():
        raise NonFiniteError("grad_check: non-finite central difference")
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))
