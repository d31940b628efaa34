"""Dense float64 arrays with reverse-mode differentiation.

Everything the model computes lives in the `Tensor` type: a numpy float64
array plus the bookkeeping needed to run backpropagation over the graph of
operations that produced it. Gradients are only persisted on leaf tensors
(parameters); intermediate gradients live in a scratch dict during the
backward walk. A `ParamStore` owns the named parameter blocks and their
gradient accumulators, and `finite_difference_gradients` is the independent
central-difference verifier used to check the reverse-mode results.

All arithmetic is in 64-bit floating point. Reductions use numpy's fixed
left-to-right summation order, so repeated runs are bit-identical.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InvalidInputError,
    ParameterError,
    ShapeError,
    VerificationError,
)

Axis = int | None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    """A float64 array node in the differentiation graph.

    Tensors are immutable by convention once created: no op mutates `data`
    in place. `requires` is true when the node depends on at least one leaf,
    which lets backward() skip constant subgraphs entirely.
    """

    __slots__ = ("data", "grad", "is_leaf", "requires", "_parents", "_bw")

    def __init__(self, data, parents=(), bw=None, leaf=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.is_leaf = leaf
        self._parents = parents
        self._bw = bw
        self.requires = leaf or any(p.requires for p in parents)

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, leaf={self.is_leaf})"

    # -- graph construction helpers -----------------------------------------

    @staticmethod
    def wrap(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, Tensor.wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, Tensor.wrap(other))

    def __rsub__(self, other):
        return sub(Tensor.wrap(other), self)

    def __mul__(self, other):
        return mul(self, Tensor.wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, Tensor.wrap(other))

    def __rtruediv__(self, other):
        return div(Tensor.wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, Tensor.wrap(other))

    # -- shape ops -------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    # -- reductions and pointwise -----------------------------------------------

    def sum(self, axis: Axis = None, keepdims: bool = False):
        return asum(self, axis, keepdims)

    def mean(self, axis: Axis = None, keepdims: bool = False):
        return amean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    # -- backward ---------------------------------------------------------------

    def backward(self):
        """Backpropagate from this scalar; grads accumulate on leaf tensors."""
        if self.size != 1:
            raise ShapeError("backward() requires a scalar tensor")
        if not self.requires:
            return
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g if node.grad is None else node.grad + g
                continue
            if node._bw is None:
                continue
            for parent, pg in zip(node._parents, node._bw(g)):
                if pg is None or not parent.requires:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg


def const(x) -> Tensor:
    """A constant tensor: participates in forward math, receives no gradient."""
    return Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires else None,
            _unbroadcast(g, b.shape) if b.requires else None,
        )
    return Tensor(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires else None,
            _unbroadcast(-g, b.shape) if b.requires else None,
        )
    return Tensor(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires else None,
            _unbroadcast(g * a.data, b.shape) if b.requires else None,
        )
    return Tensor(out, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires else None,
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires else None,
        )
    return Tensor(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    out = a.data @ b.data
    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires else None
        return (ga, gb)
    return Tensor(out, (a, b), bw)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return Tensor(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]
    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))
    return Tensor(out, tuple(tensors), bw)


def asum(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)
    return Tensor(out, (a,), bw)


def amean(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape),)
    return Tensor(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return Tensor(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor) elementwise; no gradient where the floor is active."""
    mask = a.data > floor
    return Tensor(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows along axis 0. Gradients scatter-add back to the source."""
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data[idx]
    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)
    return Tensor(out, (a,), bw)


def scatter_rows(base: Tensor, idx, rows: Tensor) -> Tensor:
    """Copy of `base` with rows at `idx` replaced by `rows`."""
    idx = np.asarray(idx, dtype=np.int64)
    if len(np.unique(idx)) != len(idx):
        raise IndexError("scatter indices must be unique")
    if len(idx) and (idx.min() < 0 or idx.max() >= base.shape[0]):
        raise IndexError("scatter index out of range")
    if rows.shape != (len(idx),) + base.shape[1:]:
        raise ShapeError(f"scatter rows shape {rows.shape} does not match target")
    out = base.data.copy()
    out[idx] = rows.data
    def bw(g):
        gb = g.copy()
        gb[idx] = 0.0
        return (gb, g[idx])
    return Tensor(out, (base, rows), bw)


def gather_axis1(a: Tensor, idx: np.ndarray) -> Tensor:
    """Per-sample row selection: a (B, S, ...) with idx (B, R) -> (B, R, ...)."""
    idx = np.asarray(idx, dtype=np.int64)
    bsel = np.arange(a.shape[0])[:, None]
    out = a.data[bsel, idx]
    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (bsel, idx), g)
        return (ga,)
    return Tensor(out, (a,), bw)


def scatter_axis1(base: Tensor, idx: np.ndarray, rows: Tensor) -> Tensor:
    """Per-sample row replacement: base (B, S, ...), idx (B, R), rows (B, R, ...)."""
    idx = np.asarray(idx, dtype=np.int64)
    b = base.shape[0]
    if idx.shape[0] != b or rows.shape[:2] != idx.shape:
        raise ShapeError("scatter_axis1 operand shapes disagree")
    for r in range(b):
        if len(np.unique(idx[r])) != idx.shape[1]:
            raise IndexError("scatter indices must be unique per sample")
    if idx.size and (idx.min() < 0 or idx.max() >= base.shape[1]):
        raise IndexError("scatter index out of range")
    bsel = np.arange(b)[:, None]
    out = base.data.copy()
    out[bsel, idx] = rows.data
    def bw(g):
        gb = g.copy()
        gb[bsel, idx] = 0.0
        return (gb, g[bsel, idx])
    return Tensor(out, (base, rows), bw)


def block_diag_batch(blocks: Tensor) -> Tensor:
    """(B, N, K, K) diagonal blocks -> (B, N*K, N*K); off-block entries zero."""
    b, n, k, k2 = blocks.shape
    if k != k2:
        raise ShapeError("blocks must be square")
    out = np.zeros((b, n * k, n * k))
    for i in range(n):
        out[:, i * k:(i + 1) * k, i * k:(i + 1) * k] = blocks.data[:, i]
    def bw(g):
        gb = np.empty_like(blocks.data)
        for i in range(n):
            gb[:, i] = g[:, i * k:(i + 1) * k, i * k:(i + 1) * k]
        return (gb,)
    return Tensor(out, (blocks,), bw)


def block_diag(blocks) -> Tensor:
    """Square block-diagonal assembly; off-block entries are exactly zero."""
    blocks = list(blocks)
    ns = []
    for b in blocks:
        if b.ndim != 2 or b.shape[0] != b.shape[1]:
            raise ShapeError("block_diag expects square 2-D blocks")
        ns.append(b.shape[0])
    total = int(sum(ns))
    out = np.zeros((total, total))
    offs = []
    o = 0
    for b, n in zip(blocks, ns):
        out[o:o + n, o:o + n] = b.data
        offs.append(o)
        o += n
    def bw(g):
        return tuple(g[o:o + n, o:o + n] for o, n in zip(offs, ns))
    return Tensor(out, tuple(blocks), bw)


# ---------------------------------------------------------------------------
# composite ops with contracts
# ---------------------------------------------------------------------------


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis, computed with max subtraction.

    Safe for inputs anywhere in [-1e3, 1e3] and far beyond; the exponentials
    of the output sum to 1 within 1e-12 per row.
    """
    d = x.data
    if d.shape[-1] < 1:
        raise ShapeError("log_softmax needs a non-empty last axis")
    if not np.all(np.isfinite(d)):
        raise InvalidInputError("log_softmax input must be finite")
    m = d.max(axis=-1, keepdims=True)
    z = d - m
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)
    return Tensor(out, (x,), bw)


def softmax(x: Tensor) -> Tensor:
    return exp(log_softmax(x))


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Cosine of two rank-1 tensors; zero-norm inputs yield 0 by convention."""
    if u.ndim != 1 or v.ndim != 1:
        raise ShapeError("cosine_similarity expects rank-1 tensors")
    if u.shape != v.shape:
        raise ShapeError(f"length mismatch: {u.shape} vs {v.shape}")
    if not (np.all(np.isfinite(u.data)) and np.all(np.isfinite(v.data))):
        raise InvalidInputError("cosine_similarity input must be finite")
    su = float((u.data * u.data).sum())
    sv = float((v.data * v.data).sum())
    if su == 0.0 or sv == 0.0:
        return const(0.0)
    dot = (u * v).sum()
    return div(dot, sqrt((u * u).sum()) * sqrt((v * v).sum()))


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------

GROUPS = ("backbone", "mixer")


@dataclass
class Block:
    value: np.ndarray
    grad: np.ndarray
    group: str


class ParamStore:
    """Named parameter blocks with gradient accumulators and group tags.

    A store is owned by exactly one training loop during a step. Leaf tensors
    handed out by `leaf()` share the underlying value arrays; `harvest()`
    moves their gradients into the per-block accumulators (in sorted name
    order, for a fixed reduction order) and clears them. Accumulators are
    only ever zeroed explicitly via `zero_grad()`.
    """

    def __init__(self):
        self._blocks: dict[str, Block] = {}
        self._bound: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray, group: str) -> None:
        if name in self._blocks:
            raise ParameterError(f"duplicate block name: {name}")
        if group not in GROUPS:
            raise ParameterError(f"unknown group {group!r}")
        v = np.asarray(value, dtype=np.float64)
        self._blocks[name] = Block(v, np.zeros_like(v), group)

    def names(self) -> list[str]:
        return sorted(self._blocks)

    def __contains__(self, name: str) -> bool:
        return name in self._blocks

    def block(self, name: str) -> Block:
        return self._blocks[name]

    def value(self, name: str) -> np.ndarray:
        return self._blocks[name].value

    def n_params(self) -> int:
        return sum(b.value.size for b in self._blocks.values())

    def leaf(self, name: str) -> Tensor:
        """Leaf tensor for a block, cached until the next bind_fresh()."""
        t = self._bound.get(name)
        if t is None:
            t = Tensor(self._blocks[name].value, leaf=True)
            self._bound[name] = t
        return t

    def bind_fresh(self) -> None:
        """Start a new graph: drop cached leaves (and any stale leaf grads)."""
        self._bound.clear()

    def zero_grad(self) -> None:
        for b in self._blocks.values():
            b.grad[...] = 0.0

    def harvest(self, scale: float = 1.0) -> float:
        """Fold leaf grads into block accumulators, scaled.

        Returns the global L2 norm of the raw (unscaled) harvested gradient.
        """
        sq = 0.0
        for name in sorted(self._bound):
            t = self._bound[name]
            if t.grad is None:
                continue
            g = t.grad
            sq += float((g * g).sum())
            self._blocks[name].grad += scale * g
            t.grad = None
        return math.sqrt(sq)

    def grad_norm(self) -> float:
        sq = 0.0
        for name in self.names():
            g = self._blocks[name].grad
            sq += float((g * g).sum())
        return math.sqrt(sq)


def block_seed(seed: int, name: str) -> int:
    """Stable per-block RNG seed, independent of block creation order."""
    h = hashlib.sha256(f"{seed}|{name}".encode()).digest()
    return int.from_bytes(h[:8], "little")


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class BlockCheck:
    name: str
    coords: list[int]
    fd: np.ndarray
    ad: np.ndarray
    rel: np.ndarray
    max_rel: float


@dataclass
class GradCheckReport:
    eps: float
    blocks: dict[str, BlockCheck] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        if not self.blocks:
            return 0.0
        return max(b.max_rel for b in self.blocks.values())


def finite_difference_gradients(
    loss_fn,
    store: ParamStore,
    eps: float = 1e-4,
    coords_per_block: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Check reverse-mode gradients against central finite differences.

    `loss_fn(store)` must return a scalar Tensor and be deterministic; this
    is verified by evaluating it twice up front. Each checked coordinate is
    perturbed by +/- eps and the central difference is compared to the
    reverse-mode gradient via rel = |fd - ad| / max(|fd|, |ad|, 1e-8).
    `coords_per_block` limits the check to a seeded random subset of each
    block (None checks every scalar).
    """
    if not (0.0 < eps <= 1e-2):
        raise ParameterError("eps must lie in (0, 1e-2]")

    def evaluate() -> float:
        store.bind_fresh()
        return float(loss_fn(store).data)

    f0 = evaluate()
    f1 = evaluate()
    if f0 != f1:
        raise VerificationError(
            f"loss is not deterministic at fixed parameters ({f0!r} vs {f1!r})"
        )

    store.zero_grad()
    store.bind_fresh()
    out = loss_fn(store)
    out.backward()
    store.harvest(1.0)
    analytic = {name: store.block(name).grad.copy() for name in store.names()}

    report = GradCheckReport(eps=eps)
    for name in store.names():
        flat = store.block(name).value.reshape(-1)
        n = flat.size
        if coords_per_block is None or coords_per_block >= n:
            coords = np.arange(n)
        else:
            rng = np.random.default_rng(block_seed(seed, name))
            coords = np.sort(rng.choice(n, size=coords_per_block, replace=False))
        fd = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + eps
            fp = evaluate()
            flat[c] = orig - eps
            fm = evaluate()
            flat[c] = orig
            fd[j] = (fp - fm) / (2.0 * eps)
        ad = analytic[name].reshape(-1)[coords]
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(ad)), 1e-8)
        rel = np.abs(fd - ad) / denom
        report.blocks[name] = BlockCheck(
            name, [int(c) for c in coords], fd, ad, rel, float(rel.max())
        )
    store.zero_grad()
    return report
