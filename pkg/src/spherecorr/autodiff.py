"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

Every op evaluates eagerly and records a backward closure, so a Tensor is
both a value and a node of the computation graph. The op set is fixed and
small; anything else (cross products, cosine distances, attention) is
composed from it. All arithmetic is double precision.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class Tensor:
    """A float64 array plus the graph edges needed for reverse accumulation.

    Leaves created with ``requires_grad=True`` are the trainable parameters;
    everything else is an interior node or a constant. Interior nodes keep
    references to their parents and a closure that maps the incoming adjoint
    to per-parent adjoint contributions.
    """

    __slots__ = ("value", "parents", "backward_fn", "requires_grad")

    def __init__(
        self,
        value,
        parents: tuple = (),
        backward_fn: Callable[[Array], tuple] | None = None,
        requires_grad: bool = False,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        kind = "leaf" if not self.parents else "node"
        return f"Tensor({kind}, shape={self.value.shape})"

    # arithmetic sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    """Wrap plain arrays/scalars as constant tensors; pass Tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def parameter(value, rng_copy: bool = True) -> Tensor:
    """Create a trainable leaf (copies its input so callers keep ownership)."""
    arr = np.array(value, dtype=np.float64, copy=rng_copy)
    return Tensor(arr, requires_grad=True)


def _tracks(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t.parents for t in tensors)


def _node(value, parents, backward_fn) -> Tensor:
    """Build an interior node, pruning graph edges under constant subtrees."""
    live = tuple(p for p in parents if p.requires_grad or p.parents)
    if not live:
        return Tensor(value)
    return Tensor(value, parents=parents, backward_fn=backward_fn)


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum an adjoint back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value + b.value

    def bwd(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return _node(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value - b.value

    def bwd(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return _node(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value * b.value

    def bwd(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return _node(out, (a, b), bwd)


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = as_tensor(a)
    c = float(c)
    return _node(a.value * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    """max(x, 0); subgradient 0 at the kink."""
    a = as_tensor(a)
    keep = a.value > 0.0
    return _node(np.where(keep, a.value, 0.0), (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    out = a.value.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.value.shape).copy(),)

    return _node(out, (a,), bwd)


def tmean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return scale(tsum(a, axis=axis), 1.0 / n)


def dot(a, b) -> Tensor:
    """Inner product of two 1-d vectors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 1 or b.value.ndim != 1:
        raise ValueError("dot expects 1-d vectors")
    out = float(a.value @ b.value)

    def bwd(g):
        return g * b.value, g * a.value

    return _node(out, (a, b), bwd)


def row_dot(a, b) -> Tensor:
    """Row-wise inner products of two (N, D) matrices -> (N,)."""
    return tsum(mul(a, b), axis=1)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul expects 2-d matrices")
    out = a.value @ b.value

    def bwd(g):
        return g @ b.value.T, a.value.T @ g

    return _node(out, (a, b), bwd)


def matmul_rows(a, b) -> Tensor:
    """Matmul whose output row i is bit-identical for any batch height.

    Uses unoptimized einsum so the reduction over the inner axis runs in a
    fixed order per output element, independent of how many rows are in the
    batch. BLAS gemm does not promise that; this op backs the per-point
    independence guarantee of the prototype network.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul_rows expects 2-d matrices")
    out = np.einsum("nd,dm->nm", a.value, b.value, optimize=False)

    def bwd(g):
        return (
            np.einsum("nm,dm->nd", g, b.value, optimize=False),
            np.einsum("nd,nm->dm", a.value, g, optimize=False),
        )

    return _node(out, (a, b), bwd)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.value.T, (a,), lambda g: (g.T,))


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.array_split(g, splits, axis=axis))

    return _node(out, tuple(parts), bwd)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = as_tensor(a)
    idx = [slice(None)] * a.value.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = a.value[idx]

    def bwd(g):
        full = np.zeros_like(a.value)
        full[idx] = g
        return (full,)

    return _node(out, (a,), bwd)


def gather_rows(a, indices) -> Tensor:
    """Select rows of a 2-d matrix by integer index (gradient scatters)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = a.value[idx]

    def bwd(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        return (full,)

    return _node(out, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.value.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def broadcast_rows(a, n: int) -> Tensor:
    """Tile a (1, D) row to (n, D); gradient sums the rows back."""
    a = as_tensor(a)
    if a.value.ndim != 2 or a.value.shape[0] != 1:
        raise ValueError("broadcast_rows expects a (1, D) matrix")
    out = np.broadcast_to(a.value, (n, a.value.shape[1])).copy()
    return _node(out, (a,), lambda g: (g.sum(axis=0, keepdims=True),))


# ---------------------------------------------------------------------------
# normalizations


def softmax_rows(a) -> Tensor:
    """Row-wise softmax (last axis), numerically stabilized."""
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _node(out, (a,), bwd)


LAYER_NORM_EPS = 1e-5


def layer_norm_rows(a) -> Tensor:
    """Row-wise standardization (zero mean, unit variance; no affine part)."""
    a = as_tensor(a)
    mu = a.value.mean(axis=-1, keepdims=True)
    centered = a.value - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    out = centered * inv
    n = a.value.shape[-1]

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gy),)

    return _node(out, (a,), bwd)


def l2_normalize_rows(a) -> Tensor:
    """Normalize each row to unit Euclidean norm.

    The gradient is the usual orthogonal projection: components of the
    adjoint along the output direction are removed. Rows with vanishing norm
    are rejected rather than fudged with an epsilon.
    """
    a = as_tensor(a)
    x = np.atleast_2d(a.value)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms < 1e-15):
        raise ValueError("l2_normalize_rows: zero-norm row")
    out = a.value / norms.reshape(norms.shape if a.value.ndim > 1 else ())

    def bwd(g):
        y = out if out.ndim > 1 else out[None, :]
        gg = g if g.ndim > 1 else g[None, :]
        proj = gg - y * (gg * y).sum(axis=-1, keepdims=True)
        res = proj / norms
        return (res if a.value.ndim > 1 else res[0],)

    return _node(out, (a,), bwd)


def cross_rows(a, b) -> Tensor:
    """Row-wise 3-d cross product, composed from slices and products."""
    a, b = as_tensor(a), as_tensor(b)
    ax, ay, az = (slice_axis(a, 1, i, i + 1) for i in range(3))
    bx, by, bz = (slice_axis(b, 1, i, i + 1) for i in range(3))
    return concat(
        [
            sub(mul(ay, bz), mul(az, by)),
            sub(mul(az, bx), mul(ax, bz)),
            sub(mul(ax, by), mul(ay, bx)),
        ],
        axis=1,
    )


# ---------------------------------------------------------------------------
# reverse accumulation


def _topo_order(root: Tensor) -> list[Tensor]:
    """Children-after-parents order, deterministic in construction order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[Array]:
    """Gradients of a scalar loss w.r.t. parameter leaves.

    Parameters that do not appear in the graph get zero gradients.
    """
    if loss.value.ndim != 0:
        raise ValueError(f"grad expects a scalar loss, got shape {loss.value.shape}")
    adjoint: dict[int, Array] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(_topo_order(loss)):
        if node.backward_fn is None:
            continue  # leaves and constants keep their accumulated adjoint
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        for parent, contrib in zip(node.parents, node.backward_fn(g)):
            if not (parent.requires_grad or parent.parents):
                continue
            key = id(parent)
            acc = adjoint.get(key)
            contrib = np.asarray(contrib, dtype=np.float64)
            adjoint[key] = contrib if acc is None else acc + contrib
    return [
        np.asarray(adjoint.get(id(p), np.zeros_like(p.value)), dtype=np.float64).reshape(
            p.value.shape
        )
        for p in params
    ]


def finite_diff_grad(
    f: Callable[[list[Array]], float],
    params: Sequence[Array],
    h: float = 1e-5,
    coords: Sequence[Array] | None = None,
) -> list[Array]:
    """Central-difference gradient oracle: (f(p+h e) - f(p-h e)) / 2h.

    ``f`` must be pure and deterministic. When ``coords`` is given (one flat
    index array per parameter), only those coordinates are probed and the
    rest are left at zero; that keeps large checks affordable.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    work = [np.array(p, dtype=np.float64) for p in params]
    grads = [np.zeros_like(p) for p in work]
    for k, p in enumerate(work):
        flat = p.reshape(-1)
        gflat = grads[k].reshape(-1)
        idx = range(flat.size) if coords is None else np.asarray(coords[k], dtype=np.intp)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(work)
            flat[i] = orig - h
            fm = f(work)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError("non-finite evaluation in finite differences")
            gflat[i] = (fp - fm) / (2.0 * h)
    return grads
