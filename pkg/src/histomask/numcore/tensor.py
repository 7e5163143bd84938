"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is a recording tape: ops executed while a ``GradGraph`` is active
append their records to it, and ``backward`` replays the tape in reverse to
accumulate gradients.  Outside an active graph the same ops run in plain
inference mode (no records, no closures), which is what evaluation paths use.

Every op validates that its output is finite; NaN or Inf anywhere is treated
as numerical divergence and raised as ``NonFiniteError``.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import erf

__all__ = [
    "GradGraph",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "add",
    "backward",
    "concat",
    "constant",
    "dropout",
    "exp",
    "gelu",
    "layer_norm",
    "log",
    "masked_softmax",
    "matmul",
    "mean",
    "mul",
    "neg",
    "pairwise_euclidean",
    "parameter",
    "reshape",
    "sigmoid",
    "sqrt",
    "sub",
    "take",
    "tanh",
    "tensor_sum",
    "tile_leading",
    "transpose",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf (numerical divergence)."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


_GRAPH_STACK: list["GradGraph"] = []


def _active_graph() -> "GradGraph | None":
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


class GradGraph:
    """Recording tape for one forward pass.

    ``nodes`` holds op-result tensors in creation order, which is a valid
    topological order because operands always exist before their result.
    Use as a context manager around the forward pass, then call
    ``backward(graph, loss)``.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "GradGraph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        popped = _GRAPH_STACK.pop()
        assert popped is self, "GradGraph context exited out of order"
        return False


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A float64 array plus (optionally) its position in the active tape."""

    __slots__ = ("data", "op", "parents", "vjp", "requires_grad")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, "leaf")
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self.vjp = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def constant(data) -> Tensor:
    """Leaf tensor that never receives a gradient."""
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    """Leaf tensor that accumulates a gradient in ``backward``."""
    return Tensor(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, op: str, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Build an op-result tensor, appending it to the active tape if any."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    out.parents = parents
    out.vjp = None
    out.requires_grad = False
    graph = _active_graph()
    if graph is not None and any(p.requires_grad for p in parents):
        out.vjp = vjp
        out.requires_grad = True
        graph.nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def vjp(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _record(data, "add", (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def vjp(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _record(data, "sub", (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def vjp(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        )

    return _record(data, "mul", (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, "neg", (a,), lambda g: ((a, -g),))


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _record(data, "exp", (a,), lambda g: ((a, g * data),))


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)
    return _record(data, "log", (a,), lambda g: ((a, g / a.data),))


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)
    return _record(data, "sqrt", (a,), lambda g: ((a, g * 0.5 / data),))


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)
    return _record(data, "tanh", (a,), lambda g: ((a, g * (1.0 - data * data)),))


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))
    return _record(data, "sigmoid", (a,), lambda g: ((a, g * data * (1.0 - data)),))


def gelu(a: Tensor) -> Tensor:
    """Exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * phi

    def vjp(g):
        dens = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return ((a, g * (phi + x * dens)),)

    return _record(data, "gelu", (a,), vjp)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)
    return _record(data, "reshape", (a,), lambda g: ((a, g.reshape(a.shape)),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))
    return _record(data, "transpose", (a,), lambda g: ((a, g.transpose(inverse)),))


def concat(parts: list[Tensor], axis: int) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            slicer[axis] = slice(lo, hi)
            grads.append((p, g[tuple(slicer)]))
        return tuple(grads)

    return _record(data, "concat", tuple(parts), vjp)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis`` (embedding-style lookup)."""
    idx = np.asarray(indices)
    data = np.take(a.data, idx, axis=axis)

    def vjp(g):
        ga = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(ga, idx, g)
        else:
            moved = np.moveaxis(ga, axis, 0)
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return ((a, ga),)

    return _record(data, "take", (a,), vjp)


def tile_leading(a: Tensor, repeats: int) -> Tensor:
    """Repeat a tensor along a new leading axis."""
    data = np.broadcast_to(a.data, (repeats,) + a.shape).copy()
    return _record(data, "tile_leading", (a,), lambda g: ((a, g.sum(axis=0)),))


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.shape).copy()),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g_exp, a.shape).copy()),)

    return _record(data, "sum", (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), constant(1.0 / count))


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported forms: 2-D @ 2-D, batched (..., m, k) @ (..., k, p) with equal
    leading dims, and (..., m, k) @ (k, p) against a 2-D weight.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    if a.ndim == b.ndim:
        if a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul batch dims disagree: {a.shape} @ {b.shape}")
        data = a.data @ b.data

        def vjp(g):
            return (
                (a, g @ np.swapaxes(b.data, -1, -2)),
                (b, np.swapaxes(a.data, -1, -2) @ g),
            )

    elif b.ndim == 2:
        data = a.data @ b.data
        k, p = b.shape

        def vjp(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, p)
            return ((a, ga), (b, gb))

    else:
        raise ShapeError(f"unsupported matmul ranks: {a.shape} @ {b.shape}")
    return _record(data, "matmul", (a, b), vjp)


# ---------------------------------------------------------------------------
# fused neural-net ops
# ---------------------------------------------------------------------------

def masked_softmax(logits: Tensor, additive_mask=None) -> Tensor:
    """Softmax over the last axis after adding ``additive_mask``.

    Mask entries are 0 for keys to keep and a large negative value (the
    attention code uses -1e5) for keys to suppress; suppressed weights
    underflow to exactly 0 after row-max subtraction.  The mask is data,
    never a differentiable input.  A row whose best entry sits at or below
    -1e4 (well past any live logit, well above the bias) is fully masked,
    which the caller must prevent; it raises here.
    """
    m = logits.data
    if additive_mask is not None:
        mask = additive_mask.data if isinstance(additive_mask, Tensor) else np.asarray(additive_mask)
        m = m + mask
    row_max = m.max(axis=-1, keepdims=True)
    if np.any(row_max <= -1e4):
        raise ValueError("masked_softmax row with every key masked")
    m = m - row_max
    e = np.exp(m)
    probs = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (probs * g).sum(axis=-1, keepdims=True)
        return ((logits, probs * (g - inner)),)

    return _record(probs, "masked_softmax", (logits,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if d == 0:
        raise ShapeError("layer_norm over an empty axis")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat * gain.data + bias.data

    def vjp(g):
        dxhat = g * gain.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        reduce_axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes)
        dbias = g.sum(axis=reduce_axes)
        return ((x, dx), (gain, dgain), (bias, dbias))

    return _record(data, "layer_norm", (x, gain, bias), vjp)


def pairwise_euclidean(a: Tensor, b) -> Tensor:
    """out[i, j] = ||a_i - b_j|| for row sets a (m, d) and constant b (k, d).

    The backward pass never materializes an (m, k, d) array: with
    w = g / out (zero where the distance is zero), grad_a = rowsum(w) * a
    minus w @ b.
    """
    b = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_euclidean needs (m, d) and (k, d), got {a.shape}, {b.shape}")
    data = cdist(a.data, b, metric="euclidean")

    def vjp(g):
        w = np.divide(g, data, out=np.zeros_like(g), where=data > 0)
        ga = w.sum(axis=1, keepdims=True) * a.data - w @ b
        return ((a, ga),)

    return _record(data, "pairwise_euclidean", (a,), vjp)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; draws one mask from ``rng`` per call."""
    if rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, constant(keep))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(graph: GradGraph, loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate gradients of a scalar ``loss`` through the tape.

    Returns a mapping from ``id(tensor)`` to gradient for every tensor the
    loss reaches, including all parameter leaves.  Accumulation walks
    ``graph.nodes`` strictly in reverse creation order, so the reduction
    order is deterministic.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        for parent, pg in node.vjp(g):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)
    return grads


def grads_by_name(
    grads: dict[int, np.ndarray], params: dict[str, Tensor]
) -> dict[str, np.ndarray]:
    """Project a backward() result onto a named parameter dict.

    Parameters the loss never reached get a zero gradient of the right shape.
    """
    return {
        name: grads.get(id(p), np.zeros_like(p.data)) for name, p in params.items()
    }
