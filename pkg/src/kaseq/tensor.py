"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is define-by-run: every operation returns a new Tensor that
records its parents and a vector-Jacobian-product closure. Calling
``backward`` on a scalar walks the recorded graph once in reverse
topological order and accumulates gradients additively on every
requires-grad leaf, so repeated backward calls without ``zero_grad``
sum their contributions.

Tensors are immutable values apart from gradient accumulation. A graph
is confined to the thread that built it; independent graphs may run in
parallel.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DegenerateRowError, ShapeError

LOG_FLOOR = 1e-12  # clamp floor applied before every log (KL, cross-entropy)


class Tensor:
    """A float64 array plus optional participation in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def detach(self) -> "Tensor":
        """Return a view of the same values severed from the tape."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    # Light operator sugar; module-level functions are the canonical API.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def _from_op(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS: batched training graphs can exceed the recursion limit.
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order  # parents precede children


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) on every requires-grad leaf below ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward on a tensor that is not connected to the tape")
    order = _topo_order(loss)
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in flowing:
                flowing[key] = flowing[key] + pg
            else:
                flowing[key] = pg


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    # Equal shapes, or a (1, d) row broadcast against (n, d) on either side.
    if a.shape == b.shape:
        return
    if (
        a.data.ndim == 2
        and b.data.ndim == 2
        and a.shape[1] == b.shape[1]
        and (a.shape[0] == 1 or b.shape[0] == 1)
    ):
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return grad.sum(axis=0, keepdims=True)


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")
    na, nb = a.requires_grad, b.requires_grad
    return _from_op(a.data + b.data, (a, b),
                    lambda g: (_reduce_to(g, a.shape) if na else None,
                               _reduce_to(g, b.shape) if nb else None))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")
    na, nb = a.requires_grad, b.requires_grad
    return _from_op(a.data - b.data, (a, b),
                    lambda g: (_reduce_to(g, a.shape) if na else None,
                               _reduce_to(-g, b.shape) if nb else None))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")
    na, nb = a.requires_grad, b.requires_grad
    return _from_op(a.data * b.data, (a, b),
                    lambda g: (_reduce_to(g * b.data, a.shape) if na else None,
                               _reduce_to(g * a.data, b.shape) if nb else None))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    na, nb = a.requires_grad, b.requires_grad
    return _from_op(a.data / b.data, (a, b),
                    lambda g: (g / b.data if na else None,
                               -g * a.data / (b.data * b.data) if nb else None))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _from_op(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _from_op(a.data + c, (a,), lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul requires matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions {a.shape} x {b.shape} disagree")
    na, nb = a.requires_grad, b.requires_grad
    return _from_op(a.data @ b.data, (a, b),
                    lambda g: (g @ b.data.T if na else None,
                               a.data.T @ g if nb else None))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose requires a matrix, got {a.shape}")
    return _from_op(a.data.T.copy(), (a,), lambda g: (g.T,))


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        return _from_op(np.asarray(a.data.sum()), (a,),
                        lambda g: (np.broadcast_to(g, a.shape).copy(),))
    out = a.data.sum(axis=axis, keepdims=True)
    return _from_op(out, (a,),
                    lambda g: (np.broadcast_to(g, a.shape).copy(),))


def tmean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        n = a.data.size
        return _from_op(np.asarray(a.data.mean()), (a,),
                        lambda g: (np.broadcast_to(g / n, a.shape).copy(),))
    n = a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=True)
    return _from_op(out, (a,),
                    lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def frobenius_sq(a: Tensor) -> Tensor:
    """Sum of squared entries; the squared Frobenius norm for matrices."""
    return _from_op(np.asarray(np.sum(a.data * a.data)), (a,),
                    lambda g: (2.0 * g * a.data,))


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _from_op(s, (a,), lambda g: (g * s * (1.0 - s),))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ContractError("log of non-positive entry; clamp_min first")
    return _from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _from_op(out, (a,), lambda g: (g * out,))


def tabs(a: Tensor) -> Tensor:
    return _from_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clamp_min(a: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    floor = float(floor)
    mask = a.data > floor
    return _from_op(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "maximum")
    take_a = a.data >= b.data  # ties route to the first operand
    return _from_op(np.where(take_a, a.data, b.data), (a, b),
                    lambda g: (g * take_a, g * ~take_a))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "minimum")
    take_a = a.data <= b.data
    return _from_op(np.where(take_a, a.data, b.data), (a, b),
                    lambda g: (g * take_a, g * ~take_a))


# ---------------------------------------------------------------------------
# structural ops


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack matrices vertically; realizes sequence concatenation."""
    if not parts:
        raise ContractError("concat_rows of an empty list")
    width = parts[0].shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != width:
            raise ShapeError("concat_rows: all parts must be matrices of equal width")
    sizes = [p.shape[0] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=0))

    return _from_op(np.concatenate([p.data for p in parts], axis=0), tuple(parts), vjp)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("slice_rows requires a matrix")
    if not (0 <= start <= stop <= a.shape[0]):
        raise ContractError(f"slice_rows [{start}:{stop}] outside 0..{a.shape[0]}")

    def vjp(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _from_op(a.data[start:stop].copy(), (a,), vjp)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_cols of an empty list")
    height = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != height:
            raise ShapeError("concat_cols: all parts must be matrices of equal height")
    sizes = [p.shape[1] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=1))

    return _from_op(np.concatenate([p.data for p in parts], axis=1), tuple(parts), vjp)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("slice_cols requires a matrix")
    if not (0 <= start <= stop <= a.shape[1]):
        raise ContractError(f"slice_cols [{start}:{stop}] outside 0..{a.shape[1]}")

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _from_op(a.data[:, start:stop].copy(), (a,), vjp)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows by index; duplicate indices scatter-add in the backward pass."""
    idx = np.asarray(indices, dtype=np.intp)
    if a.data.ndim != 2:
        raise ShapeError("gather_rows requires a matrix")
    if idx.ndim != 1:
        raise ContractError("gather_rows indices must be one-dimensional")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ContractError("gather_rows index out of range")

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _from_op(a.data[idx].copy(), (a,), vjp)


def permute_rows(a: Tensor, perm) -> Tensor:
    """Reorder all rows by a permutation; backward is the inverse permutation."""
    p = np.asarray(perm, dtype=np.intp)
    if a.data.ndim != 2 or p.shape != (a.shape[0],):
        raise ShapeError("permute_rows requires a matrix and a full-length permutation")
    inv = np.empty_like(p)
    inv[p] = np.arange(p.size, dtype=np.intp)
    return _from_op(a.data[p].copy(), (a,), lambda g: (g[inv],))


# ---------------------------------------------------------------------------
# softmax and normalizations


def softmax_rows(a: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-wise softmax, stabilized by row-max subtraction.

    ``mask`` marks disallowed entries (True = masked); masked entries map to
    exactly zero. Literal -inf entries in the input are treated as masked,
    so the sentinel never reaches downstream arithmetic.
    """
    if a.data.ndim != 2:
        raise ShapeError("softmax_rows requires a matrix")
    blocked = np.isneginf(a.data)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape:
            raise ShapeError(f"softmax mask shape {mask.shape} != input {a.shape}")
        blocked = blocked | mask
    if not blocked.any():
        m = a.data.max(axis=1, keepdims=True)
        e = np.exp(a.data - m)
    else:
        if np.any(blocked.all(axis=1)):
            raise DegenerateRowError("softmax row with every entry masked")
        x = np.where(blocked, -np.inf, a.data)
        m = np.max(x, axis=1, keepdims=True)
        e = np.exp(np.where(blocked, 0.0, x - m))
        e[blocked] = 0.0
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        inner = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - inner),)

    return _from_op(s, (a,), vjp)


def layer_norm_rows(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization with learned (1, d) gain and bias."""
    if x.data.ndim != 2:
        raise ShapeError("layer_norm_rows requires a matrix")
    if gain.shape != (1, x.shape[1]) or bias.shape != (1, x.shape[1]):
        raise ShapeError("layer_norm gain/bias must be (1, d)")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    z = (x.data - mu) * inv
    out = z * gain.data + bias.data

    nx, ng, nb = x.requires_grad, gain.requires_grad, bias.requires_grad

    def vjp(g):
        gx = ggain = gbias = None
        if nx:
            gz = g * gain.data
            gx = (gz - gz.mean(axis=1, keepdims=True)
                  - z * (gz * z).mean(axis=1, keepdims=True)) * inv
        if ng:
            ggain = (g * z).sum(axis=0, keepdims=True)
        if nb:
            gbias = g.sum(axis=0, keepdims=True)
        return (gx, ggain, gbias)

    return _from_op(out, (x, gain, bias), vjp)


def channel_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each column to zero mean, unit std over all rows.

    The denominator is (std + eps); a constant column therefore maps to
    exactly zero. Gradients flow through the batch statistics.
    """
    if x.data.ndim != 2:
        raise ShapeError("channel_norm requires a matrix")
    mu = x.data.mean(axis=0, keepdims=True)
    centered = x.data - mu
    sigma = np.sqrt((centered * centered).mean(axis=0, keepdims=True))
    denom = sigma + eps
    out = centered / denom

    def vjp(g):
        n = x.shape[0]
        gc = (g - g.mean(axis=0, keepdims=True)) / denom
        # d(sigma)/dx_j = centered_j / (n * sigma); zero for constant columns.
        safe_sigma = np.where(sigma > 0, sigma, 1.0)
        coeff = (g * centered).sum(axis=0, keepdims=True) / (n * safe_sigma * denom * denom)
        coeff = np.where(sigma > 0, coeff, 0.0)
        return (gc - centered * coeff,)

    return _from_op(out, (x,), vjp)


# ---------------------------------------------------------------------------
# batched block attention kernels


def _block_counts(rows_q: int, rows_k: int, q_block: int, k_block: int, op: str) -> int:
    if q_block <= 0 or k_block <= 0:
        raise ShapeError(f"{op}: block sizes must be positive")
    if rows_q % q_block or rows_k % k_block:
        raise ShapeError(f"{op}: rows not divisible by block size")
    bq, bk = rows_q // q_block, rows_k // k_block
    if bq != bk:
        raise ShapeError(f"{op}: query blocks ({bq}) != key blocks ({bk})")
    return bq


def block_scores(q: Tensor, k: Tensor, q_block: int, k_block: int) -> Tensor:
    """Per-block Q . K^T over aligned equal-size blocks stacked along rows.

    Rows [i*q_block:(i+1)*q_block) of the output hold attention scores of
    query block i against key block i only, which is how the block-diagonal
    attention mask keeps cost linear in the number of blocks.
    """
    nb = _block_counts(q.shape[0], k.shape[0], q_block, k_block, "block_scores")
    if q.shape[1] != k.shape[1]:
        raise ShapeError("block_scores: query/key widths differ")
    q3 = q.data.reshape(nb, q_block, q.shape[1])
    k3 = k.data.reshape(nb, k_block, k.shape[1])
    out = np.matmul(q3, k3.swapaxes(1, 2)).reshape(nb * q_block, k_block)
    nq, nk = q.requires_grad, k.requires_grad

    def vjp(g):
        g3 = g.reshape(nb, q_block, k_block)
        gq = np.matmul(g3, k3).reshape(q.shape) if nq else None
        gk = np.matmul(g3.swapaxes(1, 2), q3).reshape(k.shape) if nk else None
        return (gq, gk)

    return _from_op(out, (q, k), vjp)


def block_mix(attn: Tensor, v: Tensor, q_block: int, k_block: int) -> Tensor:
    """Per-block attn . V companion of :func:`block_scores`."""
    nb = _block_counts(attn.shape[0], v.shape[0], q_block, k_block, "block_mix")
    if attn.shape[1] != k_block:
        raise ShapeError("block_mix: attention width must equal the key block size")
    a3 = attn.data.reshape(nb, q_block, k_block)
    v3 = v.data.reshape(nb, k_block, v.shape[1])
    out = np.matmul(a3, v3).reshape(nb * q_block, v.shape[1])
    na, nv = attn.requires_grad, v.requires_grad

    def vjp(g):
        g3 = g.reshape(nb, q_block, v.shape[1])
        ga = np.matmul(g3, v3.swapaxes(1, 2)).reshape(attn.shape) if na else None
        gv = np.matmul(a3.swapaxes(1, 2), g3).reshape(v.shape) if nv else None
        return (ga, gv)

    return _from_op(out, (attn, v), vjp)
