"""Dense-tensor math with reverse-mode automatic differentiation.

Everything is float64. A Tape is created per forward pass and owns every
tensor built on it; there is no global state, so independent generations
can run tapes in parallel. Ops are deliberately restricted: 2-D matmul,
elementwise arithmetic on matching shapes, and bias-add over the leading
axis as the only broadcast. Row-reduction kernels (softmax, layer norm)
delegate to :mod:`tta.kernels`.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ContractError, ShapeError


class Tensor:
    """Immutable array value recorded on a tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data: np.ndarray, tape: "Tape", node: int):
        self.data = data
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, node={self.node})"


class Tape:
    """Ordered record of ops for one forward pass.

    Records are appended in execution order, so iterating them in reverse
    is a valid topological sweep: every node's gradient is final before its
    producing op runs its adjoint.
    """

    def __init__(self):
        self._records = []  # (op name, input node ids, output node id, adjoint)
        self._leaf_shapes = {}
        self._n_nodes = 0

    def _new_node(self) -> int:
        nid = self._n_nodes
        self._n_nodes += 1
        return nid

    def leaf(self, array) -> Tensor:
        """Register an input tensor (parameter, state, or constant)."""
        arr = np.asarray(array, dtype=np.float64)
        nid = self._new_node()
        self._leaf_shapes[nid] = arr.shape
        return Tensor(arr, self, nid)

    def _emit(self, name, inputs, out_data, adjoint) -> Tensor:
        out = Tensor(out_data, self, self._new_node())
        self._records.append((name, tuple(t.node for t in inputs), out.node, adjoint))
        return out

    @property
    def num_records(self) -> int:
        return len(self._records)


class GradientMap:
    """Gradients keyed by leaf node id; unreached leaves read as zeros."""

    def __init__(self, grads: dict):
        self._grads = grads

    def __getitem__(self, node_id: int) -> np.ndarray:
        return self._grads[node_id]

    def of(self, t: Tensor) -> np.ndarray:
        return self._grads[t.node]


def _same_tape(*tensors) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ContractError("operands recorded on different tapes")
    return tape


def backward(loss: Tensor) -> GradientMap:
    """Reverse sweep from a scalar loss to every leaf of its tape."""
    if loss.data.shape != ():
        raise ContractError(f"backward requires a scalar, got shape {loss.data.shape}")
    tape = loss.tape
    grads = {loss.node: np.ones(())}
    for _name, in_ids, out_id, adjoint in reversed(tape._records):
        g = grads.get(out_id)
        if g is None:
            continue
        for nid, gi in zip(in_ids, adjoint(g)):
            if nid in grads:
                grads[nid] = grads[nid] + gi
            else:
                grads[nid] = gi
    out = {
        nid: grads.get(nid, np.zeros(shape))
        for nid, shape in tape._leaf_shapes.items()
    }
    return GradientMap(out)


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data

    def adjoint(g):
        return g @ bd.T, ad.T @ g

    return tape._emit("matmul", (a, b), ad @ bd, adjoint)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also accepts a (n,) bias against a (m, n) matrix."""
    tape = _same_tape(a, b)
    bias = a.data.ndim == 2 and b.data.shape == (a.data.shape[1],)
    if not bias and a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes {a.data.shape} + {b.data.shape}")

    def adjoint(g):
        return (g, g.sum(axis=0)) if bias else (g, g)

    return tape._emit("add", (a, b), a.data + b.data, adjoint)


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shapes {a.data.shape} * {b.data.shape}")
    ad, bd = a.data, b.data

    def adjoint(g):
        return g * bd, g * ad

    return tape._emit("mul", (a, b), ad * bd, adjoint)


def scale_cols(x: Tensor, g: Tensor) -> Tensor:
    """Column-wise scale of a (m, n) matrix by a (n,) vector."""
    tape = _same_tape(x, g)
    if x.data.ndim != 2 or g.data.shape != (x.data.shape[1],):
        raise ShapeError(f"scale_cols shapes {x.data.shape} * {g.data.shape}")
    xd, gd = x.data, g.data

    def adjoint(gout):
        return gout * gd, (gout * xd).sum(axis=0)

    return tape._emit("scale_cols", (x, g), xd * gd, adjoint)


def scalar_scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def adjoint(g):
        return (g * c,)

    return x.tape._emit("scalar_scale", (x,), x.data * c, adjoint)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError("transpose requires a 2-D tensor")

    def adjoint(g):
        return (g.T,)

    return x.tape._emit("transpose", (x,), x.data.T.copy(), adjoint)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def adjoint(g):
        return (g * mask,)

    return x.tape._emit("relu", (x,), x.data * mask, adjoint)


def _as_rows(data: np.ndarray):
    if data.ndim == 1:
        return data[None, :], True
    if data.ndim == 2:
        return data, False
    raise ShapeError(f"row op requires 1-D or 2-D input, got {data.shape}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if axis not in (-1, x.data.ndim - 1):
        raise ShapeError("softmax supports the last axis only")
    rows, squeeze = _as_rows(x.data)
    y = kernels.softmax_rows(rows)

    def adjoint(g):
        grows = g[None, :] if squeeze else g
        gx = kernels.softmax_rows_grad(y, grows)
        return (gx[0] if squeeze else gx,)

    return x.tape._emit("softmax", (x,), y[0] if squeeze else y, adjoint)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if axis not in (-1, x.data.ndim - 1):
        raise ShapeError("log_softmax supports the last axis only")
    rows, squeeze = _as_rows(x.data)
    logy = kernels.log_softmax_rows(rows)

    def adjoint(g):
        grows = g[None, :] if squeeze else g
        gx = kernels.log_softmax_rows_grad(logy, grows)
        return (gx[0] if squeeze else gx,)

    return x.tape._emit("log_softmax", (x,), logy[0] if squeeze else logy, adjoint)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError("layer_norm requires a 2-D tensor")
    y, rstd = kernels.layer_norm_rows(x.data, eps)

    def adjoint(g):
        return (kernels.layer_norm_rows_grad(y, rstd, g),)

    return x.tape._emit("layer_norm", (x,), y, adjoint)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows by integer index; adjoint scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2:
        raise ShapeError("gather_rows requires a 2-D tensor")
    n_rows = x.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise IndexError(f"row index out of range [0, {n_rows})")
    shape = x.data.shape

    def adjoint(g):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return x.tape._emit("gather_rows", (x,), x.data[idx], adjoint)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    return gather_rows(table, ids)


def sum_all(x: Tensor) -> Tensor:
    shape = x.data.shape

    def adjoint(g):
        return (np.full(shape, float(g)),)

    return x.tape._emit("sum_all", (x,), np.asarray(x.data.sum()), adjoint)


def mean_all(x: Tensor) -> Tensor:
    shape = x.data.shape
    size = x.data.size

    def adjoint(g):
        return (np.full(shape, float(g) / size),)

    return x.tape._emit("mean_all", (x,), np.asarray(x.data.mean()), adjoint)


def mean_rows(x: Tensor) -> Tensor:
    """Average a (m, n) matrix over rows to a (1, n) matrix."""
    if x.data.ndim != 2:
        raise ShapeError("mean_rows requires a 2-D tensor")
    m = x.data.shape[0]

    def adjoint(g):
        return (np.repeat(g / m, m, axis=0),)

    return x.tape._emit("mean_rows", (x,), x.data.mean(axis=0, keepdims=True), adjoint)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-probability of the target column per row."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.data.shape[0],):
        raise ShapeError(
            f"cross_entropy shapes {logits.data.shape} vs {targets.shape}"
        )
    n, v = logits.data.shape
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    logp = kernels.log_softmax_rows(logits.data)
    loss = -logp[np.arange(n), targets].mean()

    def adjoint(g):
        gx = np.exp(logp)
        gx[np.arange(n), targets] -= 1.0
        return (gx * (float(g) / n),)

    return logits.tape._emit("cross_entropy", (logits,), np.asarray(loss), adjoint)
