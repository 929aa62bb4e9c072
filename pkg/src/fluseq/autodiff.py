"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: every operation computes its value eagerly with numpy and,
when an operand is tracked, records a node on the active :class:`Tape`.
``Tape.backward(loss)`` then walks the records in reverse and accumulates
gradients additively, so a tensor feeding several consumers receives the sum
of their contributions.

Tensors are rank 1 or 2; scalars are length-1 vectors.  A tape is built per
training step and thrown away, which keeps variable-length sequence models
simple.  Tensors without a tape handle are plain immutable values.
"""

import numpy as np

from fluseq.errors import ContractError, DimensionError, DomainError


def _as_array(values):
    data = np.asarray(values, dtype=np.float64)
    if data.ndim == 0:
        data = data.reshape(1)
    if data.ndim > 2:
        raise DimensionError(f"tensors are rank 1 or 2, got shape {data.shape}")
    return data


class Tensor:
    """A value plus an optional handle into the tape that produced it."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape=None, node_id=None):
        self.data = data
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return hadamard(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        tracked = "" if self.node_id is None else f", node {self.node_id}"
        return f"Tensor(shape={tuple(self.shape)}{tracked})"


def tensor(values):
    """Wrap values as an untracked constant tensor."""
    return Tensor(_as_array(values))


class _Entry:
    __slots__ = ("fn", "input_ids", "output_ids")

    def __init__(self, fn, input_ids, output_ids):
        self.fn = fn
        self.input_ids = input_ids
        self.output_ids = output_ids


class GradMap:
    """Gradients keyed by tensor; unreached leaves read as zeros."""

    def __init__(self, tape, slots):
        self._tape = tape
        self._slots = slots

    def __getitem__(self, t):
        if t.tape is not self._tape or t.node_id is None:
            raise ContractError("tensor is not a node on the differentiated tape")
        g = self._slots[t.node_id]
        if g is None:
            return np.zeros(self._tape._shapes[t.node_id])
        return g


class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    def __init__(self):
        self._entries = []
        self._shapes = []

    def leaf(self, values):
        """Register a leaf (parameter) tensor.  Shares the caller's array."""
        data = values if isinstance(values, np.ndarray) else None
        if data is None or data.dtype != np.float64 or data.ndim not in (1, 2):
            data = _as_array(values)
        return Tensor(data, self, self._alloc(data.shape))

    def _alloc(self, shape):
        self._shapes.append(shape)
        return len(self._shapes) - 1

    def record(self, backward_fn, inputs, outputs):
        """Append a node.  ``backward_fn(*output_grads)`` must return one
        gradient array (or None) per input, in order."""
        self._entries.append(
            _Entry(
                backward_fn,
                tuple(t.node_id for t in inputs),
                tuple(t.node_id for t in outputs),
            )
        )

    def backward(self, loss):
        """Backpropagate from a scalar loss node; returns a :class:`GradMap`.

        Entries whose outputs all received no gradient are skipped.  For
        multi-output entries the backward fn is called with None for the
        outputs that received none (the fused kernels exploit this).
        """
        if loss.tape is not self or loss.node_id is None:
            raise ContractError("loss is not a node on this tape")
        if loss.data.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        slots = [None] * len(self._shapes)
        slots[loss.node_id] = np.ones(1)
        for entry in reversed(self._entries):
            outs = [slots[i] for i in entry.output_ids]
            if all(g is None for g in outs):
                continue
            grads_in = entry.fn(*outs)
            for node_id, g in zip(entry.input_ids, grads_in):
                if node_id is None or g is None:
                    continue
                if slots[node_id] is None:
                    slots[node_id] = np.array(g, dtype=np.float64, copy=True)
                else:
                    slots[node_id] += g
        return GradMap(self, slots)


def backward(tape, loss):
    return tape.backward(loss)


def _tape_of(*tensors):
    found = None
    for t in tensors:
        if t.tape is not None:
            if found is not None and found is not t.tape:
                raise ContractError("operands live on different tapes")
            found = t.tape
    return found


def apply_op(inputs, out_data, backward_fn):
    """Create one output tensor and record the node if any input is tracked."""
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out_data)
    out = Tensor(out_data, tape, tape._alloc(out_data.shape))
    tape.record(backward_fn, inputs, (out,))
    return out


def apply_multi_op(inputs, out_datas, backward_fn):
    """Like :func:`apply_op` for ops with several outputs (fused kernels)."""
    tape = _tape_of(*inputs)
    if tape is None:
        return tuple(Tensor(d) for d in out_datas)
    outs = tuple(Tensor(d, tape, tape._alloc(d.shape)) for d in out_datas)
    tape.record(backward_fn, inputs, outs)
    return outs


def _require_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise DimensionError(
            f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ"
        )


def matmul(a, b):
    """Matrix/vector product following numpy @ semantics for ranks 1 and 2."""
    A, B = a.data, b.data
    if A.ndim == 1 and B.ndim == 1:
        raise DimensionError(
            f"matmul: need a rank-2 operand, got shapes {A.shape} and {B.shape}"
        )
    inner_a = A.shape[-1] if A.ndim == 2 else A.shape[0]
    if inner_a != B.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions disagree for shapes {A.shape} and {B.shape}"
        )
    out = A @ B

    def bwd(g):
        if A.ndim == 2 and B.ndim == 2:
            return g @ B.T, A.T @ g
        if A.ndim == 2:  # matrix @ vector
            return np.outer(g, B), A.T @ g
        return B @ g, np.outer(A, g)  # vector @ matrix

    return apply_op((a, b), out, bwd)


def add(a, b):
    _require_same_shape(a, b, "add")
    return apply_op((a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b):
    _require_same_shape(a, b, "sub")
    return apply_op((a, b), a.data - b.data, lambda g: (g, -g))


def hadamard(a, b):
    _require_same_shape(a, b, "hadamard")
    A, B = a.data, b.data
    return apply_op((a, b), A * B, lambda g: (g * B, g * A))


def scale(a, k):
    k = float(k)
    return apply_op((a,), a.data * k, lambda g: (g * k,))


def add_rowvec(m, v):
    """Add a vector to every row of a matrix."""
    M, V = m.data, v.data
    if M.ndim != 2 or V.ndim != 1 or M.shape[1] != V.shape[0]:
        raise DimensionError(
            f"add_rowvec: shapes {M.shape} and {V.shape} are incompatible"
        )
    return apply_op((m, v), M + V, lambda g: (g, g.sum(axis=0)))


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return apply_op((a,), out, lambda g: (g * out * (1.0 - out),))


def tanh(a):
    out = np.tanh(a.data)
    return apply_op((a,), out, lambda g: (g * (1.0 - out * out),))


def softmax(a):
    """Normalized exponentials of a vector, computed with max-subtraction."""
    v = a.data
    if v.ndim != 1:
        raise DimensionError(f"softmax expects a vector, got shape {v.shape}")
    if v.size == 0:
        raise DomainError("softmax of an empty vector is undefined")
    e = np.exp(v - v.max())
    out = e / e.sum()

    def bwd(g):
        return (out * (g - np.dot(g, out)),)

    return apply_op((a,), out, bwd)


def concat(a, b):
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise DimensionError(
            f"concat expects vectors, got shapes {a.data.shape} and {b.data.shape}"
        )
    n = a.data.shape[0]
    out = np.concatenate([a.data, b.data])
    return apply_op((a, b), out, lambda g: (g[:n], g[n:]))


def stack(rows):
    """Stack equal-length vectors into a matrix (one vector per row)."""
    rows = tuple(rows)
    if not rows:
        raise DomainError("stack of zero vectors")
    for r in rows:
        if r.data.ndim != 1 or r.data.shape != rows[0].data.shape:
            raise DimensionError("stack expects equal-length vectors")
    out = np.stack([r.data for r in rows])
    return apply_op(rows, out, lambda g: tuple(g[i] for i in range(len(rows))))


def transpose(m):
    if m.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {m.data.shape}")
    return apply_op((m,), m.data.T.copy(), lambda g: (g.T,))


def flip_rows(m):
    """Reverse the row order of a matrix (time reversal for sequences)."""
    if m.data.ndim != 2:
        raise DimensionError(f"flip_rows expects a matrix, got shape {m.data.shape}")
    return apply_op((m,), m.data[::-1].copy(), lambda g: (g[::-1],))


def hconcat(a, b):
    A, B = a.data, b.data
    if A.ndim != 2 or B.ndim != 2 or A.shape[0] != B.shape[0]:
        raise DimensionError(
            f"hconcat: shapes {A.shape} and {B.shape} are incompatible"
        )
    n = A.shape[1]
    out = np.concatenate([A, B], axis=1)
    return apply_op((a, b), out, lambda g: (g[:, :n], g[:, n:]))


def row(m, index):
    """Extract one row of a matrix as a vector."""
    M = m.data
    if M.ndim != 2:
        raise DimensionError(f"row expects a matrix, got shape {M.shape}")
    if not 0 <= index < M.shape[0]:
        raise DomainError(f"row index {index} out of range for shape {M.shape}")
    out = M[index].copy()

    def bwd(g):
        full = np.zeros_like(M)
        full[index] = g
        return (full,)

    return apply_op((m,), out, bwd)


def sum_all(a):
    """Sum of all elements, as a scalar (length-1) tensor."""
    in_shape = a.data.shape
    out = np.array([a.data.sum()])
    return apply_op((a,), out, lambda g: (np.full(in_shape, g[0]),))
