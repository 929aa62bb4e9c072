"""Neural building blocks: LSTM cell/sequence, bidirectional stack, dense
layer, and inverted dropout.

The LSTM uses the standard formulation: a signed (tanh) block input, cell
update ``c = i*z + f*c_prev``, and output ``y = o*tanh(c)``.  Gate parameter
matrices are stored stacked along the first axis in block order [z|i|f|o];
the per-gate views are exposed as properties.

Forward passes route through :mod:`fluseq.kernels`, which supplies a fused
cell and a fused sequence unroll (compiled when available) together with
their hand-derived backwards; each call records a single node on the active
tape.
"""

from dataclasses import dataclass, field

import numpy as np

from fluseq import kernels
from fluseq.autodiff import Tensor, apply_multi_op, hadamard, matmul, tensor
from fluseq import autodiff
from fluseq.errors import ConfigError, DimensionError, DomainError

_GATES = ("z", "in", "for", "out")


@dataclass
class LstmParams:
    """Stacked LSTM weights: w (4h, input), r (4h, h), b (4h,)."""

    w: np.ndarray
    r: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        h4 = self.w.shape[0] if hasattr(self.w, "shape") else None
        if h4 is None or h4 % 4 != 0:
            raise DimensionError("stacked gate dimension must be a multiple of 4")
        h = h4 // 4
        r_shape = tuple(self.r.shape)
        b_shape = tuple(self.b.shape)
        if r_shape != (h4, h) or b_shape != (h4,):
            raise DimensionError(
                f"inconsistent LSTM params: w {tuple(self.w.shape)}, "
                f"r {r_shape}, b {b_shape}"
            )

    @property
    def hidden(self):
        return self.r.shape[1]

    @property
    def input_dim(self):
        return self.w.shape[1]

    @classmethod
    def from_gates(cls, *, input_weights, recurrent_weights, biases):
        """Build from per-gate mappings keyed 'z', 'in', 'for', 'out'.

        Validates each gate's shape and names the offender on mismatch.
        """
        h = np.asarray(recurrent_weights["z"]).shape[0]
        d = np.asarray(input_weights["z"]).shape[1]
        for g in _GATES:
            wg = np.asarray(input_weights[g])
            rg = np.asarray(recurrent_weights[g])
            bg = np.asarray(biases[g])
            if wg.shape != (h, d):
                raise DimensionError(f"gate '{g}': input weights {wg.shape} != {(h, d)}")
            if rg.shape != (h, h):
                raise DimensionError(
                    f"gate '{g}': recurrent weights {rg.shape} != {(h, h)}"
                )
            if bg.shape != (h,):
                raise DimensionError(f"gate '{g}': bias {bg.shape} != {(h,)}")
        return cls(
            w=np.concatenate([np.asarray(input_weights[g], dtype=float) for g in _GATES]),
            r=np.concatenate(
                [np.asarray(recurrent_weights[g], dtype=float) for g in _GATES]
            ),
            b=np.concatenate([np.asarray(biases[g], dtype=float) for g in _GATES]),
        )


def _gate_view(stacked, index):
    h = stacked.shape[0] // 4
    return stacked[index * h : (index + 1) * h]


for _i, _g in enumerate(_GATES):
    setattr(
        LstmParams,
        f"w_{_g}",
        property(lambda self, i=_i: _gate_view(self.w, i)),
    )
    setattr(
        LstmParams,
        f"r_{_g}",
        property(lambda self, i=_i: _gate_view(self.r, i)),
    )
    setattr(
        LstmParams,
        f"b_{_g}",
        property(lambda self, i=_i: _gate_view(self.b, i)),
    )


@dataclass
class LstmState:
    """Hidden output y and memory cell c (equal length)."""

    y: object
    c: object


@dataclass
class DenseParams:
    w: np.ndarray
    b: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ("tanh", "identity"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if hasattr(self.w, "shape") and self.w.shape[0] != self.b.shape[0]:
            raise DimensionError(
                f"dense: weight rows {self.w.shape} != bias length {self.b.shape}"
            )


def glorot(rng, rows, cols):
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def init_lstm(rng, input_dim, hidden, forget_bias=1.0):
    """Glorot-uniform gate matrices, zero biases, forget-gate bias offset."""
    w = np.concatenate([glorot(rng, hidden, input_dim) for _ in _GATES])
    r = np.concatenate([glorot(rng, hidden, hidden) for _ in _GATES])
    b = np.zeros(4 * hidden)
    b[2 * hidden : 3 * hidden] = forget_bias
    return LstmParams(w=w, r=r, b=b)


def init_dense(rng, out_dim, in_dim, activation="identity"):
    return DenseParams(w=glorot(rng, out_dim, in_dim), b=np.zeros(out_dim), activation=activation)


def zero_state(hidden):
    return LstmState(y=tensor(np.zeros(hidden)), c=tensor(np.zeros(hidden)))


def _check_cell_dims(x, prev, p):
    d, h = p.input_dim, p.hidden
    if x.data.shape != (d,):
        raise DimensionError(
            f"lstm cell: input shape {x.data.shape}, gates expect ({d},)"
        )
    if prev.y.data.shape != (h,):
        raise DimensionError(
            f"lstm cell: previous output shape {prev.y.data.shape}, "
            f"recurrent gates expect ({h},)"
        )
    if prev.c.data.shape != (h,):
        raise DimensionError(
            f"lstm cell: previous cell shape {prev.c.data.shape}, expected ({h},)"
        )


def lstm_cell_forward(x, prev, p):
    """One LSTM step over tensors; p is a tape-bound LstmParams."""
    _check_cell_dims(x, prev, p)
    k = kernels.backend()
    w, r, b = p.w.data, p.r.data, p.b.data
    y, c, cache = k.lstm_cell_forward(x.data, prev.y.data, prev.c.data, w, r, b)

    def bwd(gy, gc):
        return k.lstm_cell_backward(w, r, cache, gy, gc)

    y_t, c_t = apply_multi_op((x, prev.y, prev.c, p.w, p.r, p.b), (y, c), bwd)
    return LstmState(y=y_t, c=c_t)


def lstm_sequence_forward(x_seq, p, init=None):
    """Unroll the cell over the rows of x_seq (T, d).

    Returns (Y, C) tensors of shape (T, h); row t holds the state after
    consuming x_seq[t].  Identical, step for step, to iterating
    :func:`lstm_cell_forward`.
    """
    if x_seq.data.ndim != 2 or x_seq.data.shape[0] == 0:
        raise DomainError(f"lstm sequence: need a non-empty (T, d) input, got {x_seq.data.shape}")
    if x_seq.data.shape[1] != p.input_dim:
        raise DimensionError(
            f"lstm sequence: feature dim {x_seq.data.shape[1]}, gates expect {p.input_dim}"
        )
    if init is None:
        init = zero_state(p.hidden)
    k = kernels.backend()
    w, r, b = p.w.data, p.r.data, p.b.data
    Y, C, cache = k.lstm_seq_forward(x_seq.data, init.y.data, init.c.data, w, r, b)

    def bwd(gY, gC):
        return k.lstm_seq_backward(w, r, cache, gY, gC)

    return apply_multi_op((x_seq, init.y, init.c, p.w, p.r, p.b), (Y, C), bwd)


@dataclass
class BiLstmLayer:
    """Forward- and backward-direction parameters of one bidirectional layer."""

    fwd: LstmParams
    bwd: LstmParams


def bidirectional_stack_forward(
    x_seq, layers, dropout_rate=0.0, rng=None, training=False
):
    """Stack of bidirectional LSTM layers.

    Per layer the input runs left-to-right and (reversed) right-to-left and
    the two output sequences are concatenated per step, doubling the width.
    Dropout, when active, applies to the outputs feeding the next layer.

    Returns (H, last_fwd_y, last_bwd_y): the (T, 2h) top-layer outputs plus
    the final hidden outputs of each direction of the top layer.
    """
    if not layers:
        raise ConfigError("bidirectional stack needs at least one layer")
    width = x_seq.data.shape[1]
    for idx, layer in enumerate(layers):
        if layer.fwd.input_dim != width or layer.bwd.input_dim != width:
            raise ConfigError(
                f"layer {idx}: input width {width} does not match gate width "
                f"(fwd {layer.fwd.input_dim}, bwd {layer.bwd.input_dim})"
            )
        width = layer.fwd.hidden + layer.bwd.hidden

    T = x_seq.data.shape[0]
    cur = x_seq
    for idx, layer in enumerate(layers):
        y_fwd, _ = lstm_sequence_forward(cur, layer.fwd)
        y_bwd_rev, _ = lstm_sequence_forward(autodiff.flip_rows(cur), layer.bwd)
        out = autodiff.hconcat(y_fwd, autodiff.flip_rows(y_bwd_rev))
        if idx + 1 < len(layers):
            out = dropout_apply(out, dropout_rate, rng, training)
        cur = out
    last_fwd = autodiff.row(y_fwd, T - 1)
    last_bwd = autodiff.row(y_bwd_rev, T - 1)
    return cur, last_fwd, last_bwd


def dense_forward(x, p):
    """activation(W x + b)."""
    if p.w.data.shape[1] != x.data.shape[0]:
        raise DimensionError(
            f"dense: weight shape {p.w.data.shape} cannot consume input "
            f"{x.data.shape}"
        )
    out = matmul(p.w, x) + p.b
    if p.activation == "tanh":
        return autodiff.tanh(out)
    return out


def dropout_apply(x, rate, rng, training):
    """Inverted dropout: zero elements with probability rate and rescale
    survivors by 1/(1-rate) in training mode; identity at inference."""
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return hadamard(x, tensor(mask))
