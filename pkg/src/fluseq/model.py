"""Encoder-decoder forecasting models over weekly two-channel windows.

Three variants share this module:

* ``seq2seq_attention`` — bidirectional LSTM encoder, additive attention over
  the encoder annotations, unidirectional LSTM decoder.  Per decode step i
  the annotation scores are ``e_j = v . tanh(Wq s_{i-1} + Wk h_j + b)``, the
  weights are their softmax, and the context is the weight-averaged
  annotation matrix; the decoder cell consumes [previous value, context] and
  the readout maps [decoder output, context] to the next scaled value.
* ``seq2seq`` — same encoder/decoder without attention; the decoder consumes
  the previous value alone and the readout sees only the decoder output.
* ``simple_lstm`` — unidirectional LSTM run over the window, readout on the
  final hidden state, predictions fed back (non-target channels held at
  their last observed value).

The decoder's initial hidden state is a learned tanh bridge from the
concatenated final forward/backward encoder states; its initial cell state
is zero.  Only the first (target) channel is predicted: future values of the
other channels are unknown at forecast time.

Checkpoints are a versioned, self-describing binary format; see
:func:`checkpoint_save`.
"""

import dataclasses
import io
import json
from dataclasses import dataclass

import numpy as np

from fluseq import autodiff
from fluseq.autodiff import Tensor, concat, matmul, softmax, tensor, transpose
from fluseq.errors import (
    CheckpointCorruptError,
    CheckpointDimError,
    CheckpointVersionError,
    ConfigError,
    DomainError,
)
from fluseq.layers import (
    BiLstmLayer,
    DenseParams,
    LstmParams,
    LstmState,
    bidirectional_stack_forward,
    dense_forward,
    dropout_apply,
    init_dense,
    init_lstm,
    lstm_cell_forward,
    lstm_sequence_forward,
)
from fluseq import params as params_util

VARIANTS = ("simple_lstm", "seq2seq", "seq2seq_attention")


@dataclass
class Architecture:
    """Model and window dimensions."""

    feature_dim: int = 2
    encoder_layers: int = 3
    encoder_hidden: int = 32
    decoder_hidden: int = 64
    in_len: int = 10
    out_len: int = 4
    simple_hidden: int = 64

    def validate(self):
        for name in (
            "feature_dim",
            "encoder_layers",
            "encoder_hidden",
            "decoder_hidden",
            "in_len",
            "out_len",
            "simple_hidden",
        ):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"architecture field {name!r} must be a positive int")
        if self.decoder_hidden != 2 * self.encoder_hidden:
            raise ConfigError(
                "decoder_hidden must equal 2*encoder_hidden (the encoder output "
                f"width); got {self.decoder_hidden} vs 2*{self.encoder_hidden}. "
                "Relaxing this would require a projection layer."
            )
        return self


@dataclass
class AttentionParams:
    """Additive attention: score_j = v . tanh(w_query s + w_keys h_j + b)."""

    w_query: np.ndarray
    w_keys: np.ndarray
    b: np.ndarray
    v: np.ndarray


@dataclass
class ModelParams:
    """Encoder-decoder weights; ``attention`` is None for the plain variant."""

    encoder: list
    bridge: DenseParams
    decoder: LstmParams
    attention: object
    readout: DenseParams


@dataclass
class SimpleLstmParams:
    lstm: LstmParams
    readout: DenseParams


@dataclass
class Forecast:
    """Predicted scaled values plus, per step, the attention map over the
    input positions (None for variants without attention)."""

    values: np.ndarray
    attention_maps: object


def variant_of(params):
    if isinstance(params, SimpleLstmParams):
        return "simple_lstm"
    if isinstance(params, ModelParams):
        return "seq2seq" if params.attention is None else "seq2seq_attention"
    raise ConfigError(f"unknown parameter structure {type(params).__name__}")


def init_params(rng, arch, variant="seq2seq_attention"):
    """Fresh weights for a variant: Glorot matrices, zero biases, forget
    bias +1.  The attention score vector is initialised like a 1-row matrix
    so attention receives gradient from the first step."""
    arch.validate()
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == "simple_lstm":
        return SimpleLstmParams(
            lstm=init_lstm(rng, arch.feature_dim, arch.simple_hidden),
            readout=init_dense(rng, 1, arch.simple_hidden, "identity"),
        )
    enc_out = 2 * arch.encoder_hidden
    encoder = []
    width = arch.feature_dim
    for _ in range(arch.encoder_layers):
        encoder.append(
            BiLstmLayer(
                fwd=init_lstm(rng, width, arch.encoder_hidden),
                bwd=init_lstm(rng, width, arch.encoder_hidden),
            )
        )
        width = enc_out
    bridge = init_dense(rng, arch.decoder_hidden, enc_out, "tanh")
    with_attn = variant == "seq2seq_attention"
    decoder_in = 1 + (arch.decoder_hidden if with_attn else 0)
    decoder = init_lstm(rng, decoder_in, arch.decoder_hidden)
    attention = None
    if with_attn:
        d = arch.decoder_hidden
        attention = AttentionParams(
            w_query=_glorot(rng, d, d),
            w_keys=_glorot(rng, d, d),
            b=np.zeros(d),
            v=_glorot(rng, 1, d)[0].copy(),
        )
    readout_in = arch.decoder_hidden * (2 if with_attn else 1)
    readout = init_dense(rng, 1, readout_in, "identity")
    return ModelParams(
        encoder=encoder,
        bridge=bridge,
        decoder=decoder,
        attention=attention,
        readout=readout,
    )


def _glorot(rng, rows, cols):
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def arch_of(params, in_len=10, out_len=4):
    """Recover dims from a parameter structure (window lengths supplied)."""
    if isinstance(params, SimpleLstmParams):
        return Architecture(
            feature_dim=params.lstm.input_dim,
            simple_hidden=params.lstm.hidden,
            in_len=in_len,
            out_len=out_len,
        )
    enc_hidden = params.encoder[0].fwd.hidden
    return Architecture(
        feature_dim=params.encoder[0].fwd.input_dim,
        encoder_layers=len(params.encoder),
        encoder_hidden=enc_hidden,
        decoder_hidden=params.decoder.hidden,
        in_len=in_len,
        out_len=out_len,
    )


def bind(params, tape):
    return params_util.bind(params, tape)


def encode(x_seq, p, dropout_rate=0.0, rng=None, training=False):
    """Run the bidirectional encoder.

    Returns (H, s0): the (T, 2h) annotation matrix and the decoder's initial
    state (tanh bridge of the final forward/backward outputs; zero cell).
    """
    H, last_fwd, last_bwd = bidirectional_stack_forward(
        x_seq, p.encoder, dropout_rate=dropout_rate, rng=rng, training=training
    )
    s0_y = dense_forward(concat(last_fwd, last_bwd), p.bridge)
    s0_c = tensor(np.zeros(s0_y.data.shape[0]))
    return H, LstmState(y=s0_y, c=s0_c)


def attention_weights(s_prev, H, p):
    """Softmax-normalized additive scores of every annotation row against
    the previous decoder state."""
    attn = p.attention
    query = matmul(attn.w_query, s_prev.y) + attn.b
    scored = autodiff.tanh(autodiff.add_rowvec(matmul(H, transpose(attn.w_keys)), query))
    return softmax(matmul(scored, attn.v))


def context_vector(alpha, H):
    """Convex combination of annotation rows."""
    return matmul(alpha, H)


def decode_step(x_in, s_prev, H, p, rng=None, training=False, dropout_rate=0.0):
    """One decoder step.

    Returns (prediction, state, alpha).  Dropout applies only to the copy of
    the hidden output feeding the readout; the recurrent state and the next
    step's attention query stay clean.
    """
    alpha = None
    if p.attention is not None:
        alpha = attention_weights(s_prev, H, p)
        ctx = context_vector(alpha, H)
        cell_in = concat(x_in, ctx)
    else:
        cell_in = x_in
    state = lstm_cell_forward(cell_in, s_prev, p.decoder)
    y_out = dropout_apply(state.y, dropout_rate, rng, training)
    readout_in = concat(y_out, ctx) if p.attention is not None else y_out
    prediction = dense_forward(readout_in, p.readout)
    return prediction, state, alpha


def teacher_forcing_select(k, threshold, model_output, teacher_signal):
    """Pick the next decoder input: the model's own output when the draw k
    clears the threshold, the teacher signal otherwise."""
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"teacher forcing threshold must be in [0, 1], got {threshold}")
    return model_output if k >= threshold else teacher_signal


def decode_sequence(
    p, H, s0, first_input, horizon, next_input, rng=None, training=False, dropout_rate=0.0
):
    """Run the decoder ``horizon`` steps.

    ``next_input(step_idx, prediction)`` supplies the following step's input
    tensor — the feedback policy (autoregressive or teacher-forced) lives in
    the caller.  Returns (predictions, alphas) as lists of tensors.
    """
    if horizon < 1:
        raise DomainError(f"horizon must be >= 1, got {horizon}")
    preds = []
    alphas = []
    state = s0
    x_in = first_input
    for idx in range(horizon):
        prediction, state, alpha = decode_step(
            x_in, state, H, p, rng=rng, training=training, dropout_rate=dropout_rate
        )
        preds.append(prediction)
        alphas.append(alpha)
        if idx + 1 < horizon:
            x_in = next_input(idx, prediction)
    return preds, alphas


def simple_decode(
    p, x_seq, horizon, next_input, rng=None, training=False, dropout_rate=0.0
):
    """Simple-LSTM multi-step decode: consume the window, read out the next
    value, then keep stepping with fed-back values while the non-target
    channels stay at their last observed levels."""
    if horizon < 1:
        raise DomainError(f"horizon must be >= 1, got {horizon}")
    T = x_seq.data.shape[0]
    seq_y, seq_c = lstm_sequence_forward(x_seq, p.lstm)
    state = LstmState(y=autodiff.row(seq_y, T - 1), c=autodiff.row(seq_c, T - 1))
    held = tensor(x_seq.data[-1, 1:].copy())
    preds = []
    for idx in range(horizon):
        if idx > 0:
            feedback = next_input(idx - 1, preds[-1])
            state = lstm_cell_forward(concat(feedback, held), state, p.lstm)
        y_out = dropout_apply(state.y, dropout_rate, rng, training)
        preds.append(dense_forward(y_out, p.readout))
    return preds


def _check_window(window, feature_dim):
    window = np.asarray(window, dtype=float)
    if window.ndim != 2 or window.shape[0] < 1 or window.shape[1] != feature_dim:
        raise ConfigError(
            f"window shape {window.shape} does not match feature dim {feature_dim}"
        )
    return window


def forecast(window, params, horizon=4):
    """Autoregressive inference for the encoder-decoder variants.

    The first decoder input is the window's final target-channel value; each
    later input is the previous prediction.  Inputs and outputs are in
    scaled space.
    """
    if horizon < 1:
        raise DomainError(f"horizon must be >= 1, got {horizon}")
    p = bind(params, None)
    window = _check_window(window, p.encoder[0].fwd.input_dim)
    H, s0 = encode(tensor(window), p)
    first = tensor([window[-1, 0]])
    preds, alphas = decode_sequence(
        p, H, s0, first, horizon, next_input=lambda idx, pred: pred
    )
    values = np.array([pr.item() for pr in preds])
    maps = None
    if p.attention is not None:
        maps = np.stack([a.data for a in alphas])
    return Forecast(values=values, attention_maps=maps)


def simple_lstm_forecast(window, params, horizon=4):
    """Autoregressive inference for the simple-LSTM baseline."""
    p = bind(params, None)
    window = _check_window(window, p.lstm.input_dim)
    preds = simple_decode(
        p, tensor(window), horizon, next_input=lambda idx, pred: pred
    )
    return np.array([pr.item() for pr in preds])


# --- checkpoint format ----------------------------------------------------
#
# Layout (all little-endian):
#   line 1: b"fluseq-checkpoint v<N>\n"
#   line 2: one JSON object (sorted keys) + b"\n" holding
#           variant, arch, config snapshot, scaler, and the array manifest
#           [[dotted name, shape], ...] in traversal order
#   then:   the arrays' raw float64 bytes, concatenated in manifest order.
#
# Round-trips are bit-exact: save(load(save(p))) writes identical bytes.

CHECKPOINT_MAGIC = "fluseq-checkpoint v"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    params: object
    arch: Architecture
    variant: str
    scaler: object
    config: object


def checkpoint_save(path, params, arch, scaler=None, config=None):
    arch.validate()
    variant = variant_of(params)
    manifest = []
    blobs = []
    for name, arr in params_util.iter_named_arrays(params):
        manifest.append([name, list(arr.shape)])
        blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header = {
        "arch": dataclasses.asdict(arch),
        "arrays": manifest,
        "config": config,
        "scaler": None if scaler is None else scaler.to_dict(),
        "variant": variant,
    }
    with open(path, "wb") as fh:
        fh.write(f"{CHECKPOINT_MAGIC}{CHECKPOINT_VERSION}\n".encode())
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def checkpoint_load(path):
    from fluseq.data import ScalerParams

    with open(path, "rb") as fh:
        payload = fh.read()
    buf = io.BytesIO(payload)
    first = buf.readline().decode("utf-8", "replace").rstrip("\n")
    if not first.startswith(CHECKPOINT_MAGIC):
        raise CheckpointCorruptError(f"not a fluseq checkpoint: {path}")
    version = first[len(CHECKPOINT_MAGIC) :]
    if version != str(CHECKPOINT_VERSION):
        raise CheckpointVersionError(
            f"checkpoint version {version!r} not supported (expected "
            f"{CHECKPOINT_VERSION}): {path}"
        )
    try:
        header = json.loads(buf.readline().decode())
        arch = Architecture(**header["arch"])
        variant = header["variant"]
        manifest = header["arrays"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointCorruptError(f"unreadable checkpoint header: {exc}") from exc
    arch.validate()
    if variant not in VARIANTS:
        raise CheckpointCorruptError(f"unknown variant {variant!r} in header")

    params = init_params(_ZeroRng(), arch, variant)
    expected = list(params_util.iter_named_arrays(params))
    if [m[0] for m in manifest] != [name for name, _ in expected]:
        raise CheckpointDimError(
            "checkpoint arrays do not match the declared architecture"
        )
    body = payload[buf.tell() :]
    total = sum(int(np.prod(shape)) for _, shape in manifest)
    if len(body) != total * 8:
        raise CheckpointCorruptError(
            f"payload holds {len(body)} bytes, header declares {total * 8}"
        )
    offset = 0
    for (name, shape), (_, arr) in zip(manifest, expected):
        if list(arr.shape) != list(shape):
            raise CheckpointDimError(
                f"array {name!r}: checkpoint shape {shape}, architecture "
                f"expects {list(arr.shape)}"
            )
        count = int(np.prod(shape))
        values = np.frombuffer(body, dtype="<f8", count=count, offset=offset)
        arr[...] = values.reshape(arr.shape)
        offset += count * 8
    scaler = None
    if header.get("scaler") is not None:
        scaler = ScalerParams.from_dict(header["scaler"])
    return Checkpoint(
        params=params,
        arch=arch,
        variant=variant,
        scaler=scaler,
        config=header.get("config"),
    )


class _ZeroRng:
    """Stand-in generator producing zeros (checkpoint loading scaffold)."""

    def uniform(self, low, high, size=None):
        return np.zeros(size if size is not None else ())
