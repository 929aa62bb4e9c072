"""Training loop, Adam optimizer, and the finite-difference gradient check.

One uniform draw is taken per decoder step of every window (the feedback
selection is per unit output, not per window), so the draw count over an
epoch is windows x horizon for the encoder-decoder variants.  The loss is
the mean squared error of the scaled predictions; validation loss is the
autoregressive (no teacher, no dropout) forecast error on the
chronologically last slice of the training windows.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from fluseq import model as model_mod
from fluseq import params as params_util
from fluseq.autodiff import (
    Tape,
    Tensor,
    add,
    concat,
    hadamard,
    scale,
    sub,
    sum_all,
    tensor,
)
from fluseq.errors import (
    ConfigError,
    ContractError,
    DimensionError,
    DomainError,
    TrainingDivergedError,
)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip_norm: float = 5.0
    teacher_threshold: float = 0.8
    dropout_rate: float = 0.2
    seed: int = 0
    early_stop_patience: int = 20
    validation_fraction: float = 0.1

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or self.early_stop_patience < 0:
            raise ConfigError("epochs/batch_size must be >= 1, patience >= 0")
        if self.learning_rate < 0 or self.grad_clip_norm <= 0 or self.adam_eps <= 0:
            raise ConfigError("learning_rate, grad_clip_norm, adam_eps must be positive")
        for name in ("teacher_threshold", "dropout_rate", "validation_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {value}")
        if self.dropout_rate >= 1.0 or self.validation_fraction >= 1.0:
            raise ConfigError("dropout_rate and validation_fraction must be < 1")
        return self


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0
    epoch_seconds: list = field(default_factory=list)

    def write_csv(self, fh):
        # wall-clock deliberately excluded so histories are reproducible
        fh.write("epoch,train_loss,val_loss\r\n")
        for i, (tr, va) in enumerate(zip(self.train_loss, self.val_loss), start=1):
            va_text = "" if va is None else repr(va)
            fh.write(f"{i},{tr!r},{va_text}\r\n")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            self.write_csv(fh)


def mse_loss(pred, target):
    """Mean squared error between a predicted tensor and target values."""
    target_t = target if isinstance(target, Tensor) else tensor(target)
    if pred.data.shape != target_t.data.shape:
        raise DimensionError(
            f"mse: prediction shape {pred.data.shape} != target shape "
            f"{target_t.data.shape}"
        )
    diff = sub(pred, target_t)
    return scale(sum_all(hadamard(diff, diff)), 1.0 / pred.data.size)


class Adam:
    """Adam with bias correction; epsilon is added outside the square root."""

    def __init__(self, params, config):
        self.lr = config.learning_rate
        self.beta1, self.beta2 = config.adam_betas
        self.eps = config.adam_eps
        self.t = 0
        self.m = {}
        self.v = {}
        for name, arr in params_util.iter_named_arrays(params):
            self.m[name] = np.zeros_like(arr)
            self.v[name] = np.zeros_like(arr)

    def step(self, params, grads):
        self.t += 1
        correct1 = 1.0 - self.beta1**self.t
        correct2 = 1.0 - self.beta2**self.t
        for name, arr in params_util.iter_named_arrays(params):
            g = grads[name]
            if g.shape != arr.shape:
                raise DimensionError(
                    f"adam: gradient shape {g.shape} != param shape {arr.shape} "
                    f"for {name!r}"
                )
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            arr -= self.lr * (m / correct1) / (np.sqrt(v / correct2) + self.eps)


def clip_gradients(grads, max_norm):
    """Scale gradients in place so the global L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def traced_loss(
    bound,
    window,
    target,
    *,
    teacher_threshold=0.8,
    rng_teacher=None,
    feedback="draw",
    training=False,
    dropout_rate=0.0,
    rng_dropout=None,
):
    """Forward pass of one window on the bound parameters; returns the
    scalar loss tensor and the prediction tensors.

    feedback: 'draw' applies the stochastic teacher-forcing rule per decoder
    step, 'teacher' always feeds the true previous value, 'model' always
    feeds the model's own prediction.
    """
    target = np.asarray(target, dtype=float)
    horizon = target.shape[0]
    window_t = tensor(window)

    def select(idx, prediction):
        teacher = tensor([target[idx]])
        if feedback == "teacher":
            return teacher
        if feedback == "model":
            return prediction
        k = float(rng_teacher.uniform())
        return model_mod.teacher_forcing_select(
            k, teacher_threshold, prediction, teacher
        )

    if isinstance(bound, model_mod.SimpleLstmParams):
        preds = model_mod.simple_decode(
            bound,
            window_t,
            horizon,
            next_input=select,
            rng=rng_dropout,
            training=training,
            dropout_rate=dropout_rate,
        )
        if feedback == "draw":
            rng_teacher.uniform()  # step-0 draw parity with the seq2seq variants
    else:
        H, s0 = model_mod.encode(
            window_t, bound, dropout_rate=dropout_rate, rng=rng_dropout, training=training
        )
        first = tensor([float(window[-1, 0])])
        if feedback == "draw":
            # the first decoder input is the observed last value, so teacher
            # and model coincide; the draw is still taken (one per step)
            k = float(rng_teacher.uniform())
            first = model_mod.teacher_forcing_select(
                k, teacher_threshold, first, first
            )
        preds, _ = model_mod.decode_sequence(
            bound,
            H,
            s0,
            first,
            horizon,
            next_input=select,
            rng=rng_dropout,
            training=training,
            dropout_rate=dropout_rate,
        )
    pred_vec = preds[0]
    for p in preds[1:]:
        pred_vec = concat(pred_vec, p)
    return mse_loss(pred_vec, target), preds


def _validation_loss(params, val_samples):
    if not val_samples:
        return None
    variant = model_mod.variant_of(params)
    total = 0.0
    for sample in val_samples:
        if variant == "simple_lstm":
            values = model_mod.simple_lstm_forecast(
                sample.input, params, horizon=len(sample.target)
            )
        else:
            values = model_mod.forecast(
                sample.input, params, horizon=len(sample.target)
            ).values
        diff = values - np.asarray(sample.target, dtype=float)
        total += float(np.mean(diff * diff))
    return total / len(val_samples)


def train(params, samples, config):
    """Teacher-forced mini-batch training; returns (best params, history).

    Windows must arrive in chronological order: the last
    ``validation_fraction`` of them is held out for early stopping.
    """
    config.validate()
    samples = list(samples)
    if not samples:
        raise DomainError("training requires at least one window sample")
    n_val = int(config.validation_fraction * len(samples))
    if n_val > 0:
        train_set, val_set = samples[:-n_val], samples[-n_val:]
    else:
        train_set, val_set = samples, []
    if not train_set:
        raise DomainError("validation fraction leaves no training windows")

    rng_shuffle = np.random.default_rng([config.seed, 1])
    rng_teacher = np.random.default_rng([config.seed, 2])
    rng_dropout = np.random.default_rng([config.seed, 3])
    optimizer = Adam(params, config)
    history = TrainHistory()
    best_metric = np.inf
    best_params = params_util.clone(params)
    best_epoch = 0

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = rng_shuffle.permutation(len(train_set))
        epoch_total = 0.0
        for batch_idx in range(0, len(order), config.batch_size):
            batch = order[batch_idx : batch_idx + config.batch_size]
            tape = Tape()
            bound = params_util.bind(params, tape)
            batch_loss = None
            for sample_idx in batch:
                sample = train_set[sample_idx]
                loss, _ = traced_loss(
                    bound,
                    sample.input,
                    sample.target,
                    teacher_threshold=config.teacher_threshold,
                    rng_teacher=rng_teacher,
                    feedback="draw",
                    training=True,
                    dropout_rate=config.dropout_rate,
                    rng_dropout=rng_dropout,
                )
                batch_loss = loss if batch_loss is None else add(batch_loss, loss)
            batch_loss = scale(batch_loss, 1.0 / len(batch))
            loss_value = batch_loss.item()
            if not np.isfinite(loss_value):
                raise TrainingDivergedError(epoch, batch_idx // config.batch_size, loss_value)
            grad_map = tape.backward(batch_loss)
            grads = {
                name: grad_map[t] for name, t in params_util.iter_named_arrays(bound)
            }
            clip_gradients(grads, config.grad_clip_norm)
            optimizer.step(params, grads)
            epoch_total += loss_value * len(batch)
        train_loss = epoch_total / len(train_set)
        val_loss = _validation_loss(params, val_set)
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.epoch_seconds.append(time.perf_counter() - started)
        metric = train_loss if val_loss is None else val_loss
        if metric < best_metric:
            best_metric = metric
            best_params = params_util.clone(params)
            best_epoch = epoch
        elif epoch - best_epoch > config.early_stop_patience > 0:
            break
    history.best_epoch = best_epoch
    return best_params, history


def gradient_check(params, sample, epsilon=1e-5, min_coords=200, rng=None):
    """Compare tape gradients against central finite differences.

    Runs the deterministic full-teacher loss (dropout off), perturbs a
    random subsample of coordinates covering every parameter tensor, and
    returns (max relative error, report rows).  Relative error is
    |g_tape - g_fd| / max(|g_tape|, |g_fd|, 1e-8).
    """
    rng = rng or np.random.default_rng(0)
    window = np.asarray(sample.input, dtype=float)
    target = np.asarray(sample.target, dtype=float)

    def loss_value():
        bound = params_util.bind(params, None)
        loss, _ = traced_loss(bound, window, target, feedback="teacher")
        return loss.item()

    if loss_value() != loss_value():
        raise ContractError("loss is not deterministic; gradient check impossible")

    tape = Tape()
    bound = params_util.bind(params, tape)
    loss, _ = traced_loss(bound, window, target, feedback="teacher")
    grad_map = tape.backward(loss)
    named = list(params_util.iter_named_arrays(params))
    bound_named = dict(params_util.iter_named_arrays(bound))
    total_size = sum(arr.size for _, arr in named)

    rows = []
    for name, arr in named:
        tape_grad = grad_map[bound_named[name]]
        quota = max(1, int(round(min_coords * arr.size / total_size)))
        quota = min(quota, arr.size)
        picks = rng.choice(arr.size, size=quota, replace=False)
        flat = arr.reshape(-1)
        for flat_idx in picks:
            original = flat[flat_idx]
            flat[flat_idx] = original + epsilon
            loss_plus = loss_value()
            flat[flat_idx] = original - epsilon
            loss_minus = loss_value()
            flat[flat_idx] = original
            fd = (loss_plus - loss_minus) / (2.0 * epsilon)
            gt = float(tape_grad.reshape(-1)[flat_idx])
            rel = abs(gt - fd) / max(abs(gt), abs(fd), 1e-8)
            rows.append((name, int(flat_idx), gt, fd, rel))
    deficit = min_coords - len(rows)
    if deficit > 0:
        # top off from the largest tensor
        name, arr = max(named, key=lambda item: item[1].size)
        tape_grad = grad_map[bound_named[name]]
        flat = arr.reshape(-1)
        picks = rng.choice(arr.size, size=min(deficit, arr.size), replace=False)
        for flat_idx in picks:
            original = flat[flat_idx]
            flat[flat_idx] = original + epsilon
            loss_plus = loss_value()
            flat[flat_idx] = original - epsilon
            loss_minus = loss_value()
            flat[flat_idx] = original
            fd = (loss_plus - loss_minus) / (2.0 * epsilon)
            gt = float(tape_grad.reshape(-1)[flat_idx])
            rel = abs(gt - fd) / max(abs(gt), abs(fd), 1e-8)
            rows.append((name, int(flat_idx), gt, fd, rel))
    rows.sort(key=lambda r: r[4], reverse=True)
    return (rows[0][4] if rows else 0.0), rows
