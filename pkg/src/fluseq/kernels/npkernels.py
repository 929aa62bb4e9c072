"""Numpy implementation of the LSTM hot kernels.

Same API as the compiled backend (``_cykernels``): a fused LSTM cell and a
fused full-sequence unroll, each with a hand-derived backward.  Gate weights
arrive stacked along the first axis in the fixed block order

    [z | i | f | o]   (block input, input gate, forget gate, output gate)

so ``W`` is ``(4h, d)``, ``R`` is ``(4h, h)`` and ``b`` is ``(4h,)``.

The cell computes

    z = tanh(W_z x + R_z y_prev + b_z)
    i = sigmoid(W_i x + R_i y_prev + b_i)
    f = sigmoid(W_f x + R_f y_prev + b_f)
    o = sigmoid(W_o x + R_o y_prev + b_o)
    c = i * z + f * c_prev
    y = o * tanh(c)

The sequence kernel is defined as the step-by-step iteration of the cell
kernel, so both produce bit-identical values.
"""

import numpy as np

name = "numpy"


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def _dtanh(t):
    # derivative of tanh expressed through its output t = tanh(u)
    return 1.0 - t * t


def lstm_cell_forward(x, y_prev, c_prev, W, R, b):
    """One LSTM step. Returns (y, c, cache) with cache feeding the backward."""
    h = y_prev.shape[0]
    pre = W @ x + R @ y_prev + b
    z = np.tanh(pre[:h])
    i = _sigmoid(pre[h : 2 * h])
    f = _sigmoid(pre[2 * h : 3 * h])
    o = _sigmoid(pre[3 * h :])
    c = i * z + f * c_prev
    tc = np.tanh(c)
    y = o * tc
    return y, c, (x, y_prev, c_prev, z, i, f, o, tc)


def lstm_cell_backward(W, R, cache, dy, dc):
    """Backward of one cell step.

    dy, dc are the incoming gradients on y and c; either may be None when
    that output received no gradient.  Returns
    (dx, dy_prev, dc_prev, dW, dR, db).
    """
    x, y_prev, c_prev, z, i, f, o, tc = cache
    if dy is None:
        dy = np.zeros_like(y_prev)
    do = dy * tc
    dcell = dy * o * _dtanh(tc)
    if dc is not None:
        dcell = dc + dcell
    dz = dcell * i
    di = dcell * z
    df = dcell * c_prev
    dc_prev = dcell * f
    dpre = np.concatenate(
        [
            dz * _dtanh(z),
            di * i * (1.0 - i),
            df * f * (1.0 - f),
            do * o * (1.0 - o),
        ]
    )
    dW = np.outer(dpre, x)
    dR = np.outer(dpre, y_prev)
    dx = W.T @ dpre
    dy_prev = R.T @ dpre
    return dx, dy_prev, dc_prev, dW, dR, dpre


def lstm_seq_forward(X, y0, c0, W, R, b):
    """Unroll the cell over the rows of X (one row per time step).

    Returns (Y, C, cache): Y[t] and C[t] are the hidden output and cell
    state after consuming X[t].
    """
    T = X.shape[0]
    h = y0.shape[0]
    Y = np.empty((T, h))
    C = np.empty((T, h))
    Z = np.empty((T, h))
    I = np.empty((T, h))
    F = np.empty((T, h))
    O = np.empty((T, h))
    TC = np.empty((T, h))
    y, c = y0, c0
    for t in range(T):
        y, c, (_, _, _, z, i, f, o, tc) = lstm_cell_forward(X[t], y, c, W, R, b)
        Y[t] = y
        C[t] = c
        Z[t], I[t], F[t], O[t], TC[t] = z, i, f, o, tc
    return Y, C, (X, y0, c0, Z, I, F, O, TC, Y, C)


def lstm_seq_backward(W, R, cache, dY, dC):
    """Backward through the unrolled sequence.

    dY, dC are (T, h) gradients on every step's outputs; either may be None
    when that output received no gradient.  Parameter gradients are summed
    over steps.  Returns (dX, dy0, dc0, dW, dR, db).
    """
    X, y0, c0, Z, I, F, O, TC, Y, C = cache
    T = X.shape[0]
    dX = np.empty_like(X)
    dW = np.zeros_like(W)
    dR = np.zeros_like(R)
    db = np.zeros(W.shape[0])
    dy = np.zeros(y0.shape[0])
    dc = np.zeros(y0.shape[0])
    for t in range(T - 1, -1, -1):
        y_prev = Y[t - 1] if t > 0 else y0
        c_prev = C[t - 1] if t > 0 else c0
        step = (X[t], y_prev, c_prev, Z[t], I[t], F[t], O[t], TC[t])
        if dY is not None:
            dy = dy + dY[t]
        if dC is not None:
            dc = dc + dC[t]
        dx, dy, dc, dW_t, dR_t, db_t = lstm_cell_backward(W, R, step, dy, dc)
        dX[t] = dx
        dW += dW_t
        dR += dR_t
        db += db_t
    return dX, dy, dc, dW, dR, db
