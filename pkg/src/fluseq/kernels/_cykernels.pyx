# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled LSTM kernels: fused cell and sequence forward/backward.

API and gate layout match ``npkernels`` (stacked [z|i|f|o] blocks); see that
module for the equations.  Values agree with the numpy backend to float64
rounding (summation order differs), and the sequence kernel iterates the
same cell routine, so sequence == iterated cell bit-exactly within this
backend.
"""

import numpy as np

from libc.math cimport exp, tanh

name = "cython"

_EMPTY_2D = np.zeros((1, 1))


cdef inline double _sig(double v) noexcept nogil:
    cdef double e
    if v >= 0.0:
        return 1.0 / (1.0 + exp(-v))
    e = exp(v)
    return e / (1.0 + e)


cdef inline double _affine_row(const double[:, ::1] W, const double[:, ::1] R,
                               const double[::1] b, const double[::1] x,
                               const double[::1] yp, Py_ssize_t row) noexcept nogil:
    cdef Py_ssize_t k
    cdef double acc = b[row]
    for k in range(x.shape[0]):
        acc += W[row, k] * x[k]
    for k in range(yp.shape[0]):
        acc += R[row, k] * yp[k]
    return acc


cdef void _cell_fwd(const double[::1] x, const double[::1] yp, const double[::1] cp,
                    const double[:, ::1] W, const double[:, ::1] R, const double[::1] b,
                    double[::1] z, double[::1] ig, double[::1] fg, double[::1] og,
                    double[::1] c, double[::1] tc, double[::1] y) noexcept nogil:
    cdef Py_ssize_t h = yp.shape[0]
    cdef Py_ssize_t j
    for j in range(h):
        z[j] = tanh(_affine_row(W, R, b, x, yp, j))
    for j in range(h):
        ig[j] = _sig(_affine_row(W, R, b, x, yp, h + j))
    for j in range(h):
        fg[j] = _sig(_affine_row(W, R, b, x, yp, 2 * h + j))
    for j in range(h):
        og[j] = _sig(_affine_row(W, R, b, x, yp, 3 * h + j))
    for j in range(h):
        c[j] = ig[j] * z[j] + fg[j] * cp[j]
        tc[j] = tanh(c[j])
        y[j] = og[j] * tc[j]


cdef void _cell_bwd(const double[::1] x, const double[::1] yp, const double[::1] cp,
                    const double[::1] z, const double[::1] ig, const double[::1] fg,
                    const double[::1] og, const double[::1] tc,
                    const double[:, ::1] W, const double[:, ::1] R,
                    const double[::1] dy, const double[::1] dc,
                    double[::1] dx, double[::1] dyp, double[::1] dcp,
                    double[:, ::1] dW, double[:, ::1] dR, double[::1] db,
                    double[::1] dpre) noexcept nogil:
    cdef Py_ssize_t h = yp.shape[0]
    cdef Py_ssize_t d = x.shape[0]
    cdef Py_ssize_t j, k
    cdef double dcell, dzj, dij, dfj, doj, acc
    for j in range(h):
        doj = dy[j] * tc[j]
        dcell = dc[j] + dy[j] * og[j] * (1.0 - tc[j] * tc[j])
        dzj = dcell * ig[j]
        dij = dcell * z[j]
        dfj = dcell * cp[j]
        dcp[j] = dcell * fg[j]
        dpre[j] = dzj * (1.0 - z[j] * z[j])
        dpre[h + j] = dij * ig[j] * (1.0 - ig[j])
        dpre[2 * h + j] = dfj * fg[j] * (1.0 - fg[j])
        dpre[3 * h + j] = doj * og[j] * (1.0 - og[j])
    for j in range(4 * h):
        db[j] += dpre[j]
        for k in range(d):
            dW[j, k] += dpre[j] * x[k]
        for k in range(h):
            dR[j, k] += dpre[j] * yp[k]
    for k in range(d):
        acc = 0.0
        for j in range(4 * h):
            acc += W[j, k] * dpre[j]
        dx[k] = acc
    for k in range(h):
        acc = 0.0
        for j in range(4 * h):
            acc += R[j, k] * dpre[j]
        dyp[k] = acc


def lstm_cell_forward(x, y_prev, c_prev, W, R, b):
    x = np.ascontiguousarray(x)
    y_prev = np.ascontiguousarray(y_prev)
    c_prev = np.ascontiguousarray(c_prev)
    cdef Py_ssize_t h = y_prev.shape[0]
    z = np.empty(h)
    ig = np.empty(h)
    fg = np.empty(h)
    og = np.empty(h)
    c = np.empty(h)
    tc = np.empty(h)
    y = np.empty(h)
    _cell_fwd(x, y_prev, c_prev, W, R, b, z, ig, fg, og, c, tc, y)
    return y, c, (x, y_prev, c_prev, z, ig, fg, og, tc)


def lstm_cell_backward(W, R, cache, dy, dc):
    x, y_prev, c_prev, z, ig, fg, og, tc = cache
    cdef Py_ssize_t h = y_prev.shape[0]
    cdef Py_ssize_t d = x.shape[0]
    if dy is None:
        dy = np.zeros(h)
    if dc is None:
        dc = np.zeros(h)
    dx = np.empty(d)
    dyp = np.empty(h)
    dcp = np.empty(h)
    dW = np.zeros((4 * h, d))
    dR = np.zeros((4 * h, h))
    db = np.zeros(4 * h)
    dpre = np.empty(4 * h)
    _cell_bwd(x, y_prev, c_prev, z, ig, fg, og, tc, W, R,
              np.ascontiguousarray(dy), np.ascontiguousarray(dc),
              dx, dyp, dcp, dW, dR, db, dpre)
    return dx, dyp, dcp, dW, dR, db


def lstm_seq_forward(X, y0, c0, W, R, b):
    X = np.ascontiguousarray(X)
    y0 = np.ascontiguousarray(y0)
    c0 = np.ascontiguousarray(c0)
    cdef Py_ssize_t T = X.shape[0]
    cdef Py_ssize_t h = y0.shape[0]
    Y = np.empty((T, h))
    C = np.empty((T, h))
    Z = np.empty((T, h))
    I = np.empty((T, h))
    F = np.empty((T, h))
    O = np.empty((T, h))
    TC = np.empty((T, h))
    cdef double[:, ::1] Xv = X, Yv = Y, Cv = C, Zv = Z, Iv = I, Fv = F, Ov = O, TCv = TC
    cdef double[:, ::1] Wv = W, Rv = R
    cdef double[::1] bv = b, y0v = y0, c0v = c0
    cdef const double[::1] yp, cp
    cdef Py_ssize_t t
    with nogil:
        yp = y0v
        cp = c0v
        for t in range(T):
            _cell_fwd(Xv[t], yp, cp, Wv, Rv, bv,
                      Zv[t], Iv[t], Fv[t], Ov[t], Cv[t], TCv[t], Yv[t])
            yp = Yv[t]
            cp = Cv[t]
    return Y, C, (X, y0, c0, Z, I, F, O, TC, Y, C)


def lstm_seq_backward(W, R, cache, dY, dC):
    X, y0, c0, Z, I, F, O, TC, Y, C = cache
    cdef bint has_dy = dY is not None
    cdef bint has_dc = dC is not None
    dY = np.ascontiguousarray(dY) if has_dy else _EMPTY_2D
    dC = np.ascontiguousarray(dC) if has_dc else _EMPTY_2D
    cdef Py_ssize_t T = X.shape[0]
    cdef Py_ssize_t h = y0.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    dX = np.empty((T, d))
    dW = np.zeros((4 * h, d))
    dR = np.zeros((4 * h, h))
    db = np.zeros(4 * h)
    dy = np.zeros(h)
    dc = np.zeros(h)
    dyn = np.empty(h)
    dcn = np.empty(h)
    dpre = np.empty(4 * h)
    cdef double[:, ::1] Xv = X, Yv = Y, Cv = C, Zv = Z, Iv = I, Fv = F, Ov = O, TCv = TC
    cdef double[:, ::1] dXv = dX, dYv = dY, dCv = dC, dWv = dW, dRv = dR
    cdef double[:, ::1] Wv = W, Rv = R
    cdef double[::1] dbv = db, y0v = y0, c0v = c0
    cdef double[::1] dyv = dy, dcv = dc, dynv = dyn, dcnv = dcn, dprev = dpre
    cdef double[::1] tmp
    cdef const double[::1] yp, cp
    cdef Py_ssize_t t, j
    with nogil:
        for t in range(T - 1, -1, -1):
            if t > 0:
                yp = Yv[t - 1]
                cp = Cv[t - 1]
            else:
                yp = y0v
                cp = c0v
            if has_dy:
                for j in range(h):
                    dyv[j] += dYv[t, j]
            if has_dc:
                for j in range(h):
                    dcv[j] += dCv[t, j]
            _cell_bwd(Xv[t], yp, cp, Zv[t], Iv[t], Fv[t], Ov[t], TCv[t],
                      Wv, Rv, dyv, dcv, dXv[t], dynv, dcnv,
                      dWv, dRv, dbv, dprev)
            tmp = dyv
            dyv = dynv
            dynv = tmp
            tmp = dcv
            dcv = dcnv
            dcnv = tmp
    # after swapping, dyv/dcv hold the gradients flowing into the initial state
    dy0 = np.asarray(dyv).copy()
    dc0 = np.asarray(dcv).copy()
    return dX, dy0, dc0, dW, dR, db
