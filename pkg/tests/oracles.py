"""Independent oracles used by the tests.

These deliberately avoid the package's own code paths: finite differences
for gradients, direct textbook formulas for the metrics.
"""

import numpy as np


def fd_gradients(loss_fn, arrays, eps=1e-6):
    """Central finite differences of loss_fn w.r.t. each array (in place)."""
    grads = []
    for arr in arrays:
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = loss_fn()
            flat[i] = original - eps
            minus = loss_fn()
            flat[i] = original
            gflat[i] = (plus - minus) / (2 * eps)
        grads.append(grad)
    return grads


def max_rel_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def pearson_direct(a, b):
    """Pearson correlation straight from the definition."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    am, bm = a.mean(), b.mean()
    num = np.sum((a - am) * (b - bm))
    den = np.sqrt(np.sum((a - am) ** 2)) * np.sqrt(np.sum((b - bm) ** 2))
    return num / den


def rmse_direct(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.sqrt(np.sum((a - b) ** 2) / a.size))
