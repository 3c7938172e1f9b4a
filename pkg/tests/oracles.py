"""Independent numerical oracles shared by the test suite.

These deliberately avoid the library's own forward/backward code paths:
matrix products are triple loops, reductions are element loops, and
gradients come from central finite differences of the scalar objective.
"""

import numpy as np


def loop_matmul(x, w, b):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.zeros((x.shape[0], w.shape[1]))
    for i in range(x.shape[0]):
        for o in range(w.shape[1]):
            acc = b[o]
            for k in range(x.shape[1]):
                acc += x[i, k] * w[k, o]
            out[i, o] = acc
    return out


def loop_mse(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    acc = 0.0
    for i in range(a.size):
        acc += (a[i] - b[i]) ** 2
    return acc / a.size


def loop_kl(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    total = 0.0
    for r in range(p.shape[0]):
        for i in range(p.shape[1]):
            if p[r, i] > 0:
                total += p[r, i] * (np.log(max(p[r, i], 1e-12)) - np.log(max(q[r, i], 1e-12)))
    return total / p.shape[0]


def loop_entropy_bits(p):
    p = np.asarray(p, dtype=np.float64)
    rows = np.zeros(p.shape[0])
    for r in range(p.shape[0]):
        acc = 0.0
        for i in range(p.shape[1]):
            if p[r, i] > 0:
                acc -= p[r, i] * np.log2(p[r, i])
        rows[r] = acc
    return rows


def finite_diff_grad(f, x0, h=1e-3):
    """Central finite differences of scalar f at x0, elementwise.

    Uses the actually-realized float32 step as the denominator so the probe
    is exact even though leaf tensors round their payloads to float32.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat = x0.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        xp32 = xp.astype(np.float32).astype(np.float64)
        xm32 = xm.astype(np.float32).astype(np.float64)
        denom = xp32[i] - xm32[i]
        gflat[i] = (f(xp32.reshape(x0.shape)) - f(xm32.reshape(x0.shape))) / denom
    return grad


def assert_grad_close(analytic, numeric, rtol=1e-4, gate=1e-6):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    assert a.shape == n.shape
    scale = np.maximum(np.abs(a), np.abs(n))
    mask = scale > gate
    if not mask.any():
        return
    rel = np.abs(a - n)[mask] / scale[mask]
    assert rel.max() < rtol, f"max relative gradient error {rel.max():.3e} >= {rtol}"
