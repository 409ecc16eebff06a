"""Independent reference implementations used by the tests.

Nothing here imports the package's autodiff; each oracle is written from the
textbook definition with plain loops or numpy.
"""

import math

import numpy as np


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f at x (x is perturbed in place and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def naive_conv2d(x, w, b=None, stride=1, pad=(0, 0)):
    """Six nested loops over n, f, i, j, c, (u, v)."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ph, pw = pad
    xp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw))
    xp[:, :, ph : ph + h, pw : pw + wd] = x
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (wd + 2 * pw - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for a in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                s += xp[a, ch, i * stride + u, j * stride + v] * w[o, ch, u, v]
                    out[a, o, i, j] = s + (0.0 if b is None else b[o])
    return out


def softmax_row(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def kl_rows(p, q, eps=1e-12):
    """Mean over rows of sum_k p_k ln(max(p_k, eps) / max(q_k, eps))."""
    tot = 0.0
    for pr, qr in zip(p, q):
        tot += sum(pk * (math.log(max(pk, eps)) - math.log(max(qk, eps))) for pk, qk in zip(pr, qr))
    return tot / len(p)


def weighted_mean(arrays, weights):
    return np.average(np.stack(arrays), axis=0, weights=np.asarray(weights, dtype=np.float64))
