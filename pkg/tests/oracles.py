"""Naive reference implementations used as test oracles."""

import itertools

import mpmath
import numpy as np

mpmath.mp.dps = 40


def sigmoid(x: float) -> float:
    return float(1 / (1 + mpmath.exp(-mpmath.mpf(x))))


def softmax(v) -> list[float]:
    e = [mpmath.exp(mpmath.mpf(x)) for x in v]
    s = sum(e)
    return [float(x / s) for x in e]


def gap(x: np.ndarray) -> np.ndarray:
    N, T, H, W, C = x.shape
    out = np.zeros((N, T, 1, 1, C))
    for n, t, c in itertools.product(range(N), range(T), range(C)):
        total = 0.0
        for h, w in itertools.product(range(H), range(W)):
            total += x[n, t, h, w, c]
        out[n, t, 0, 0, c] = total / (H * W)
    return out


def channel_scale(x: np.ndarray, a: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    for idx in itertools.product(*map(range, x.shape)):
        n, t, _, _, c = idx
        out[idx] = a[n, t, 0, 0, c] * x[idx]
    return out


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    rows, cin = x.shape
    out = np.zeros((rows, w.shape[1]))
    for r in range(rows):
        for o in range(w.shape[1]):
            acc = b[o]
            for i in range(cin):
                acc += x[r, i] * w[i, o]
            out[r, o] = acc
    return out


def conv3d(x, w, b, stride=1, dilation=1):
    """Same padding: spatial total pad max((out-1)*s + k - size, 0), front half rounded down."""
    N, T, H, W, C = x.shape
    kt, kh, kw, _, cout = w.shape
    Ho, Wo = -(-H // stride), -(-W // stride)
    ph = max((Ho - 1) * stride + kh - H, 0) // 2
    pw = max((Wo - 1) * stride + kw - W, 0) // 2
    pt = dilation * (kt - 1) // 2
    y = np.zeros((N, T, Ho, Wo, cout))
    if b is not None:
        y += b
    for n, t, i, j in itertools.product(range(N), range(T), range(Ho), range(Wo)):
        for a, c, d in itertools.product(range(kt), range(kh), range(kw)):
            tt, hh, ww = t + a * dilation - pt, i * stride + c - ph, j * stride + d - pw
            if 0 <= tt < T and 0 <= hh < H and 0 <= ww < W:
                y[n, t, i, j] += x[n, tt, hh, ww] @ w[a, c, d]
    return y
