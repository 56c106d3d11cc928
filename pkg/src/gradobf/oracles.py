"""Slow reference implementations used to cross-check the fast transforms.

These are written straight from the definitions with explicit loops and share
no code with :mod:`gradobf.preprocess`.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate

__all__ = ["naive_dct2", "naive_idct2", "naive_fd_block", "brute_force_rdg", "ScriptedRng",
           "uniform_sum_cdf", "sigmoid_moments_under_uniform_noise"]


def _alpha(k: int, n: int) -> float:
    return math.sqrt(1.0 / n) if k == 0 else math.sqrt(2.0 / n)


def naive_dct2(block) -> np.ndarray:
    """Orthonormal 2-D type-II DCT by the quadruple sum, O(N^4)."""
    block = np.asarray(block, dtype=np.float64)
    n = block.shape[0]
    out = np.zeros((n, n))
    for u in range(n):
        for v in range(n):
            acc = 0.0
            for i in range(n):
                for j in range(n):
                    acc += (block[i, j]
                            * math.cos(math.pi * (2 * i + 1) * u / (2 * n))
                            * math.cos(math.pi * (2 * j + 1) * v / (2 * n)))
            out[u, v] = _alpha(u, n) * _alpha(v, n) * acc
    return out


def naive_idct2(coef) -> np.ndarray:
    coef = np.asarray(coef, dtype=np.float64)
    n = coef.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for u in range(n):
                for v in range(n):
                    acc += (_alpha(u, n) * _alpha(v, n) * coef[u, v]
                            * math.cos(math.pi * (2 * i + 1) * u / (2 * n))
                            * math.cos(math.pi * (2 * j + 1) * v / (2 * n)))
            out[i, j] = acc
    return out


def naive_fd_block(block, table) -> np.ndarray:
    """Quantise one 8x8 single-channel block of unit intensities."""
    shifted = np.asarray(block, dtype=np.float64) * 255.0 - 128.0
    q = np.asarray(table, dtype=np.float64)
    coef = naive_dct2(shifted)
    coef = np.round(coef / q) * q
    back = naive_idct2(coef)
    return np.clip((back + 128.0) / 255.0, 0.0, 1.0)


def _source_index(dest: int, d: int, deltas) -> int:
    """Source pixel for one destination coordinate, or -1 for padding."""
    cell, t = divmod(dest, d)
    lo = 0.0
    for k in range(cell):
        lo = lo + d * (1.0 + float(deltas[k]))
    hi = lo + d * (1.0 + float(deltas[cell]))
    src = lo + (t + 0.5) * (hi - lo) / d - 0.5
    return int(math.floor(src + 0.5))


def brute_force_rdg(img, d: int, dx, dy, flip_rows: bool = False, flip_cols: bool = False) -> np.ndarray:
    """Per-pixel RDG remap anchored at the chosen corner.

    Flipping is done by mirroring coordinates rather than arrays.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w, c = img.shape
    rows_cells, cols_cells = h // d, w // d
    out = np.zeros_like(img)
    for i in range(h):
        ii = h - 1 - i if flip_rows else i
        if ii >= rows_cells * d:
            continue
        si = _source_index(ii, d, dy)
        if not 0 <= si < h:
            continue
        si = h - 1 - si if flip_rows else si
        for j in range(w):
            jj = w - 1 - j if flip_cols else j
            if jj >= cols_cells * d:
                continue
            sj = _source_index(jj, d, dx)
            if not 0 <= sj < w:
                continue
            sj = w - 1 - sj if flip_cols else sj
            for ch in range(c):
                out[i, j, ch] = img[si, sj, ch]
    return out


class ScriptedRng:
    """Stand-in random stream that replays fixed values.

    ``integers`` pops from ``ints``; ``uniform`` returns the next block of
    ``floats`` reshaped to the requested size (values are used as-is).
    """

    def __init__(self, ints=(), floats=()):
        self.ints = list(ints)
        self.floats = list(np.asarray(floats, dtype=np.float64).ravel())

    def integers(self, low, high, size=None):
        value = self.ints.pop(0)
        if not low <= value < high:
            raise ValueError("scripted integer out of range")
        return value

    def uniform(self, low, high, size=None):
        count = int(np.prod(size)) if size is not None else 1
        vals, self.floats = self.floats[:count], self.floats[count:]
        if len(vals) < count:
            raise ValueError("scripted stream exhausted")
        return np.array(vals).reshape(size) if size is not None else vals[0]


def uniform_sum_cdf(s: float, weights, eps: float) -> float:
    """CDF at ``s`` of ``sum_i w_i u_i`` with independent ``u_i ~ U(-eps, eps)``.

    Inverts the characteristic function ``prod_i sin(eps w_i t) / (eps w_i t)``
    by the Gil-Pelaez formula.  The sum is symmetric, so the characteristic
    function is real and the formula reduces to a sine integral.
    """
    w = np.asarray(weights, dtype=np.float64).ravel()
    w = w[w != 0]
    if w.size == 0:
        return 1.0 if s >= 0 else 0.0
    sigma = eps * math.sqrt(float(np.sum(w * w)) / 3.0)
    upper = 40.0 / sigma

    def phi(t):
        return float(np.prod(np.sinc(eps * w * t / math.pi)))

    val, _ = integrate.quad(lambda t: math.sin(t * s) * phi(t) / t if t > 0 else s * phi(0.0),
                            0.0, upper, limit=400)
    return 0.5 + val / math.pi


def sigmoid_moments_under_uniform_noise(weights, offset: float, eps: float):
    """``E[q]`` and ``E[q^2]`` for ``q = sigmoid(offset + sum_i w_i u_i)``.

    Uses ``E[h(S)] = h(lo) + integral_lo^hi h'(s) (1 - F(s)) ds`` with the
    CDF from :func:`uniform_sum_cdf`, where ``[lo, hi]`` is the support of ``S``.
    """
    w = np.asarray(weights, dtype=np.float64).ravel()
    half = eps * float(np.sum(np.abs(w)))

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    def tail(v):
        return 1.0 - uniform_sum_cdf(v - offset, w, eps)

    def d1(v):
        q = sig(v)
        return q * (1 - q)

    lo, hi = offset - half, offset + half
    m1 = sig(lo) + integrate.quad(lambda v: d1(v) * tail(v), lo, hi, limit=200)[0]
    m2 = sig(lo) ** 2 + integrate.quad(lambda v: 2 * sig(v) * d1(v) * tail(v), lo, hi, limit=200)[0]
    return m1, m2
