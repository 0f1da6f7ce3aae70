"""Numba-compiled scan loops.

All functions here are exact integer kernels (or float64 for the float
baseline) operating on flat arrays; shapes and dtypes are prepared by
the dispatching wrappers in ``kernels``.  The popcount uses the classic
bit-twiddling reduction, which LLVM recognizes and lowers to the native
popcount instruction where available.
"""

import numpy as np
from numba import njit

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)
_S1 = np.uint64(1)
_S2 = np.uint64(2)
_S4 = np.uint64(4)
_S56 = np.uint64(56)
_NIB = np.uint64(0xF)


@njit(inline="always")
def _popcount64(x):
    x = x - ((x >> _S1) & _M1)
    x = (x & _M2) + ((x >> _S2) & _M2)
    x = (x + (x >> _S4)) & _M4
    return np.int64((x * _H01) >> _S56)


@njit(cache=True)
def scan_bitwise(q_words, d_words, m, u, out):
    """Plane-pair popcount decomposition.

    q_words: (P, w) uint64, d_words: (n, P, w) uint64, out: (n,) int64.
    Accumulates sum over plane pairs of 2^(2u-p-t) * (m - 2*popc(xor)).
    """
    n = d_words.shape[0]
    P = q_words.shape[0]
    w = q_words.shape[1]
    for i in range(n):
        acc = np.int64(0)
        for p in range(P):
            for t in range(P):
                s = np.int64(0)
                for k in range(w):
                    s += _popcount64(q_words[p, k] ^ d_words[i, t, k])
                acc += (np.int64(m) - np.int64(2) * s) << np.int64(2 * u - p - t)
        out[i] = acc


@njit(cache=True)
def scan_sdc_i16(words, tables, S, out):
    """Exact LUT scan over transposed blocks (V=32 lanes).

    words: (nb, 2*S) uint64 slot-major nibble stream, tables: (S, 16)
    int16, out: (nb*32,) int64.  Lanes are processed eight at a time so
    the accumulators stay in registers.
    """
    nb = words.shape[0]
    for b in range(nb):
        base = b * 32
        for g in range(4):
            woff = g >> 1
            sh0 = np.uint64(32 * (g & 1))
            a0 = np.int64(0)
            a1 = np.int64(0)
            a2 = np.int64(0)
            a3 = np.int64(0)
            a4 = np.int64(0)
            a5 = np.int64(0)
            a6 = np.int64(0)
            a7 = np.int64(0)
            for s in range(S):
                w = words[b, 2 * s + woff] >> sh0
                a0 += tables[s, (w >> np.uint64(0)) & _NIB]
                a1 += tables[s, (w >> np.uint64(4)) & _NIB]
                a2 += tables[s, (w >> np.uint64(8)) & _NIB]
                a3 += tables[s, (w >> np.uint64(12)) & _NIB]
                a4 += tables[s, (w >> np.uint64(16)) & _NIB]
                a5 += tables[s, (w >> np.uint64(20)) & _NIB]
                a6 += tables[s, (w >> np.uint64(24)) & _NIB]
                a7 += tables[s, (w >> np.uint64(28)) & _NIB]
            o = base + 8 * g
            out[o] = a0
            out[o + 1] = a1
            out[o + 2] = a2
            out[o + 3] = a3
            out[o + 4] = a4
            out[o + 5] = a5
            out[o + 6] = a6
            out[o + 7] = a7


@njit(cache=True)
def scan_sdc_u8(words, tables, S, out):
    """Quantized LUT scan: same walk as scan_sdc_i16 with u8 tables."""
    nb = words.shape[0]
    for b in range(nb):
        base = b * 32
        for g in range(4):
            woff = g >> 1
            sh0 = np.uint64(32 * (g & 1))
            a0 = np.int64(0)
            a1 = np.int64(0)
            a2 = np.int64(0)
            a3 = np.int64(0)
            a4 = np.int64(0)
            a5 = np.int64(0)
            a6 = np.int64(0)
            a7 = np.int64(0)
            for s in range(S):
                w = words[b, 2 * s + woff] >> sh0
                a0 += tables[s, (w >> np.uint64(0)) & _NIB]
                a1 += tables[s, (w >> np.uint64(4)) & _NIB]
                a2 += tables[s, (w >> np.uint64(8)) & _NIB]
                a3 += tables[s, (w >> np.uint64(12)) & _NIB]
                a4 += tables[s, (w >> np.uint64(16)) & _NIB]
                a5 += tables[s, (w >> np.uint64(20)) & _NIB]
                a6 += tables[s, (w >> np.uint64(24)) & _NIB]
                a7 += tables[s, (w >> np.uint64(28)) & _NIB]
            o = base + 8 * g
            out[o] = a0
            out[o + 1] = a1
            out[o + 2] = a2
            out[o + 3] = a3
            out[o + 4] = a4
            out[o + 5] = a5
            out[o + 6] = a6
            out[o + 7] = a7


@njit(cache=True)
def scan_reference(q_ints, d_ints, out):
    """Scalar integer dot; q_ints (m,) int64-compatible, d_ints (n, m) int8."""
    n = d_ints.shape[0]
    m = d_ints.shape[1]
    for i in range(n):
        acc = np.int64(0)
        for j in range(m):
            acc += np.int64(q_ints[j]) * np.int64(d_ints[i, j])
        out[i] = acc


@njit(cache=True)
def scan_float(q, x, out):
    """Float baseline: sequential float64 accumulation per row."""
    n = x.shape[0]
    d = x.shape[1]
    for i in range(n):
        acc = 0.0
        for j in range(d):
            acc += np.float64(q[j]) * np.float64(x[i, j])
        out[i] = acc


@njit(cache=True)
def topk_positions(scores, ids, k):
    """Positions of the k best entries by (score desc, id asc)."""
    n = scores.shape[0]
    kk = k if k < n else n
    if kk <= 0:
        return np.empty(0, dtype=np.int64)
    pos = np.empty(kk, dtype=np.int64)
    vals = np.empty(kk, dtype=np.float64)
    keys = np.empty(kk, dtype=np.uint64)
    size = 0
    for i in range(n):
        s = scores[i]
        key = ids[i]
        if size < kk:
            j = size
            while j > 0 and (vals[j - 1] < s or (vals[j - 1] == s and keys[j - 1] > key)):
                vals[j] = vals[j - 1]
                keys[j] = keys[j - 1]
                pos[j] = pos[j - 1]
                j -= 1
            vals[j] = s
            keys[j] = key
            pos[j] = i
            size += 1
        elif s > vals[size - 1] or (s == vals[size - 1] and key < keys[size - 1]):
            j = size - 1
            while j > 0 and (vals[j - 1] < s or (vals[j - 1] == s and keys[j - 1] > key)):
                vals[j] = vals[j - 1]
                keys[j] = keys[j - 1]
                pos[j] = pos[j - 1]
                j -= 1
            vals[j] = s
            keys[j] = key
            pos[j] = i
    return pos
