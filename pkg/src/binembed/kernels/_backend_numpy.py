"""Pure-numpy scan implementations.

These mirror the compiled loops in ``_backend_numba`` and must produce
bit-identical integer accumulators and identical top-k selections.  They
are the portable fallback and the reference used in backend-equivalence
tests.
"""

import numpy as np

if hasattr(np, "bitwise_count"):
    def _popcount_u64(a):
        return np.bitwise_count(a).astype(np.int64)
else:
    _POP8 = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)

    def _popcount_u64(a):
        b = np.ascontiguousarray(a).view(np.uint8)
        return _POP8[b].reshape(a.shape + (8,)).sum(axis=-1, dtype=np.int64)


def scan_bitwise(q_words, d_words, m, u, out):
    """Plane-pair popcount decomposition, vectorized over vectors."""
    P = q_words.shape[0]
    out[:] = 0
    for p in range(P):
        for t in range(P):
            pc = _popcount_u64(d_words[:, t, :] ^ q_words[p]).sum(axis=1)
            out += (np.int64(m) - 2 * pc) << np.int64(2 * u - p - t)


def _lane_nibbles(words, S):
    """(nb, 2S) uint64 slot-major words -> (nb*32, S) uint8 nibble values."""
    nb = words.shape[0]
    # Byte k//2 of the stream holds nibble k in its low half for even k.
    by = np.ascontiguousarray(words).view(np.uint8).reshape(nb, S, 16)
    lo = by & np.uint8(0xF)
    hi = by >> np.uint8(4)
    lanes = np.empty((nb, S, 32), dtype=np.uint8)
    lanes[:, :, 0::2] = lo
    lanes[:, :, 1::2] = hi
    return lanes.transpose(0, 2, 1).reshape(nb * 32, S)


def scan_sdc_i16(words, tables, S, out):
    nibs = _lane_nibbles(words, S)
    cols = np.arange(S, dtype=np.intp)
    np.sum(tables[cols, nibs.astype(np.intp)], axis=1, dtype=np.int64, out=out)


def scan_sdc_u8(words, tables, S, out):
    nibs = _lane_nibbles(words, S)
    cols = np.arange(S, dtype=np.intp)
    np.sum(tables[cols, nibs.astype(np.intp)], axis=1, dtype=np.int64, out=out)


def scan_reference(q_ints, d_ints, out):
    out[:] = d_ints.astype(np.int64) @ q_ints.astype(np.int64)


def scan_float(q, x, out):
    # Sequential per-row accumulation order is not reproduced here; the
    # float kernel only promises agreement within rounding, not bitwise.
    np.dot(x.astype(np.float64), q.astype(np.float64), out=out)


def topk_positions(scores, ids, k):
    """Positions of the k best entries by (score desc, id asc)."""
    n = scores.shape[0]
    kk = min(k, n)
    if kk <= 0:
        return np.empty(0, dtype=np.int64)
    if kk < n:
        kth = np.partition(scores, n - kk)[n - kk]
        cand = np.flatnonzero(scores >= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((ids[cand], -scores[cand]))
    return cand[order[:kk]].astype(np.int64)
