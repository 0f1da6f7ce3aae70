"""Distance kernels over binary codes.

Four interchangeable scoring paths are provided:

* ``reference``: scaled-integer dot product, the correctness oracle.
* ``bitwise``: XOR/popcount over bit planes with power-of-two plane
  weights; exact, no decoding.
* ``sdc-exact``: per-slot 16-entry lookup tables built from the query;
  exact int16 tables.
* ``sdc-q8``: the same tables affinely quantized to uint8 with a
  documented error model.

All exact paths produce identical integer accumulators, and the final
cosine is always computed by :func:`finish_scores`, so rankings agree
bit for bit across exact kernels.  Batch scans are dispatched to either
the compiled backend or the pure-numpy backend; set the environment
variable ``BINEMBED_BACKEND`` to ``numba`` or ``numpy`` to choose (the
default is the compiled path, falling back to numpy when unavailable).
"""

import os
import warnings
from dataclasses import dataclass

import numpy as np

from ..codec import (
    BLOCK_V,
    PackedCodeBlock,
    PackedStore,
    PlaneMatrix,
    check_geometry,
    field_to_scaled,
)

BACKEND_ENV = "BINEMBED_BACKEND"
KERNEL_CHOICES = ("reference", "bitwise", "sdc-exact", "sdc-q8")


def _load_backend():
    choice = os.environ.get(BACKEND_ENV, "").strip().lower()
    if choice not in ("", "numba", "numpy"):
        raise ValueError(
            "%s must be 'numba' or 'numpy', got %r" % (BACKEND_ENV, choice)
        )
    if choice != "numpy":
        try:
            from . import _backend_numba as impl

            return impl, "numba"
        except ImportError:
            if choice == "numba":
                raise
            warnings.warn("compiled backend unavailable, using numpy fallback")
    from . import _backend_numpy as impl

    return impl, "numpy"


_IMPL, _BACKEND_NAME = _load_backend()


def get_backend() -> str:
    """Name of the active scan backend ('numba' or 'numpy')."""
    return _BACKEND_NAME


# ------------------------------------------------------------- query-side


@dataclass
class QueryLut:
    """Per-query lookup tables for the slot-wise scan.

    ``tables`` is (S, 16): int16 exact partial dots in ``exact`` mode, or
    uint8 quantized entries in ``q8`` mode where a stored entry e stands
    for ``scale * e + bias``.  ``inv_norm`` is the query's reciprocal
    decoded norm, carried so scans can emit final cosine scores.
    """

    B: int
    S: int
    mode: str
    tables: np.ndarray
    inv_norm: float
    scale: float = 1.0
    bias: float = 0.0


@dataclass
class ScoreBatch:
    """Scan output: integer accumulators plus final cosine scores.

    For exact kernels ``int_dots`` is the exact scaled-integer dot; for
    the q8 kernel it is the sum of quantized table entries (the affine
    map back to an estimated dot happens in the score).
    """

    int_dots: np.ndarray
    scores: np.ndarray

    @classmethod
    def empty(cls, n: int) -> "ScoreBatch":
        return cls(np.empty(n, dtype=np.int64), np.empty(n, dtype=np.float64))


_NIBBLE_FIELDS = {}


def _nibble_fields(B: int) -> np.ndarray:
    """(16, 4/B) scaled lattice values of each nibble, slot dim order."""
    cached = _NIBBLE_FIELDS.get(B)
    if cached is not None:
        return cached
    dims = 4 // B
    shifts = B * (dims - 1 - np.arange(dims))
    fields = (np.arange(16)[:, None] >> shifts[None, :]) & ((1 << B) - 1)
    out = field_to_scaled(fields, B).astype(np.int16)
    _NIBBLE_FIELDS[B] = out
    return out


def build_lut(q_ints: np.ndarray, B: int, mode: str = "exact",
              inv_norm: float = 1.0) -> QueryLut:
    """Build per-slot tables of partial dots against a scaled query.

    ``q_ints`` must be odd integers in the decoded lattice (scaled by
    2^u); even values cannot come from a valid code and are rejected.
    """
    if mode not in ("exact", "q8"):
        raise ValueError("lut mode must be 'exact' or 'q8', got %r" % (mode,))
    q = np.asarray(q_ints)
    if q.ndim != 1:
        raise ValueError("query must be one-dimensional")
    m = q.shape[0]
    S = check_geometry(m, B)
    qi = q.astype(np.int64)
    limit = (1 << B) - 1
    if np.any(qi % 2 == 0) or np.any(np.abs(qi) > limit):
        raise ValueError("query values must be odd integers within the code range")
    fields = _nibble_fields(B)
    per_slot = qi.reshape(S, 4 // B)
    tables = (per_slot[:, None, :] * fields[None, :, :].astype(np.int64)).sum(axis=2)
    tables = tables.astype(np.int16)
    if mode == "exact":
        return QueryLut(B=B, S=S, mode=mode, tables=tables, inv_norm=float(inv_norm))
    lo = int(tables.min())
    hi = int(tables.max())
    scale = (hi - lo) / 255.0 if hi > lo else 1.0
    ent = np.clip(np.rint((tables - lo) / scale), 0, 255).astype(np.uint8)
    return QueryLut(B=B, S=S, mode=mode, tables=ent, inv_norm=float(inv_norm),
                    scale=scale, bias=float(lo))


# --------------------------------------------------------------- pair ops


def dot_reference(q_ints: np.ndarray, d_ints: np.ndarray) -> int:
    """Exact integer dot of two scaled codes."""
    q = np.asarray(q_ints, dtype=np.int64)
    d = np.asarray(d_ints, dtype=np.int64)
    if q.shape != d.shape:
        raise ValueError("shape mismatch")
    return int(np.dot(q, d))


def _tail_mask(m: int, w: int) -> np.ndarray:
    mask = np.full(w, np.uint64(0xFFFFFFFFFFFFFFFF))
    r = m - 64 * (w - 1)
    if r < 64:
        mask[w - 1] = np.uint64((1 << r) - 1)
    return mask


def plane_dot(x_words: np.ndarray, y_words: np.ndarray, m: int) -> int:
    """Dot of two sign planes: m - 2 * popcount(masked xor)."""
    x = np.asarray(x_words, dtype=np.uint64).ravel()
    y = np.asarray(y_words, dtype=np.uint64).ravel()
    if x.shape != y.shape:
        raise ValueError("shape mismatch")
    masked = (x ^ y) & _tail_mask(m, x.shape[0])
    pc = int(np.bitwise_count(masked).sum()) if hasattr(np, "bitwise_count") else int(
        sum(bin(int(v)).count("1") for v in masked))
    return m - 2 * pc


def dot_bitwise(q_words: np.ndarray, d_words: np.ndarray, m: int) -> int:
    """Exact dot via the plane-pair popcount decomposition."""
    qw = np.asarray(q_words, dtype=np.uint64)
    dw = np.asarray(d_words, dtype=np.uint64)
    if qw.shape != dw.shape or qw.ndim != 2:
        raise ValueError("plane words must both be (planes, words)")
    P = qw.shape[0]
    u = P - 1
    acc = 0
    for p in range(P):
        for t in range(P):
            acc += plane_dot(qw[p], dw[t], m) << (2 * u - p - t)
    return acc


def dot_float(x: np.ndarray, y: np.ndarray) -> float:
    """Float baseline dot in float64."""
    return float(np.dot(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)))


# ------------------------------------------------------------ batch scans


def finish_scores(dots, inv_q: float, inv_norms: np.ndarray, u: int,
                  out: np.ndarray = None) -> np.ndarray:
    """Turn (estimated) integer dots into cosine scores.

    cosine = dot * inv_q * inv_d / 2^(2u).  Every kernel funnels through
    this one expression so exact kernels produce bit-identical scores.
    """
    dots = np.asarray(dots)
    qf = np.float64(inv_q) * np.float64(1.0 / (1 << (2 * u)))
    if out is not None:
        np.multiply(dots, qf, out=out)
        out *= np.asarray(inv_norms, dtype=np.float64)
        return out
    res = dots * qf
    res *= np.asarray(inv_norms, dtype=np.float64)
    return res


def scan_reference(q_ints: np.ndarray, d_ints: np.ndarray) -> np.ndarray:
    """Exact integer dots of one query against rows of scaled codes."""
    d = np.ascontiguousarray(d_ints, dtype=np.int8)
    if d.ndim != 2:
        raise ValueError("codes must be (n, m)")
    q = np.ascontiguousarray(np.asarray(q_ints, dtype=np.int64))
    out = np.empty(d.shape[0], dtype=np.int64)
    _IMPL.scan_reference(q, d, out)
    return out


def scan_bitwise(q_words: np.ndarray, planes, m: int = None) -> np.ndarray:
    """Exact integer dots via popcount over a plane matrix."""
    if isinstance(planes, PlaneMatrix):
        dw = planes.words
        m = planes.m
    else:
        dw = np.ascontiguousarray(planes, dtype=np.uint64)
        if m is None:
            raise ValueError("m is required with raw plane words")
    qw = np.ascontiguousarray(q_words, dtype=np.uint64)
    if qw.ndim != 2 or dw.ndim != 3 or dw.shape[1:] != qw.shape:
        raise ValueError("plane shapes disagree")
    u = qw.shape[0] - 1
    out = np.empty(dw.shape[0], dtype=np.int64)
    _IMPL.scan_bitwise(qw, dw, m, u, out)
    return out


def _store_parts(store):
    """Normalize a PackedStore or block sequence into scan segments."""
    if isinstance(store, PackedStore):
        return [(store.words, store.inv_norms, store.count)], store.slots
    blocks = list(store)
    if not blocks:
        raise ValueError("nothing to scan")
    S = None
    parts = []
    for blk in blocks:
        if not isinstance(blk, PackedCodeBlock):
            raise TypeError("expected PackedCodeBlock items")
        if blk.V != BLOCK_V:
            raise ValueError("scans expect %d-lane blocks" % BLOCK_V)
        bS = check_geometry(blk.m, blk.B)
        if S is None:
            S = bS
        elif bS != S:
            raise ValueError("mixed block geometry")
        parts.append((blk.words.reshape(1, -1), blk.inv_norms, blk.valid))
    return parts, S


def scan_sdc(lut: QueryLut, store, out: ScoreBatch = None) -> ScoreBatch:
    """Slot-wise LUT scan of packed blocks.

    ``store`` is a PackedStore or an iterable of PackedCodeBlock.  Padded
    lanes are computed and then dropped; they never reach the output.
    """
    parts, S = _store_parts(store)
    if S != lut.S:
        raise ValueError("lut has %d slots, store has %d" % (lut.S, S))
    total = sum(p[2] for p in parts)
    if out is None:
        out = ScoreBatch.empty(total)
    elif out.int_dots.shape[0] != total:
        raise ValueError("output sized for %d vectors, scanning %d"
                         % (out.int_dots.shape[0], total))
    u = lut.B - 1
    pos = 0
    for words, inv_norms, valid in parts:
        if valid == 0:
            continue
        lanes = words.shape[0] * BLOCK_V
        if lanes == valid:
            acc = out.int_dots[pos:pos + valid]
        else:
            acc = np.empty(lanes, dtype=np.int64)
        if lut.mode == "exact":
            _IMPL.scan_sdc_i16(words, lut.tables, S, acc)
        else:
            _IMPL.scan_sdc_u8(words, lut.tables, S, acc)
        if lanes != valid:
            acc = acc[:valid]
            out.int_dots[pos:pos + valid] = acc
        if lut.mode == "exact":
            est = acc
        else:
            est = acc.astype(np.float64) * lut.scale + S * lut.bias
        finish_scores(est, lut.inv_norm, inv_norms[:valid], u,
                      out=out.scores[pos:pos + valid])
        pos += valid
    return out


def scan_float(q: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Float baseline dots of one query against rows of x."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    q = np.ascontiguousarray(q, dtype=np.float32)
    out = np.empty(x.shape[0], dtype=np.float64)
    _IMPL.scan_float(q, x, out)
    return out


def topk_positions(scores: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k best entries, score descending then id ascending."""
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    ids = np.ascontiguousarray(ids, dtype=np.uint64)
    if scores.shape != ids.shape:
        raise ValueError("scores and ids must align")
    return _IMPL.topk_positions(scores, ids, int(k))
