"""Shared helpers for the on-disk binary formats.

All container files in this package follow the same envelope: a little
endian header starting with a 4-byte magic, a payload, and a trailing
CRC-32C of the payload bytes.  CRC-32C (Castagnoli polynomial, reflected
form 0x82F63B78) is not what ``zlib.crc32`` computes, so the checksum is
implemented here.  A numba-compiled loop is used when numba imports
cleanly; otherwise a slice-by-8 pure python loop takes over, which is
slow but only matters for very large files.
"""

import struct

import numpy as np

CRC32C_POLY = 0x82F63B78  # reflected Castagnoli polynomial


def _make_tables(n: int = 8) -> np.ndarray:
    t = np.zeros((n, 256), dtype=np.uint64)
    for i in range(256):
        c = i
        for _ in range(8):
            c = (c >> 1) ^ CRC32C_POLY if (c & 1) else (c >> 1)
        t[0, i] = c
    for k in range(1, n):
        for i in range(256):
            prev = int(t[k - 1, i])
            t[k, i] = t[0, prev & 0xFF] ^ (prev >> 8)
    return t


_TABLES = _make_tables()
_TABLES_U32 = _TABLES.astype(np.uint32)

try:
    from numba import njit

    @njit(cache=True)
    def _crc_update_njit(data: np.ndarray, crc: np.uint32) -> np.uint32:
        table = _TABLES_U32
        c = crc
        for i in range(data.size):
            c = table[0, (c ^ np.uint32(data[i])) & np.uint32(0xFF)] ^ (c >> np.uint32(8))
        return c

    _HAVE_NJIT = True
except ImportError:
    _HAVE_NJIT = False


def _crc_update_py(data: bytes, crc: int) -> int:
    t = _TABLES
    c = crc
    n8 = len(data) // 8
    if n8:
        words = struct.unpack_from("<%dQ" % n8, data)
        for w in words:
            w ^= c
            c = int(
                t[7, w & 0xFF]
                ^ t[6, (w >> 8) & 0xFF]
                ^ t[5, (w >> 16) & 0xFF]
                ^ t[4, (w >> 24) & 0xFF]
                ^ t[3, (w >> 32) & 0xFF]
                ^ t[2, (w >> 40) & 0xFF]
                ^ t[1, (w >> 48) & 0xFF]
                ^ t[0, (w >> 56) & 0xFF]
            )
    for b in data[n8 * 8 :]:
        c = int(t[0, (c ^ b) & 0xFF]) ^ (c >> 8)
    return c


def crc32c(data, crc: int = 0) -> int:
    """CRC-32C of ``data`` (bytes-like or uint8 ndarray).

    Pass the previous return value as ``crc`` to checksum a stream
    incrementally, like ``zlib.crc32``.
    """
    c = (crc ^ 0xFFFFFFFF) & 0xFFFFFFFF
    if isinstance(data, np.ndarray):
        data = np.ascontiguousarray(data).view(np.uint8).reshape(-1)
        if _HAVE_NJIT:
            c = int(_crc_update_njit(data, np.uint32(c)))
        else:
            c = _crc_update_py(data.tobytes(), c)
    else:
        data = bytes(data)
        if _HAVE_NJIT and len(data) > 4096:
            c = int(_crc_update_njit(np.frombuffer(data, dtype=np.uint8), np.uint32(c)))
        else:
            c = _crc_update_py(data, c)
    return (c ^ 0xFFFFFFFF) & 0xFFFFFFFF


class ChecksumWriter:
    """File-object wrapper that keeps a running CRC-32C of written bytes.

    Header bytes are normally written before ``start_payload`` is called;
    the checksum only covers what comes after.
    """

    def __init__(self, f):
        self._f = f
        self._crc = 0
        self._counting = False

    def write(self, data) -> None:
        if isinstance(data, np.ndarray):
            data = np.ascontiguousarray(data).tobytes()
        if self._counting:
            self._crc = crc32c(data, self._crc)
        self._f.write(data)

    def start_payload(self) -> None:
        self._counting = True
        self._crc = 0

    def finish(self) -> None:
        """Append the payload checksum as a little endian u32."""
        self._counting = False
        self._f.write(struct.pack("<I", self._crc))


def read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ValueError("truncated file: wanted %d bytes, got %d" % (n, len(data)))
    return data


def check_magic(f, magic: bytes) -> None:
    got = f.read(len(magic))
    if got != magic:
        raise ValueError("bad magic %r, expected %r" % (got, magic))


def verify_trailer(f, payload_crc: int) -> None:
    """Read the trailing u32 checksum and compare against ``payload_crc``."""
    (stored,) = struct.unpack("<I", read_exact(f, 4))
    if stored != payload_crc:
        raise ValueError(
            "checksum mismatch: stored %08x, computed %08x" % (stored, payload_crc)
        )
