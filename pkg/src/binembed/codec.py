"""Storage and scan layouts for recurrent binary codes.

Two physical layouts serve the two distance kernels:

- ``PlaneMatrix``: plane-major bit arrays. Dimension j of plane p lives
  at bit ``j % 64`` of word ``j // 64`` (LSB first); pad bits are zero.
  The popcount kernel XORs whole words of query and document planes.

- ``PackedCodeBlock`` / ``PackedStore``: transposed nibble blocks for
  the lookup-table kernel.  Codes are cut into S = m*B/4 nibble slots;
  a block holds V vectors (default 32) slot-major, so the V nibbles of
  one slot are contiguous and a single wide read covers the same slot
  of many vectors.  Nibble k of the stream (k = slot*V + lane) sits in
  byte ``k // 2``, low nibble for even k, high nibble for odd k.
  Per-vector reciprocal norms follow the slots of each block.

Within a nibble, bits are plane-major with plane 0 in the most
significant position of its field:

- B=4: one dimension per slot, bit3..bit0 = planes 0..3
- B=2: dimensions (2s, 2s+1); high two bits = dim 2s; in each 2-bit
  field the high bit is plane 0
- B=1: dimensions 4s..4s+3, one bit each, dim 4s in bit3

A field value x of width B decodes to the scaled lattice integer
``2x - (2**B - 1)``.

Norms are stored either as raw float32 ("f32") or as 16-bit fixed point
("q16") with the static scale ``2**u / (sqrt(m) * 65535)``; the largest
possible reciprocal norm maps to 65535 and the worst-case relative
error is ``(2**B - 1) / 131070``, below 2**-12 for B <= 4.

Segment file::

    magic "RBEI" | version u16 | B u8 | norm_mode u8 | m u32 |
    count u64 | V u32 | per block: S*V/2 nibble bytes then V norms
    (4 or 2 bytes each, padded lanes zero) | crc32c of the block array
"""

import struct

import numpy as np

from ._binio import ChecksumWriter, check_magic, crc32c, read_exact
from .model import CodeBatch

RBEI_MAGIC = b"RBEI"
RBEI_VERSION = 1
BLOCK_V = 32

NORM_MODE_CODES = {"f32": 0, "q16": 1}
NORM_MODE_NAMES = {v: k for k, v in NORM_MODE_CODES.items()}


def check_geometry(m: int, B: int) -> int:
    """Validate (m, B) for nibble packing and return the slot count S."""
    if B not in (1, 2, 4):
        raise ValueError("bits per dimension must be 1, 2 or 4, got %r" % (B,))
    if (m * B) % 4 != 0:
        raise ValueError("m*B must be a multiple of 4, got m=%d B=%d" % (m, B))
    return m * B // 4


# ---------------------------------------------------------------- planes


class PlaneMatrix:
    """Plane-major bit planes for a set of codes, plus reciprocal norms."""

    def __init__(self, words: np.ndarray, m: int, inv_norms: np.ndarray):
        self.words = np.ascontiguousarray(words, dtype=np.uint64)
        if self.words.ndim != 3:
            raise ValueError("words must have shape (n, planes, words_per_plane)")
        self.m = int(m)
        self.inv_norms = np.ascontiguousarray(inv_norms, dtype=np.float32)

    @property
    def count(self) -> int:
        return self.words.shape[0]

    @property
    def planes(self) -> int:
        return self.words.shape[1]

    @property
    def words_per_plane(self) -> int:
        return self.words.shape[2]


def _pack_bits_u64(bits: np.ndarray) -> np.ndarray:
    """Pack 0/1 arrays (..., m) into (..., ceil(m/64)) uint64, LSB first."""
    m = bits.shape[-1]
    wpp = (m + 63) // 64
    padded = np.zeros(bits.shape[:-1] + (wpp * 64,), dtype=np.uint8)
    padded[..., :m] = bits
    # bit j goes to byte j//8, position j%8; uint64 view keeps LSB-first order
    packed = np.packbits(padded.reshape(-1, 8)[:, ::-1], axis=1)
    return packed.view(np.uint8).reshape(bits.shape[:-1] + (wpp, 8)).view("<u8")[..., 0]


def _unpack_bits_u64(words: np.ndarray, m: int) -> np.ndarray:
    as_bytes = words.astype("<u8").reshape(words.shape + (1,)).view(np.uint8)
    bits = np.unpackbits(as_bytes.reshape(-1, 8), axis=1)
    # unpackbits is MSB-first per byte; flip to LSB-first within each byte
    bits = bits.reshape(-1, 8, 8)[:, :, ::-1].reshape(words.shape[:-1] + (words.shape[-1] * 64,))
    return bits[..., :m]


def to_planes(codes: CodeBatch) -> PlaneMatrix:
    """Bit-plane layout; inverse of :func:`from_planes`."""
    words = _pack_bits_u64(codes.planes)
    return PlaneMatrix(words, codes.code_dim, codes.inv_norms)


def from_planes(pm: PlaneMatrix) -> CodeBatch:
    bits = _unpack_bits_u64(pm.words, pm.m).astype(np.uint8)
    return CodeBatch(bits, inv_norms=pm.inv_norms)


# ---------------------------------------------------------------- nibbles


def planes_to_nibbles(planes: np.ndarray) -> np.ndarray:
    """(n, B, m) plane bits -> (n, S) nibble values."""
    n, B, m = planes.shape
    S = check_geometry(m, B)
    dims_per_slot = 4 // B
    # field value per dimension: plane 0 is the most significant bit
    weights = (1 << np.arange(B - 1, -1, -1)).astype(np.uint8)
    fields = np.einsum("nbm,b->nm", planes.astype(np.uint8), weights)
    fields = fields.reshape(n, S, dims_per_slot)
    shifts = B * np.arange(dims_per_slot - 1, -1, -1)
    return np.bitwise_or.reduce(fields << shifts, axis=2).astype(np.uint8)


def nibbles_to_planes(nibbles: np.ndarray, B: int, m: int) -> np.ndarray:
    n, S = nibbles.shape
    if S != check_geometry(m, B):
        raise ValueError("slot count does not match geometry")
    dims_per_slot = 4 // B
    shifts = B * np.arange(dims_per_slot - 1, -1, -1)
    fields = (nibbles[:, :, None] >> shifts) & ((1 << B) - 1)
    fields = fields.reshape(n, m)
    bit_pos = np.arange(B - 1, -1, -1)
    planes = (fields[:, None, :] >> bit_pos[None, :, None]) & 1
    return planes.astype(np.uint8)


def field_to_scaled(x: np.ndarray, B: int) -> np.ndarray:
    """Decode a B-bit field value to its scaled odd lattice integer."""
    return (2 * x.astype(np.int16) - (2**B - 1)).astype(np.int16)


def to_scaled_int(planes: np.ndarray) -> np.ndarray:
    """(n, B, m) plane bits -> (n, m) int8 scaled lattice values."""
    n, B, m = planes.shape
    u = B - 1
    weights = (1 << (u - np.arange(B))).astype(np.int16)
    signs = planes.astype(np.int16) * 2 - 1
    return np.einsum("nbm,b->nm", signs, weights).astype(np.int8)


# ---------------------------------------------------------------- norms


def norm_scale(m: int, u: int) -> float:
    """q16 fixed-point step: the largest lattice inv_norm over 65535."""
    return (2.0**u) / (np.sqrt(m) * 65535.0)


def quantize_norm(inv_norms: np.ndarray, mode: str, m: int, u: int) -> np.ndarray:
    inv_norms = np.asarray(inv_norms, dtype=np.float32)
    if mode == "f32":
        return inv_norms.astype("<f4")
    if mode == "q16":
        q = np.rint(inv_norms / np.float32(norm_scale(m, u)))
        if np.any(q > 65535) or np.any(q < 0):
            raise ValueError("inv_norm outside the representable lattice range")
        return q.astype("<u2")
    raise ValueError("unknown norm mode %r" % (mode,))


def dequantize_norm(stored: np.ndarray, mode: str, m: int, u: int) -> np.ndarray:
    if mode == "f32":
        return np.asarray(stored, dtype=np.float32)
    if mode == "q16":
        return (np.asarray(stored, dtype=np.float32) * np.float32(norm_scale(m, u))).astype(
            np.float32
        )
    raise ValueError("unknown norm mode %r" % (mode,))


# ---------------------------------------------------------------- blocks


class PackedCodeBlock:
    """One transposed block: V lanes, S slots, valid <= V real vectors."""

    def __init__(self, words: np.ndarray, inv_norms: np.ndarray, valid: int,
                 m: int, B: int, V: int = BLOCK_V):
        self.words = np.ascontiguousarray(words, dtype=np.uint64)
        self.inv_norms = np.ascontiguousarray(inv_norms, dtype=np.float32)
        self.valid = int(valid)
        self.m = int(m)
        self.B = int(B)
        self.V = int(V)
        S = check_geometry(m, B)
        if self.words.size != S * V // 16:
            raise ValueError("block word count mismatch")
        if self.inv_norms.size != V:
            raise ValueError("block norm count mismatch")


def _interleave_nibbles(nibbles: np.ndarray, V: int) -> np.ndarray:
    """(nb, V, S) nibble values -> (nb, S*V/16) uint64 slot-major stream."""
    nb, v, S = nibbles.shape
    slotmajor = nibbles.transpose(0, 2, 1)  # (nb, S, V)
    lo = slotmajor[:, :, 0::2]
    hi = slotmajor[:, :, 1::2]
    as_bytes = (lo | (hi << 4)).astype(np.uint8)
    return as_bytes.reshape(nb, S * V // 2).view("<u8").reshape(nb, S * V // 16)


def _deinterleave_nibbles(words: np.ndarray, V: int, S: int) -> np.ndarray:
    """Inverse of :func:`_interleave_nibbles` -> (nb, V, S)."""
    nb = words.shape[0]
    as_bytes = words.astype("<u8").reshape(nb, -1, 1).view(np.uint8).reshape(nb, S, V // 2)
    out = np.empty((nb, S, V), dtype=np.uint8)
    out[:, :, 0::2] = as_bytes & 0x0F
    out[:, :, 1::2] = as_bytes >> 4
    return out.transpose(0, 2, 1)


class PackedStore:
    """All blocks of a code set, contiguous, plus dense norms.

    ``words`` is (n_blocks, S*V/16) uint64 and ``inv_norms`` is
    (n_blocks * V,) float32 with zeros in padded lanes.  Norms are kept
    as float32 in memory regardless of ``norm_mode``; the mode controls
    the serialized form (and its precision, applied on save/load).
    """

    def __init__(self, words, inv_norms, count, m, B, norm_mode="f32", V=BLOCK_V):
        self.words = np.ascontiguousarray(words, dtype=np.uint64)
        self.inv_norms = np.ascontiguousarray(inv_norms, dtype=np.float32)
        self.count = int(count)
        self.m = int(m)
        self.B = int(B)
        self.norm_mode = norm_mode
        self.V = int(V)
        if norm_mode not in NORM_MODE_CODES:
            raise ValueError("unknown norm mode %r" % (norm_mode,))
        check_geometry(m, B)

    @property
    def n_blocks(self) -> int:
        return self.words.shape[0]

    @property
    def slots(self) -> int:
        return self.m * self.B // 4

    def block(self, i: int) -> PackedCodeBlock:
        valid = min(self.V, self.count - i * self.V)
        return PackedCodeBlock(
            self.words[i],
            self.inv_norms[i * self.V : (i + 1) * self.V],
            valid,
            self.m,
            self.B,
            self.V,
        )

    def blocks(self) -> list:
        return [self.block(i) for i in range(self.n_blocks)]


def pack_store(codes: CodeBatch, norm_mode: str = "f32", V: int = BLOCK_V) -> PackedStore:
    """Pack a whole CodeBatch into transposed nibble blocks."""
    n = codes.count
    B = codes.planes.shape[1]
    m = codes.code_dim
    S = check_geometry(m, B)
    nb = max(1, -(-n // V)) if n else 0
    nibbles = planes_to_nibbles(codes.planes) if n else np.zeros((0, S), np.uint8)
    padded = np.zeros((nb * V, S), dtype=np.uint8)
    padded[:n] = nibbles
    words = (
        _interleave_nibbles(padded.reshape(nb, V, S), V)
        if nb
        else np.zeros((0, S * V // 16), dtype=np.uint64)
    )
    norms = np.zeros(nb * V, dtype=np.float32)
    norms[:n] = codes.inv_norms
    if norm_mode == "q16":
        # snap to the serialized precision so scans match a reloaded store
        norms = dequantize_norm(quantize_norm(norms, "q16", m, B - 1), "q16", m, B - 1)
    return PackedStore(words, norms, n, m, B, norm_mode, V)


def pack_block(planes: np.ndarray, inv_norms: np.ndarray, V: int = BLOCK_V) -> PackedCodeBlock:
    """Pack at most V codes into one block (tail lanes zero-padded)."""
    n = planes.shape[0]
    if n > V:
        raise ValueError("at most %d codes per block" % V)
    store = pack_store(CodeBatch(planes, inv_norms=inv_norms), V=V)
    blk = store.block(0)
    blk.valid = n
    return blk


def unpack_block(block: PackedCodeBlock):
    """Recover the valid codes' plane bits and norms from a block."""
    S = check_geometry(block.m, block.B)
    lanes = _deinterleave_nibbles(block.words.reshape(1, -1), block.V, S)[0]
    planes = nibbles_to_planes(lanes[: block.valid], block.B, block.m)
    return planes, block.inv_norms[: block.valid].copy()


# ---------------------------------------------------------------- segments


def _norm_bytes(mode: str) -> int:
    return 4 if mode == "f32" else 2


def segment_payload_nbytes(count: int, m: int, B: int, norm_mode: str = "f32",
                           V: int = BLOCK_V) -> int:
    """Size of the block array: nibble bytes plus norm fields."""
    S = check_geometry(m, B)
    nb = -(-count // V)
    return nb * (S * V // 2 + V * _norm_bytes(norm_mode))


def write_segment(f, store: PackedStore) -> None:
    """Serialize one store to an open binary file object."""
    w = ChecksumWriter(f)
    w.write(RBEI_MAGIC)
    w.write(
        struct.pack(
            "<HBBIQI",
            RBEI_VERSION,
            store.B,
            NORM_MODE_CODES[store.norm_mode],
            store.m,
            store.count,
            store.V,
        )
    )
    w.start_payload()
    stored_norms = quantize_norm(
        store.inv_norms, store.norm_mode, store.m, store.B - 1
    ).reshape(store.n_blocks, store.V) if store.n_blocks else None
    for i in range(store.n_blocks):
        w.write(store.words[i].astype("<u8", copy=False))
        w.write(stored_norms[i])
    w.finish()


def save_segment(path, store: PackedStore) -> None:
    with open(str(path), "wb") as f:
        write_segment(f, store)


def read_segment(f, name="segment") -> PackedStore:
    """Read one store from an open binary file object."""
    check_magic(f, RBEI_MAGIC)
    version, B, mode_code, m, count, V = struct.unpack("<HBBIQI", read_exact(f, 20))
    if version != RBEI_VERSION:
        raise ValueError("unsupported segment version %d" % version)
    if mode_code not in NORM_MODE_NAMES:
        raise ValueError("unknown norm mode code %d" % mode_code)
    norm_mode = NORM_MODE_NAMES[mode_code]
    S = check_geometry(m, B)
    nb = -(-count // V)
    payload = read_exact(f, segment_payload_nbytes(count, m, B, norm_mode, V))
    (stored_crc,) = struct.unpack("<I", read_exact(f, 4))
    if crc32c(payload) != stored_crc:
        raise ValueError("checksum mismatch in segment %s" % name)

    words = np.zeros((nb, S * V // 16), dtype=np.uint64)
    norms = np.zeros(nb * V, dtype=np.float32)
    code_bytes = S * V // 2
    nbytes = _norm_bytes(norm_mode)
    stride = code_bytes + V * nbytes
    for i in range(nb):
        off = i * stride
        words[i] = np.frombuffer(payload, dtype="<u8", count=S * V // 16, offset=off)
        raw = np.frombuffer(
            payload,
            dtype="<f4" if norm_mode == "f32" else "<u2",
            count=V,
            offset=off + code_bytes,
        )
        norms[i * V : (i + 1) * V] = dequantize_norm(raw, norm_mode, m, B - 1)
    return PackedStore(words, norms, count, m, B, norm_mode, V)


def load_segment(path) -> PackedStore:
    with open(str(path), "rb") as f:
        return read_segment(f, name=str(path))
