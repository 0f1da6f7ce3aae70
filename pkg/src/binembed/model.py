"""Recurrent binarization model.

A float embedding ``f`` (unit norm, dimension ``d``) is mapped to a
multi-bit binary code of ``m`` dimensions in ``u + 1`` passes:

- base plane: ``b_0 = sign(W_0(f))``
- for ``i = 1 .. u``: reconstruct ``fhat = l2norm(R_{i-1}(b_{i-1}))``,
  binarize the residual ``r = sign(W_i(f - fhat))``, and refine the code
  ``b_i = b_{i-1} + 2**-i * r``

Each ``W_i`` / ``R_i`` is a two-layer MLP (linear, batch norm, relu,
linear).  The decoded value per dimension lands on the odd integer
lattice ``{-(2**(u+1) - 1), ..., -1, 1, ..., 2**(u+1) - 1}`` after
scaling by ``2**u``, which is what the integer distance kernels exploit.

``sign`` is not differentiable, so the backward pass uses the
straight-through estimator: the gradient passes through unchanged where
the pre-activation magnitude is at most 1 and is zeroed elsewhere.
The forward pass records a tape; ``backward`` consumes it exactly once.
"""

import struct
from dataclasses import dataclass

import numpy as np

from ._binio import ChecksumWriter, check_magic, crc32c, read_exact, verify_trailer

RBEM_MAGIC = b"RBEM"
RBEM_VERSION = 1

# tensors per MLP block, in serialization order
_BLOCK_FIELDS = (
    "lin1_w",
    "lin1_b",
    "bn_gamma",
    "bn_beta",
    "bn_mean",
    "bn_var",
    "lin2_w",
    "lin2_b",
)
_TRAINED_FIELDS = ("lin1_w", "lin1_b", "bn_gamma", "bn_beta", "lin2_w", "lin2_b")


# batch norm constants; fixed rather than configurable, so checkpoints only
# need to carry the four shape numbers
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class ModelConfig:
    dim: int
    code_dim: int
    loops: int
    hidden: int = 0  # 0 means "same as dim"

    def __post_init__(self):
        if self.hidden == 0:
            self.hidden = self.dim
        if self.loops < 0:
            raise ValueError("loops must be >= 0")
        if self.dim <= 0 or self.code_dim <= 0 or self.hidden <= 0:
            raise ValueError("dim, code_dim and hidden must be positive")

    @property
    def planes(self) -> int:
        """Bits per code dimension (base plane plus one per loop)."""
        return self.loops + 1

    @property
    def total_bits(self) -> int:
        return self.code_dim * self.planes


def plane_weights(loops: int) -> np.ndarray:
    """Decode weights [1, 1/2, ..., 2**-loops] as float32."""
    return (2.0 ** -np.arange(loops + 1)).astype(np.float32)


class MlpBlock:
    """Linear -> batch norm -> relu -> linear, all float32."""

    def __init__(self, din: int, dout: int, hidden: int, rng: np.random.Generator):
        self.bn_eps = np.float32(BN_EPS)
        self.bn_momentum = np.float32(BN_MOMENTUM)
        # uniform fan-in scaling for the affine layers, identity batch norm
        a1 = 1.0 / np.sqrt(din)
        a2 = 1.0 / np.sqrt(hidden)
        self.lin1_w = rng.uniform(-a1, a1, (din, hidden)).astype(np.float32)
        self.lin1_b = rng.uniform(-a1, a1, hidden).astype(np.float32)
        self.bn_gamma = np.ones(hidden, dtype=np.float32)
        self.bn_beta = np.zeros(hidden, dtype=np.float32)
        self.bn_mean = np.zeros(hidden, dtype=np.float32)
        self.bn_var = np.ones(hidden, dtype=np.float32)
        self.lin2_w = rng.uniform(-a2, a2, (hidden, dout)).astype(np.float32)
        self.lin2_b = rng.uniform(-a2, a2, dout).astype(np.float32)

    def forward(self, x: np.ndarray, train: bool, tape: dict = None) -> np.ndarray:
        z1 = x @ self.lin1_w + self.lin1_b
        if train:
            mu = z1.mean(axis=0)
            var = z1.var(axis=0)  # biased, as used for the batch itself
            n = z1.shape[0]
            unbiased = var * (n / max(n - 1, 1))
            mom = self.bn_momentum
            self.bn_mean = ((1 - mom) * self.bn_mean + mom * mu).astype(np.float32)
            self.bn_var = ((1 - mom) * self.bn_var + mom * unbiased).astype(np.float32)
        else:
            mu = self.bn_mean
            var = self.bn_var
        inv_std = 1.0 / np.sqrt(var + self.bn_eps)
        xn = (z1 - mu) * inv_std
        h = self.bn_gamma * xn + self.bn_beta
        relu_mask = h > 0
        a = np.where(relu_mask, h, 0.0).astype(np.float32)
        out = a @ self.lin2_w + self.lin2_b
        if tape is not None:
            tape["x"] = x
            tape["xn"] = xn.astype(np.float32)
            tape["inv_std"] = inv_std.astype(np.float32)
            tape["relu_mask"] = relu_mask
            tape["a"] = a
            tape["train"] = train
        return out.astype(np.float32)

    def backward(self, tape: dict, g_out: np.ndarray, grads: dict, prefix: str) -> np.ndarray:
        a, xn = tape["a"], tape["xn"]
        grads[prefix + ".lin2_w"] = grads.get(prefix + ".lin2_w", 0) + a.T @ g_out
        grads[prefix + ".lin2_b"] = grads.get(prefix + ".lin2_b", 0) + g_out.sum(axis=0)
        g_a = g_out @ self.lin2_w.T
        g_h = np.where(tape["relu_mask"], g_a, 0.0)
        grads[prefix + ".bn_gamma"] = grads.get(prefix + ".bn_gamma", 0) + (g_h * xn).sum(axis=0)
        grads[prefix + ".bn_beta"] = grads.get(prefix + ".bn_beta", 0) + g_h.sum(axis=0)
        g_xn = g_h * self.bn_gamma
        if tape["train"]:
            # batch statistics depend on every row, use the full jacobian
            g_z1 = (g_xn - g_xn.mean(axis=0) - xn * (g_xn * xn).mean(axis=0)) * tape["inv_std"]
        else:
            g_z1 = g_xn * tape["inv_std"]
        g_z1 = g_z1.astype(np.float32)
        x = tape["x"]
        grads[prefix + ".lin1_w"] = grads.get(prefix + ".lin1_w", 0) + x.T @ g_z1
        grads[prefix + ".lin1_b"] = grads.get(prefix + ".lin1_b", 0) + g_z1.sum(axis=0)
        return (g_z1 @ self.lin1_w.T).astype(np.float32)

    def tensors(self) -> dict:
        return {name: getattr(self, name) for name in _BLOCK_FIELDS}


class RbeModel:
    """The full stack of binarization and reconstruction blocks."""

    def __init__(self, config: ModelConfig, w_blocks: list, r_blocks: list,
                 version_tag: str = "v0"):
        self.config = config
        self.w_blocks = w_blocks
        self.r_blocks = r_blocks
        self.version_tag = version_tag

    def named_blocks(self) -> list:
        out = [("w%d" % i, blk) for i, blk in enumerate(self.w_blocks)]
        out += [("r%d" % i, blk) for i, blk in enumerate(self.r_blocks)]
        return out

    def params(self) -> dict:
        """Trainable tensors keyed by ``block.field`` name."""
        out = {}
        for bname, blk in self.named_blocks():
            for f in _TRAINED_FIELDS:
                out["%s.%s" % (bname, f)] = getattr(blk, f)
        return out

    def buffers(self) -> dict:
        """Batch norm running statistics (updated, never descended on)."""
        out = {}
        for bname, blk in self.named_blocks():
            out[bname + ".bn_mean"] = blk.bn_mean
            out[bname + ".bn_var"] = blk.bn_var
        return out

    def set_param(self, name: str, value: np.ndarray) -> None:
        bname, f = name.split(".", 1)
        blk = dict(self.named_blocks())[bname]
        setattr(blk, f, value.astype(np.float32))


def init_model(config: ModelConfig, seed: int = 0, version_tag: str = "v0") -> RbeModel:
    """Fresh model: uniform fan-in affine layers, identity batch norm."""
    rng = np.random.default_rng(seed)
    d, m, h = config.dim, config.code_dim, config.hidden
    w_blocks = [MlpBlock(d, m, h, rng) for _ in range(config.loops + 1)]
    r_blocks = [MlpBlock(m, d, h, rng) for _ in range(config.loops)]
    return RbeModel(config, w_blocks, r_blocks, version_tag)


def clone_model(model: RbeModel) -> RbeModel:
    cfg = model.config
    dup = init_model(cfg, seed=0, version_tag=model.version_tag)
    for (_, src), (_, dst) in zip(model.named_blocks(), dup.named_blocks()):
        for f in _BLOCK_FIELDS:
            setattr(dst, f, getattr(src, f).copy())
    return dup


def sign_ste(x: np.ndarray):
    """Binarize with the straight-through convention.

    Returns ``(s, mask)`` where ``s`` is +1 for positive inputs and -1
    otherwise (zero maps to -1), and ``mask`` is 1 where ``|x| <= 1``,
    the region where the estimator passes gradient through.
    """
    s = np.where(x > 0, np.float32(1.0), np.float32(-1.0))
    mask = (np.abs(x) <= 1).astype(np.float32)
    return s, mask


def _smooth_norm(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return np.sqrt((x * x).sum(axis=-1, keepdims=True) + eps * eps)


class CodeBatch:
    """Binary codes for a batch of vectors.

    ``planes`` has shape (n, u + 1, m) with 0/1 entries: plane 0 is the
    base sign plane, plane i the i-th residual plane.  ``decoded`` is
    the float lattice value per dimension, ``inv_norms`` its reciprocal
    euclidean row norm.
    """

    def __init__(self, planes: np.ndarray, decoded: np.ndarray = None,
                 inv_norms: np.ndarray = None):
        self.planes = np.ascontiguousarray(planes, dtype=np.uint8)
        if self.planes.ndim != 3:
            raise ValueError("planes must have shape (n, u+1, m)")
        if decoded is None:
            decoded = decode_planes(self.planes)
        self.decoded = np.ascontiguousarray(decoded, dtype=np.float32)
        if inv_norms is None:
            inv_norms = (1.0 / np.linalg.norm(self.decoded, axis=1)).astype(np.float32)
        self.inv_norms = np.ascontiguousarray(inv_norms, dtype=np.float32)

    @property
    def count(self) -> int:
        return self.planes.shape[0]

    @property
    def loops(self) -> int:
        return self.planes.shape[1] - 1

    @property
    def code_dim(self) -> int:
        return self.planes.shape[2]

    def unit(self) -> np.ndarray:
        """Decoded codes scaled to unit norm."""
        return self.decoded * self.inv_norms[:, None]

    def select(self, rows) -> "CodeBatch":
        return CodeBatch(self.planes[rows], self.decoded[rows], self.inv_norms[rows])


def decode_planes(planes: np.ndarray) -> np.ndarray:
    """Weighted sum of sign planes, the float value each code stands for."""
    planes = np.asarray(planes)
    squeeze = planes.ndim == 2
    if squeeze:
        planes = planes[None]
    w = plane_weights(planes.shape[1] - 1)
    signs = planes.astype(np.float32) * 2.0 - 1.0
    out = np.einsum("npm,p->nm", signs, w).astype(np.float32)
    return out[0] if squeeze else out


class Tape:
    """Forward records needed by ``backward``; single use."""

    def __init__(self):
        self.loops = []
        self.base = {}
        self.used = False


def forward(model: RbeModel, x: np.ndarray, train: bool = False,
            keep_tape: bool = False):
    """Encode a batch of unit-norm float vectors.

    Returns ``(codes, tape)``; the tape is None unless requested.
    When ``train`` is true, batch norm uses batch statistics and running
    stats are updated in place.
    """
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != model.config.dim:
        raise ValueError("expected input of shape (n, %d)" % model.config.dim)
    tape = Tape() if keep_tape else None
    u = model.config.loops

    blk_tape = {} if keep_tape else None
    pre = model.w_blocks[0].forward(x, train, blk_tape)
    s, mask = sign_ste(pre)
    b_acc = s.copy()
    planes = np.empty((x.shape[0], u + 1, model.config.code_dim), dtype=np.uint8)
    planes[:, 0] = pre > 0
    if keep_tape:
        tape.base = {"blk": blk_tape, "mask": mask}

    for i in range(1, u + 1):
        r_tape = {} if keep_tape else None
        recon = model.r_blocks[i - 1].forward(b_acc, train, r_tape)
        norm = _smooth_norm(recon)
        fhat = recon / norm
        resid = x - fhat
        w_tape = {} if keep_tape else None
        pre_i = model.w_blocks[i].forward(resid, train, w_tape)
        s_i, mask_i = sign_ste(pre_i)
        planes[:, i] = pre_i > 0
        if keep_tape:
            tape.loops.append(
                {
                    "r_blk": r_tape,
                    "w_blk": w_tape,
                    "mask": mask_i,
                    "fhat": fhat.astype(np.float32),
                    "inv_norm": (1.0 / norm).astype(np.float32),
                }
            )
        b_acc = b_acc + np.float32(2.0 ** -i) * s_i

    decoded = b_acc.astype(np.float32)
    inv_norms = (1.0 / np.linalg.norm(decoded, axis=1)).astype(np.float32)
    codes = CodeBatch(planes, decoded, inv_norms)
    return codes, tape


def backward(model: RbeModel, tape: Tape, grad_decoded: np.ndarray):
    """Straight-through backward pass.

    ``grad_decoded`` is the loss gradient w.r.t. the decoded code values
    (n, m).  Returns ``(grads, grad_input)`` where ``grads`` maps
    trainable tensor names to arrays and ``grad_input`` is the gradient
    w.r.t. the float input batch.  The tape can only be used once.
    """
    if tape.used:
        raise RuntimeError("tape already consumed by a previous backward pass")
    tape.used = True
    u = model.config.loops
    if len(tape.loops) != u:
        raise RuntimeError("tape does not match model depth")

    grads = {}
    g_x = None
    g_b = np.ascontiguousarray(grad_decoded, dtype=np.float32)

    for i in range(u, 0, -1):
        entry = tape.loops[i - 1]
        # b_i = b_{i-1} + 2**-i * r; both terms see g_b
        g_pre = (np.float32(2.0 ** -i) * g_b) * entry["mask"]
        g_resid = model.w_blocks[i].backward(entry["w_blk"], g_pre, grads, "w%d" % i)
        if g_x is None:
            g_x = g_resid.copy()
        else:
            g_x += g_resid
        g_fhat = -g_resid
        # fhat = recon / norm with the smoothed norm; jacobian is
        # (I - fhat fhat^T) / norm applied row-wise
        fhat, inv_norm = entry["fhat"], entry["inv_norm"]
        inner = (g_fhat * fhat).sum(axis=1, keepdims=True)
        g_recon = (g_fhat - fhat * inner) * inv_norm
        g_b_from_r = model.r_blocks[i - 1].backward(
            entry["r_blk"], g_recon.astype(np.float32), grads, "r%d" % (i - 1)
        )
        g_b = g_b + g_b_from_r

    g_pre0 = g_b * tape.base["mask"]
    g_in = model.w_blocks[0].backward(tape.base["blk"], g_pre0, grads, "w0")
    g_x = g_in if g_x is None else g_x + g_in
    grads = {k: np.asarray(v, dtype=np.float32) for k, v in grads.items()}
    return grads, g_x.astype(np.float32)


def encode_batch(model: RbeModel, vectors: np.ndarray, batch_size: int = 4096) -> CodeBatch:
    """Encode in eval mode, chunked to bound peak memory."""
    vectors = np.ascontiguousarray(vectors, dtype=np.float32)
    if vectors.shape[0] == 0:
        u = model.config.loops
        return CodeBatch(
            np.empty((0, u + 1, model.config.code_dim), dtype=np.uint8),
            np.empty((0, model.config.code_dim), dtype=np.float32),
            np.empty(0, dtype=np.float32),
        )
    parts = []
    for start in range(0, vectors.shape[0], batch_size):
        codes, _ = forward(model, vectors[start : start + batch_size], train=False)
        parts.append(codes)
    planes = np.concatenate([p.planes for p in parts], axis=0)
    decoded = np.concatenate([p.decoded for p in parts], axis=0)
    inv_norms = np.concatenate([p.inv_norms for p in parts], axis=0)
    return CodeBatch(planes, decoded, inv_norms)


def save_model(path, model: RbeModel) -> None:
    cfg = model.config
    tag = model.version_tag.encode("utf-8")
    with open(str(path), "wb") as f:
        w = ChecksumWriter(f)
        w.write(RBEM_MAGIC)
        w.write(
            struct.pack(
                "<HIIIIH",
                RBEM_VERSION,
                cfg.dim,
                cfg.code_dim,
                cfg.loops,
                cfg.hidden,
                len(tag),
            )
        )
        w.write(tag)
        w.start_payload()
        for _, blk in model.named_blocks():
            for fname in _BLOCK_FIELDS:
                w.write(getattr(blk, fname).astype("<f4", copy=False))
        w.finish()


def load_model(path) -> RbeModel:
    with open(str(path), "rb") as f:
        check_magic(f, RBEM_MAGIC)
        version, d, m, u, h, tag_len = struct.unpack("<HIIIIH", read_exact(f, 20))
        if version != RBEM_VERSION:
            raise ValueError("unsupported checkpoint version %d" % version)
        tag = read_exact(f, tag_len).decode("utf-8")
        payload = f.read()
    if len(payload) < 4:
        raise ValueError("truncated checkpoint")
    payload, stored = payload[:-4], struct.unpack("<I", payload[-4:])[0]
    if crc32c(payload) != stored:
        raise ValueError("checksum mismatch in checkpoint %s" % path)

    cfg = ModelConfig(dim=d, code_dim=m, loops=u, hidden=h)
    model = init_model(cfg, seed=0, version_tag=tag)
    off = 0
    buf = np.frombuffer(payload, dtype="<f4")
    for _, blk in model.named_blocks():
        for fname in _BLOCK_FIELDS:
            shape = getattr(blk, fname).shape
            size = int(np.prod(shape))
            setattr(blk, fname, buf[off : off + size].reshape(shape).astype(np.float32))
            off += size
    if off != buf.size:
        raise ValueError("checkpoint payload size mismatch")
    return model
