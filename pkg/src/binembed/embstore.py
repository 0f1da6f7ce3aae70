"""Float embedding storage and synthetic benchmark data.

Three small little endian container formats:

``EMBF`` float embeddings::

    magic "EMBF" | version u16=1 | flags u16=0 | count u64 | dim u32 |
    reserved u32 | count*dim float32 row-major | crc32c of payload, u32

Row ids live next to the vectors in a ``<path>.ids`` sidecar holding
``count`` raw u64 values, so the vector payload stays a plain matrix
that can be memory-mapped.

``EMBP`` anchor/positive pairs::

    magic "EMBP" | count u64 | count * (anchor u64, positive u64)

``EMBG`` ground truth::

    magic "EMBG" | num_queries u64 | per query: qid u64, n u32, n * u64

The synthetic generator makes clustered unit vectors: cluster centers
drawn uniformly on the sphere, members = center + gaussian noise,
renormalized.  Pairs link each member to the next member of its cluster
(cyclic), and the ground truth for a member is exactly its siblings.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from ._binio import ChecksumWriter, check_magic, crc32c, read_exact, verify_trailer

EMBF_MAGIC = b"EMBF"
EMBP_MAGIC = b"EMBP"
EMBG_MAGIC = b"EMBG"
FORMAT_VERSION = 1


@dataclass
class EmbeddingSet:
    """Float32 vectors with stable u64 row ids."""

    ids: np.ndarray
    vectors: np.ndarray
    _row_of: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint64)
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be 2-d, got shape %r" % (self.vectors.shape,))
        if self.ids.shape != (self.vectors.shape[0],):
            raise ValueError(
                "ids/vectors length mismatch: %d vs %d"
                % (self.ids.shape[0], self.vectors.shape[0])
            )

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def validate(self) -> None:
        if not np.isfinite(self.vectors).all():
            raise ValueError("embeddings contain non-finite values")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("duplicate row ids")

    def row_of(self, id_: int) -> int:
        if self._row_of is None:
            self._row_of = {int(v): i for i, v in enumerate(self.ids)}
        return self._row_of[int(id_)]

    def rows_of(self, ids: np.ndarray) -> np.ndarray:
        return np.array([self.row_of(i) for i in np.asarray(ids).ravel()], dtype=np.int64)


@dataclass
class PairList:
    """Anchor/positive id pairs for contrastive training."""

    anchor_ids: np.ndarray
    positive_ids: np.ndarray

    def __post_init__(self):
        self.anchor_ids = np.ascontiguousarray(self.anchor_ids, dtype=np.uint64)
        self.positive_ids = np.ascontiguousarray(self.positive_ids, dtype=np.uint64)
        if self.anchor_ids.shape != self.positive_ids.shape:
            raise ValueError("anchor/positive length mismatch")

    def __len__(self) -> int:
        return len(self.anchor_ids)

    def validate(self, embeddings: EmbeddingSet = None) -> None:
        if np.any(self.anchor_ids == self.positive_ids):
            raise ValueError("pair list links an id to itself")
        if embeddings is not None:
            known = set(int(v) for v in embeddings.ids)
            for arr in (self.anchor_ids, self.positive_ids):
                for v in arr:
                    if int(v) not in known:
                        raise ValueError("pair references unknown id %d" % int(v))


class GroundTruth:
    """Mapping from query id to the ids that count as correct results."""

    def __init__(self, relevant: dict = None):
        self.relevant = {}
        if relevant:
            for qid, ids in relevant.items():
                self.relevant[int(qid)] = np.ascontiguousarray(ids, dtype=np.uint64)

    def __len__(self) -> int:
        return len(self.relevant)

    def __getitem__(self, qid: int) -> np.ndarray:
        return self.relevant[int(qid)]

    def query_ids(self) -> list:
        return sorted(self.relevant.keys())


def save_embeddings(path, embeddings: EmbeddingSet) -> None:
    embeddings.validate()
    path = str(path)
    with open(path, "wb") as f:
        w = ChecksumWriter(f)
        w.write(EMBF_MAGIC)
        w.write(struct.pack("<HHQII", FORMAT_VERSION, 0, embeddings.count, embeddings.dim, 0))
        w.start_payload()
        w.write(embeddings.vectors.astype("<f4", copy=False))
        w.finish()
    with open(path + ".ids", "wb") as f:
        f.write(embeddings.ids.astype("<u8", copy=False).tobytes())


def load_embeddings(path) -> EmbeddingSet:
    path = str(path)
    with open(path, "rb") as f:
        check_magic(f, EMBF_MAGIC)
        version, _flags, count, dim, _reserved = struct.unpack("<HHQII", read_exact(f, 20))
        if version != FORMAT_VERSION:
            raise ValueError("unsupported embeddings format version %d" % version)
        payload = read_exact(f, count * dim * 4)
        verify_trailer(f, crc32c(payload))
    vectors = np.frombuffer(payload, dtype="<f4").reshape(count, dim).copy()
    with open(path + ".ids", "rb") as f:
        ids = np.frombuffer(read_exact(f, count * 8), dtype="<u8").copy()
    out = EmbeddingSet(ids=ids, vectors=vectors)
    out.validate()
    return out


def save_pairs(path, pairs: PairList) -> None:
    pairs.validate()
    with open(str(path), "wb") as f:
        f.write(EMBP_MAGIC)
        f.write(struct.pack("<Q", len(pairs)))
        interleaved = np.empty((len(pairs), 2), dtype="<u8")
        interleaved[:, 0] = pairs.anchor_ids
        interleaved[:, 1] = pairs.positive_ids
        f.write(interleaved.tobytes())


def load_pairs(path) -> PairList:
    with open(str(path), "rb") as f:
        check_magic(f, EMBP_MAGIC)
        (count,) = struct.unpack("<Q", read_exact(f, 8))
        payload = read_exact(f, count * 16)
    flat = np.frombuffer(payload, dtype="<u8").reshape(count, 2)
    return PairList(anchor_ids=flat[:, 0].copy(), positive_ids=flat[:, 1].copy())


def save_truth(path, truth: GroundTruth) -> None:
    with open(str(path), "wb") as f:
        f.write(EMBG_MAGIC)
        f.write(struct.pack("<Q", len(truth)))
        for qid in truth.query_ids():
            ids = truth[qid]
            f.write(struct.pack("<QI", qid, len(ids)))
            f.write(ids.astype("<u8", copy=False).tobytes())


def load_truth(path) -> GroundTruth:
    with open(str(path), "rb") as f:
        check_magic(f, EMBG_MAGIC)
        (nq,) = struct.unpack("<Q", read_exact(f, 8))
        payload = f.read()
    relevant = {}
    off = 0
    for _ in range(nq):
        if off + 12 > len(payload):
            raise ValueError("truncated ground truth payload")
        qid, n = struct.unpack_from("<QI", payload, off)
        off += 12
        if off + n * 8 > len(payload):
            raise ValueError("truncated ground truth payload")
        ids = np.frombuffer(payload, dtype="<u8", count=n, offset=off).copy()
        off += n * 8
        relevant[qid] = ids
    if off != len(payload):
        raise ValueError("trailing bytes in ground truth payload")
    return GroundTruth(relevant)


def l2_normalize_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, eps)


def gen_synthetic(
    num_clusters: int,
    per_cluster: int,
    dim: int,
    noise_sigma: float = 0.1,
    seed: int = 0,
):
    """Clustered unit vectors with sibling pairs and sibling ground truth.

    Returns ``(embeddings, pairs, truth)``.  Ids are contiguous starting
    at 0, cluster by cluster.  With ``per_cluster == 1`` the pair list
    and the ground truth are empty.
    """
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_clusters, dim)).astype(np.float32)
    centers = l2_normalize_rows(centers)
    noise = rng.standard_normal((num_clusters, per_cluster, dim)).astype(np.float32)
    members = centers[:, None, :] + noise_sigma * noise
    vectors = l2_normalize_rows(members.reshape(-1, dim)).astype(np.float32)
    n = num_clusters * per_cluster
    ids = np.arange(n, dtype=np.uint64)

    if per_cluster > 1:
        grid = ids.reshape(num_clusters, per_cluster)
        anchors = grid.ravel()
        positives = np.roll(grid, -1, axis=1).ravel()
        pairs = PairList(anchor_ids=anchors.copy(), positive_ids=positives.copy())
        relevant = {}
        for c in range(num_clusters):
            row = grid[c]
            for j in range(per_cluster):
                relevant[int(row[j])] = np.delete(row, j)
        truth = GroundTruth(relevant)
    else:
        pairs = PairList(
            anchor_ids=np.empty(0, dtype=np.uint64),
            positive_ids=np.empty(0, dtype=np.uint64),
        )
        truth = GroundTruth()

    return EmbeddingSet(ids=ids, vectors=vectors), pairs, truth


def perturb_embeddings(
    embeddings: EmbeddingSet, drift_sigma: float, seed: int = 0
) -> EmbeddingSet:
    """Model an upgraded feature backbone: same ids, drifted vectors.

    Adds isotropic gaussian noise and renormalizes, so the drifted set
    stays on the unit sphere but its codes no longer match codes built
    from the original vectors.
    """
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(embeddings.vectors.shape).astype(np.float32)
    drifted = l2_normalize_rows(embeddings.vectors + drift_sigma * noise)
    return EmbeddingSet(ids=embeddings.ids.copy(), vectors=drifted.astype(np.float32))
