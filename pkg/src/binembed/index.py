"""Top-k retrieval structures over packed codes.

Two index types are provided: an exhaustive flat index and a two-layer
inverted-file (IVF) index whose coarse layer is a k-means quantizer.
Cluster assignment happens offline on the float embeddings; at query
time both the coarse and fine layers score binary codes with the chosen
kernel.  All search paths break score ties by ascending id, which makes
cross-kernel and shard-invariance properties exactly assertable.

Indexes are immutable after build; searches are read-only and safe to
run concurrently.  A scan may be partitioned into shards and the partial
results combined with :func:`merge_topk`.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import codec, kernels
from .embstore import EmbeddingSet, load_embeddings, save_embeddings
from .model import CodeBatch, RbeModel, encode_batch

MANIFEST_NAME = "manifest.txt"
_KERNEL_ALIASES = {
    "reference": "reference",
    "bitwise": "bitwise",
    "sdc-exact": "sdc-exact",
    "sdc_exact": "sdc-exact",
    "sdc-q8": "sdc-q8",
    "sdc_q8": "sdc-q8",
}


def normalize_kernel(name: str) -> str:
    try:
        return _KERNEL_ALIASES[name]
    except KeyError:
        raise ValueError("unknown kernel %r (choose from %s)"
                         % (name, ", ".join(kernels.KERNEL_CHOICES)))


# ------------------------------------------------------------------ top-k


@dataclass
class TopK:
    """Up to k (id, score) results, sorted by score desc then id asc."""

    k: int
    ids: np.ndarray
    scores: np.ndarray

    @classmethod
    def empty(cls, k: int) -> "TopK":
        return cls(int(k), np.empty(0, dtype=np.uint64), np.empty(0, dtype=np.float64))

    @classmethod
    def from_scores(cls, scores: np.ndarray, ids: np.ndarray, k: int) -> "TopK":
        pos = kernels.topk_positions(scores, ids, k)
        return cls(int(k),
                   np.asarray(ids, dtype=np.uint64)[pos],
                   np.asarray(scores, dtype=np.float64)[pos])

    def __len__(self) -> int:
        return self.ids.shape[0]


def merge_topk(partials, k: int) -> TopK:
    """Combine shard results; equals the top-k of the concatenation."""
    parts = [p for p in partials if len(p)]
    if not parts:
        return TopK.empty(k)
    ids = np.concatenate([p.ids for p in parts])
    scores = np.concatenate([p.scores for p in parts])
    return TopK.from_scores(scores, ids, k)


# ------------------------------------------------------------- flat index


class FlatIndex:
    """Exhaustive index: packed store plus arrays derived for each kernel.

    The packed nibble store is the canonical payload; plane words (for
    the popcount kernel) and scaled ints (for the reference kernel) are
    re-derived from it deterministically on build and load.
    """

    def __init__(self, store: codec.PackedStore, ids: np.ndarray):
        self.store = store
        self.ids = np.ascontiguousarray(ids, dtype=np.uint64)
        if self.ids.shape != (store.count,):
            raise ValueError("ids must align with stored vectors")
        if np.unique(self.ids).shape[0] != self.ids.shape[0]:
            raise ValueError("duplicate ids in index")
        self._derive()

    def _derive(self) -> None:
        n = self.store.count
        if n:
            planes = np.concatenate(
                [codec.unpack_block(b)[0] for b in self.store.blocks()])
        else:
            planes = np.zeros((0, self.store.B, self.store.m), dtype=np.uint8)
        self.inv_norms = self.store.inv_norms[:n]
        self.planes = codec.PlaneMatrix(
            codec._pack_bits_u64(planes), self.store.m, self.inv_norms)
        self.ints = codec.to_scaled_int(planes)

    @property
    def count(self) -> int:
        return self.store.count

    @property
    def m(self) -> int:
        return self.store.m

    @property
    def B(self) -> int:
        return self.store.B


def build_flat(codes: CodeBatch, ids: np.ndarray, norm_mode: str = "f32") -> FlatIndex:
    """Pack a batch of codes into an exhaustive index."""
    return FlatIndex(codec.pack_store(codes, norm_mode=norm_mode), ids)


def _query_parts(query: CodeBatch, row: int = 0):
    q_planes = query.planes[row]
    q_ints = codec.to_scaled_int(q_planes[None, :, :])[0]
    q_words = codec._pack_bits_u64(q_planes[None, :, :])[0]
    inv_q = float(query.inv_norms[row])
    return q_planes, q_ints, q_words, inv_q


def _check_query(query: CodeBatch, m: int, B: int) -> None:
    if query.count < 1:
        raise ValueError("empty query batch")
    if query.code_dim != m or query.planes.shape[1] != B:
        raise ValueError("query geometry (m=%d, B=%d) does not match index (m=%d, B=%d)"
                         % (query.code_dim, query.planes.shape[1], m, B))


def _scan_scores(index: FlatIndex, query: CodeBatch, row: int, kernel: str) -> np.ndarray:
    """Cosine scores of one query against every vector in a flat index."""
    _, q_ints, q_words, inv_q = _query_parts(query, row)
    u = index.B - 1
    if kernel == "reference":
        dots = kernels.scan_reference(q_ints, index.ints)
        return kernels.finish_scores(dots, inv_q, index.inv_norms, u)
    if kernel == "bitwise":
        dots = kernels.scan_bitwise(q_words, index.planes)
        return kernels.finish_scores(dots, inv_q, index.inv_norms, u)
    mode = "exact" if kernel == "sdc-exact" else "q8"
    lut = kernels.build_lut(q_ints, index.B, mode=mode, inv_norm=inv_q)
    return kernels.scan_sdc(lut, index.store).scores


def search_flat(index: FlatIndex, query: CodeBatch, k: int,
                kernel: str = "sdc-exact", row: int = 0) -> TopK:
    """Exhaustive top-k search with the chosen kernel."""
    kernel = normalize_kernel(kernel)
    _check_query(query, index.m, index.B)
    if index.count == 0 or k <= 0:
        return TopK.empty(k)
    scores = _scan_scores(index, query, row, kernel)
    return TopK.from_scores(scores, index.ids, k)


# ----------------------------------------------------------------- kmeans


def kmeans(vectors, n_list: int, iters: int = 20, seed: int = 0) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding on float embeddings.

    Deterministic per seed; empty clusters are re-seeded from the point
    farthest from its assigned centroid.  Returns (n_list, dim) float32.
    """
    if isinstance(vectors, EmbeddingSet):
        vectors = vectors.vectors
    x = np.asarray(vectors, dtype=np.float64)
    n, d = x.shape
    if n_list < 1 or n_list > n:
        raise ValueError("n_list must be in [1, %d], got %d" % (n, n_list))
    rng = np.random.default_rng(seed)
    sq = np.einsum("ij,ij->i", x, x)

    # k-means++ seeding: squared-distance-proportional sampling
    centroids = np.empty((n_list, d), dtype=np.float64)
    centroids[0] = x[rng.integers(n)]
    best = sq + np.einsum("j,j->", centroids[0], centroids[0]) - 2.0 * (x @ centroids[0])
    np.maximum(best, 0.0, out=best)
    for c in range(1, n_list):
        total = best.sum()
        if total <= 0.0:
            pick = int(rng.integers(n))
        else:
            pick = int(rng.choice(n, p=best / total))
        centroids[c] = x[pick]
        dist = sq + np.einsum("j,j->", centroids[c], centroids[c]) - 2.0 * (x @ centroids[c])
        np.maximum(dist, 0.0, out=dist)
        np.minimum(best, dist, out=best)

    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max(1, iters)):
        d2 = _pairwise_sq(x, sq, centroids)
        assign = np.argmin(d2, axis=1)
        mind = d2[np.arange(n), assign]
        for c in range(n_list):
            members = assign == c
            if members.any():
                centroids[c] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(mind))
                centroids[c] = x[far]
                assign[far] = c
                mind[far] = 0.0
    return centroids.astype(np.float32)


def _pairwise_sq(x: np.ndarray, sq: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = sq[:, None] + np.einsum("ij,ij->i", centroids, centroids)[None, :]
    d2 -= 2.0 * (x @ centroids.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def assign_to_centroids(vectors: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest centroid per vector by float euclidean distance."""
    x = np.asarray(vectors, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    sq = np.einsum("ij,ij->i", x, x)
    return np.argmin(_pairwise_sq(x, sq, c), axis=1)


def kmeans_inertia(vectors: np.ndarray, centroids: np.ndarray) -> float:
    x = np.asarray(vectors, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    sq = np.einsum("ij,ij->i", x, x)
    return float(_pairwise_sq(x, sq, c).min(axis=1).sum())


# -------------------------------------------------------------- IVF index


class IvfIndex:
    """Inverted-file index: coarse centroids plus per-list flat indexes.

    Centroids are kept both as floats (assignment fidelity, build-time
    only) and as binary codes so query-time coarse scoring runs on the
    same kernels as the fine layer.
    """

    def __init__(self, centroids: np.ndarray, centroid_index: FlatIndex,
                 lists: list, n_probe_default: int = None):
        self.centroids = np.ascontiguousarray(centroids, dtype=np.float32)
        self.centroid_index = centroid_index
        self.lists = lists
        self.n_list = len(lists)
        if centroid_index.count != self.n_list:
            raise ValueError("centroid codes do not match list count")
        if n_probe_default is None:
            n_probe_default = max(1, self.n_list // 16)
        self.n_probe_default = int(n_probe_default)

    @property
    def count(self) -> int:
        return sum(lst.count for lst in self.lists)

    @property
    def m(self) -> int:
        return self.centroid_index.m

    @property
    def B(self) -> int:
        return self.centroid_index.B


def default_n_list(count: int) -> int:
    return max(1, int(round(count ** 0.5)))


def build_ivf(floats, codes: CodeBatch, ids: np.ndarray, n_list: int,
              model: RbeModel, norm_mode: str = "f32", iters: int = 20,
              seed: int = 0) -> IvfIndex:
    """Cluster float embeddings, bucket codes by nearest centroid.

    ``floats`` and ``codes`` must be aligned row by row; ``model`` is the
    encoder used for the stored codes, applied here to the centroids so
    the coarse layer can be scored on binary codes.
    """
    if isinstance(floats, EmbeddingSet):
        floats = floats.vectors
    floats = np.asarray(floats, dtype=np.float32)
    ids = np.ascontiguousarray(ids, dtype=np.uint64)
    if floats.shape[0] != codes.count or ids.shape[0] != codes.count:
        raise ValueError("floats, codes and ids must align")
    if codes.count == 0:
        raise ValueError("cannot build an IVF index with no vectors")
    if np.unique(ids).shape[0] != ids.shape[0]:
        raise ValueError("duplicate ids in index")
    if codes.code_dim != model.config.code_dim or codes.planes.shape[1] != model.config.planes:
        raise ValueError("codes do not match the model geometry")

    centroids = kmeans(floats, n_list, iters=iters, seed=seed)
    assign = assign_to_centroids(floats, centroids)
    lists = []
    for c in range(n_list):
        rows = np.flatnonzero(assign == c)
        lists.append(FlatIndex(
            codec.pack_store(codes.select(rows), norm_mode=norm_mode), ids[rows]))
    cent_codes = encode_batch(model, centroids)
    cent_ids = np.arange(n_list, dtype=np.uint64)
    centroid_index = FlatIndex(
        codec.pack_store(cent_codes, norm_mode=norm_mode), cent_ids)
    return IvfIndex(centroids, centroid_index, lists)


def search_ivf(index: IvfIndex, query: CodeBatch, k: int,
               n_probe: int = None, kernel: str = "sdc-exact",
               row: int = 0) -> TopK:
    """Probe the nearest coarse lists, scan them, merge the partials."""
    kernel = normalize_kernel(kernel)
    _check_query(query, index.m, index.B)
    if n_probe is None:
        n_probe = index.n_probe_default
    if not 1 <= n_probe <= index.n_list:
        raise ValueError("n_probe must be in [1, %d], got %d" % (index.n_list, n_probe))
    if k <= 0:
        return TopK.empty(k)
    coarse = search_flat(index.centroid_index, query, n_probe, kernel, row)
    partials = [search_flat(index.lists[int(c)], query, k, kernel, row)
                for c in coarse.ids]
    return merge_topk(partials, k)


# ------------------------------------------------------------ persistence


def _write_manifest(path, entries) -> None:
    with open(path, "w") as f:
        for key, value in entries:
            f.write("%s=%s\n" % (key, value))


def _read_manifest(path) -> dict:
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line and "=" in line:
                key, value = line.split("=", 1)
                out[key] = value
    return out


def _write_ids(path, ids: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(ids, dtype="<u8").tobytes())


def _read_ids(path, count: int) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) != 8 * count:
        raise ValueError("id file %s has %d bytes, expected %d"
                         % (path, len(data), 8 * count))
    return np.frombuffer(data, dtype="<u8").astype(np.uint64)


def save_index(index, dirpath) -> None:
    """Write a flat or IVF index as a directory of files."""
    dirpath = str(dirpath)
    os.makedirs(dirpath, exist_ok=True)
    if isinstance(index, FlatIndex):
        codec.save_segment(os.path.join(dirpath, "codes.rbei"), index.store)
        _write_ids(os.path.join(dirpath, "codes.ids"), index.ids)
        _write_manifest(os.path.join(dirpath, MANIFEST_NAME), [
            ("type", "flat"),
            ("m", index.m),
            ("B", index.B),
            ("norm_mode", index.store.norm_mode),
            ("count", index.count),
            ("kernel_default", "sdc-exact"),
        ])
        return
    if not isinstance(index, IvfIndex):
        raise TypeError("expected FlatIndex or IvfIndex")
    cent = EmbeddingSet(
        np.arange(index.n_list, dtype=np.uint64), index.centroids)
    save_embeddings(os.path.join(dirpath, "centroids.embf"), cent)
    codec.save_segment(os.path.join(dirpath, "centroid_codes.rbei"),
                       index.centroid_index.store)
    offsets = []
    with open(os.path.join(dirpath, "postings.rbei"), "wb") as f:
        for lst in index.lists:
            start = f.tell()
            codec.write_segment(f, lst.store)
            offsets.append((start, f.tell() - start, lst.count))
    with open(os.path.join(dirpath, "postings.ids"), "wb") as f:
        for lst in index.lists:
            f.write(np.ascontiguousarray(lst.ids, dtype="<u8").tobytes())
    with open(os.path.join(dirpath, "postings.offsets"), "w") as f:
        f.write("list,offset,nbytes,count\n")
        for i, (off, nbytes, cnt) in enumerate(offsets):
            f.write("%d,%d,%d,%d\n" % (i, off, nbytes, cnt))
    _write_manifest(os.path.join(dirpath, MANIFEST_NAME), [
        ("type", "ivf"),
        ("m", index.m),
        ("B", index.B),
        ("norm_mode", index.centroid_index.store.norm_mode),
        ("count", index.count),
        ("n_list", index.n_list),
        ("n_probe_default", index.n_probe_default),
        ("kernel_default", "sdc-exact"),
    ])


def load_index(dirpath):
    """Load an index directory written by :func:`save_index`."""
    dirpath = str(dirpath)
    manifest = _read_manifest(os.path.join(dirpath, MANIFEST_NAME))
    kind = manifest.get("type")
    if kind == "flat":
        store = codec.load_segment(os.path.join(dirpath, "codes.rbei"))
        ids = _read_ids(os.path.join(dirpath, "codes.ids"), store.count)
        return FlatIndex(store, ids)
    if kind != "ivf":
        raise ValueError("manifest %s has unknown index type %r"
                         % (os.path.join(dirpath, MANIFEST_NAME), kind))
    cent = load_embeddings(os.path.join(dirpath, "centroids.embf"))
    cent_store = codec.load_segment(os.path.join(dirpath, "centroid_codes.rbei"))
    centroid_index = FlatIndex(
        cent_store, np.arange(cent_store.count, dtype=np.uint64))
    rows = []
    with open(os.path.join(dirpath, "postings.offsets")) as f:
        next(f)
        for line in f:
            if line.strip():
                _, off, nbytes, cnt = line.strip().split(",")
                rows.append((int(off), int(nbytes), int(cnt)))
    lists = []
    id_pos = 0
    all_ids = _read_ids(os.path.join(dirpath, "postings.ids"),
                        sum(r[2] for r in rows))
    with open(os.path.join(dirpath, "postings.rbei"), "rb") as f:
        for off, _, cnt in rows:
            f.seek(off)
            store = codec.read_segment(f, name="postings.rbei@%d" % off)
            if store.count != cnt:
                raise ValueError("posting list count mismatch at offset %d" % off)
            lists.append(FlatIndex(store, all_ids[id_pos:id_pos + cnt]))
            id_pos += cnt
    return IvfIndex(cent.vectors, centroid_index, lists,
                    n_probe_default=int(manifest.get("n_probe_default", 0)) or None)
