"""Round-trip, checksum, and synthetic data tests for the storage module."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from binembed import embstore
from binembed._binio import _crc_update_py, crc32c


# Published check values: the catalogued CRC-32/ISCSI result for the ASCII
# string "123456789", and the all-zero / incrementing-byte vectors from the
# iSCSI RFC test set.
def test_crc32c_check_value():
    assert crc32c(b"123456789") == 0xE3069283


def test_crc32c_rfc_vectors():
    assert crc32c(bytes(32)) == 0x8A9136AA
    assert crc32c(bytes(range(32))) == 0x46DD794E


def test_crc32c_empty():
    assert crc32c(b"") == 0


def test_crc32c_incremental_matches_whole():
    data = bytes(range(256)) * 7
    c = 0
    for start in range(0, len(data), 61):
        c = crc32c(data[start : start + 61], c)
    assert c == crc32c(data)


def test_crc32c_ndarray_matches_bytes():
    rng = np.random.default_rng(0)
    arr = rng.integers(0, 256, size=1000, dtype=np.uint8)
    assert crc32c(arr) == crc32c(arr.tobytes())


@given(st.binary(min_size=0, max_size=300))
@settings(max_examples=200, deadline=None)
def test_crc32c_python_fallback_agrees(data):
    # the pure python slice-by-8 loop and the default path must agree
    c_py = (_crc_update_py(data, 0xFFFFFFFF) ^ 0xFFFFFFFF) & 0xFFFFFFFF
    assert c_py == crc32c(data)


def _random_set(n, d, seed=0):
    rng = np.random.default_rng(seed)
    vecs = rng.standard_normal((n, d)).astype(np.float32)
    ids = rng.permutation(np.arange(1000, 1000 + n)).astype(np.uint64)
    return embstore.EmbeddingSet(ids=ids, vectors=vecs)


def test_embeddings_roundtrip(tmp_path):
    es = _random_set(17, 9)
    path = tmp_path / "a.embf"
    embstore.save_embeddings(path, es)
    back = embstore.load_embeddings(path)
    assert np.array_equal(back.ids, es.ids)
    assert np.array_equal(back.vectors, es.vectors)


def test_embeddings_empty_file_layout(tmp_path):
    es = embstore.EmbeddingSet(
        ids=np.empty(0, dtype=np.uint64), vectors=np.empty((0, 5), dtype=np.float32)
    )
    path = tmp_path / "empty.embf"
    embstore.save_embeddings(path, es)
    # 24 byte header, no payload, 4 byte checksum
    assert path.stat().st_size == 28
    back = embstore.load_embeddings(path)
    assert back.count == 0 and back.dim == 5


def test_embeddings_corruption_detected(tmp_path):
    es = _random_set(8, 4)
    path = tmp_path / "c.embf"
    embstore.save_embeddings(path, es)
    raw = bytearray(path.read_bytes())
    raw[24 + 7] ^= 0x10  # flip one payload bit
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="checksum"):
        embstore.load_embeddings(path)


def test_embeddings_truncation_detected(tmp_path):
    es = _random_set(8, 4)
    path = tmp_path / "t.embf"
    embstore.save_embeddings(path, es)
    raw = path.read_bytes()
    path.write_bytes(raw[:-9])
    with pytest.raises(ValueError):
        embstore.load_embeddings(path)


def test_embeddings_bad_magic(tmp_path):
    path = tmp_path / "m.embf"
    path.write_bytes(b"NOPE" + bytes(32))
    with pytest.raises(ValueError, match="magic"):
        embstore.load_embeddings(path)


def test_embeddings_reject_nan(tmp_path):
    vecs = np.ones((3, 2), dtype=np.float32)
    vecs[1, 0] = np.nan
    es = embstore.EmbeddingSet(ids=np.arange(3, dtype=np.uint64), vectors=vecs)
    with pytest.raises(ValueError, match="finite"):
        embstore.save_embeddings(tmp_path / "x.embf", es)


def test_embeddings_reject_duplicate_ids(tmp_path):
    es = embstore.EmbeddingSet(
        ids=np.array([1, 1, 2], dtype=np.uint64),
        vectors=np.ones((3, 2), dtype=np.float32),
    )
    with pytest.raises(ValueError, match="duplicate"):
        embstore.save_embeddings(tmp_path / "x.embf", es)


@given(
    n=st.integers(min_value=0, max_value=40),
    d=st.integers(min_value=1, max_value=16),
    seed=st.integers(min_value=0, max_value=2**31),
)
@settings(max_examples=25, deadline=None)
def test_embeddings_roundtrip_property(tmp_path_factory, n, d, seed):
    es = _random_set(n, d, seed)
    path = tmp_path_factory.mktemp("rt") / "p.embf"
    embstore.save_embeddings(path, es)
    back = embstore.load_embeddings(path)
    assert np.array_equal(back.ids, es.ids)
    assert np.array_equal(back.vectors, es.vectors)


def test_pairs_roundtrip(tmp_path):
    pairs = embstore.PairList(
        anchor_ids=np.array([5, 6, 7], dtype=np.uint64),
        positive_ids=np.array([6, 7, 5], dtype=np.uint64),
    )
    path = tmp_path / "p.embp"
    embstore.save_pairs(path, pairs)
    back = embstore.load_pairs(path)
    assert np.array_equal(back.anchor_ids, pairs.anchor_ids)
    assert np.array_equal(back.positive_ids, pairs.positive_ids)


def test_pairs_reject_self_pair():
    pairs = embstore.PairList(
        anchor_ids=np.array([3], dtype=np.uint64),
        positive_ids=np.array([3], dtype=np.uint64),
    )
    with pytest.raises(ValueError, match="itself"):
        pairs.validate()


def test_pairs_truncation_detected(tmp_path):
    pairs = embstore.PairList(
        anchor_ids=np.arange(10, dtype=np.uint64),
        positive_ids=np.arange(10, dtype=np.uint64) + 100,
    )
    path = tmp_path / "p.embp"
    embstore.save_pairs(path, pairs)
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(ValueError, match="truncated"):
        embstore.load_pairs(path)


def test_truth_roundtrip(tmp_path):
    truth = embstore.GroundTruth(
        {
            0: np.array([1, 2, 3], dtype=np.uint64),
            7: np.array([9], dtype=np.uint64),
            3: np.array([0, 7], dtype=np.uint64),
        }
    )
    path = tmp_path / "g.embg"
    embstore.save_truth(path, truth)
    back = embstore.load_truth(path)
    assert back.query_ids() == [0, 3, 7]
    for qid in truth.query_ids():
        assert np.array_equal(back[qid], truth[qid])


def test_truth_truncation_detected(tmp_path):
    truth = embstore.GroundTruth({0: np.array([1, 2], dtype=np.uint64)})
    path = tmp_path / "g.embg"
    embstore.save_truth(path, truth)
    raw = path.read_bytes()
    path.write_bytes(raw[:-6])
    with pytest.raises(ValueError, match="truncated"):
        embstore.load_truth(path)


@given(
    st.dictionaries(
        st.integers(min_value=0, max_value=10**6),
        st.lists(st.integers(min_value=0, max_value=10**9), min_size=1, max_size=8),
        max_size=12,
    )
)
@settings(max_examples=30, deadline=None)
def test_truth_roundtrip_property(tmp_path_factory, mapping):
    truth = embstore.GroundTruth(
        {q: np.array(ids, dtype=np.uint64) for q, ids in mapping.items()}
    )
    path = tmp_path_factory.mktemp("gt") / "g.embg"
    embstore.save_truth(path, truth)
    back = embstore.load_truth(path)
    assert back.query_ids() == truth.query_ids()
    for qid in truth.query_ids():
        assert np.array_equal(back[qid], truth[qid])


def test_gen_synthetic_shapes_and_norms():
    es, pairs, truth = embstore.gen_synthetic(5, 4, dim=16, noise_sigma=0.1, seed=3)
    assert es.count == 20 and es.dim == 16
    norms = np.linalg.norm(es.vectors, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-5)
    assert len(pairs) == 20
    assert len(truth) == 20


def test_gen_synthetic_pairs_are_cyclic_siblings():
    es, pairs, truth = embstore.gen_synthetic(3, 4, dim=8, seed=1)
    # member j of cluster c has id 4*c + j and its positive is 4*c + (j+1) % 4
    for a, p in zip(pairs.anchor_ids, pairs.positive_ids):
        c, j = divmod(int(a), 4)
        assert int(p) == 4 * c + (j + 1) % 4
    pairs.validate(es)


def test_gen_synthetic_truth_is_sibling_set():
    _, _, truth = embstore.gen_synthetic(3, 3, dim=8, seed=1)
    for qid in truth.query_ids():
        cluster = int(qid) // 3
        expected = {3 * cluster + j for j in range(3)} - {int(qid)}
        assert set(int(x) for x in truth[qid]) == expected


def test_gen_synthetic_deterministic():
    a = embstore.gen_synthetic(4, 3, dim=8, noise_sigma=0.2, seed=9)
    b = embstore.gen_synthetic(4, 3, dim=8, noise_sigma=0.2, seed=9)
    assert np.array_equal(a[0].vectors, b[0].vectors)
    assert np.array_equal(a[1].anchor_ids, b[1].anchor_ids)
    c = embstore.gen_synthetic(4, 3, dim=8, noise_sigma=0.2, seed=10)
    assert not np.array_equal(a[0].vectors, c[0].vectors)


def test_gen_synthetic_singleton_clusters():
    es, pairs, truth = embstore.gen_synthetic(6, 1, dim=4, seed=0)
    assert es.count == 6
    assert len(pairs) == 0
    assert len(truth) == 0


def test_perturb_keeps_ids_and_norms():
    es, _, _ = embstore.gen_synthetic(4, 2, dim=8, seed=0)
    drifted = embstore.perturb_embeddings(es, 0.1, seed=5)
    assert np.array_equal(drifted.ids, es.ids)
    assert np.allclose(np.linalg.norm(drifted.vectors, axis=1), 1.0, atol=1e-5)
    assert not np.array_equal(drifted.vectors, es.vectors)
    # same seed, same drift
    again = embstore.perturb_embeddings(es, 0.1, seed=5)
    assert np.array_equal(again.vectors, drifted.vectors)
