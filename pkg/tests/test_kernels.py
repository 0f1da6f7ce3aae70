"""Distance kernel tests.

Every exact kernel is checked against a slow python-integer oracle that
decodes plane bits directly, plus hand-worked examples.  The compiled
and pure-numpy backends are compared element for element.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from binembed import codec
from binembed.kernels import (
    KERNEL_CHOICES,
    QueryLut,
    ScoreBatch,
    _backend_numba,
    _backend_numpy,
    build_lut,
    dot_bitwise,
    dot_float,
    dot_reference,
    finish_scores,
    get_backend,
    plane_dot,
    scan_bitwise,
    scan_float,
    scan_reference,
    scan_sdc,
    topk_positions,
)
from binembed.model import CodeBatch

BACKENDS = (_backend_numba, _backend_numpy)


# ---------------------------------------------------------------- oracles


def oracle_scaled(plane_bits):
    """Decode one code's plane bits into scaled ints with python ints."""
    P = len(plane_bits)
    u = P - 1
    m = len(plane_bits[0])
    out = []
    for j in range(m):
        v = 0
        for p in range(P):
            s = 1 if plane_bits[p][j] else -1
            v += s << (u - p)
        out.append(v)
    return out


def oracle_dot(q_bits, d_bits):
    qs = oracle_scaled(q_bits)
    ds = oracle_scaled(d_bits)
    return sum(a * b for a, b in zip(qs, ds))


def random_codes(rng, n, m, B):
    return CodeBatch(rng.integers(0, 2, size=(n, B, m), dtype=np.uint8))


def all_codes(m, B):
    """Every possible plane-bit combination for small m*B."""
    total = m * B
    n = 1 << total
    idx = np.arange(n, dtype=np.uint64)
    bits = (idx[:, None] >> np.arange(total, dtype=np.uint64)[None, :]) & 1
    return CodeBatch(bits.reshape(n, B, m).astype(np.uint8))


# ----------------------------------------------------------- hand examples


def test_bitwise_hand_example_all_positive():
    # one residual loop, four dimensions, every sign +1 on both sides:
    # each scaled value is 2 + 1 = 3, so the dot is 4 * 9 = 36
    words = np.array([[0xF], [0xF]], dtype=np.uint64)
    assert dot_bitwise(words, words, 4) == 36


def test_plane_dot_examples():
    x = np.array([0xF], dtype=np.uint64)
    y = np.array([0x0], dtype=np.uint64)
    assert plane_dot(x, x, 4) == 4
    assert plane_dot(x, y, 4) == -4
    assert plane_dot(np.array([0b1010], np.uint64), np.array([0b1000], np.uint64), 4) == 2


def test_plane_dot_masks_pad_bits():
    # junk above bit m-1 must not affect the result
    x = np.array([0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    y = np.array([0x0000000000000007], dtype=np.uint64)
    assert plane_dot(x, y, 4) == (4 - 2 * 1)


def test_lut_hand_example_two_bit():
    # slot holding scaled query dims (3, 1); nibble 0b1101 decodes to
    # fields (3, 1) -> scaled (3, -1); partial dot 3*3 + 1*(-1) = 8
    lut = build_lut(np.array([3, 1]), B=2)
    assert lut.tables.shape == (1, 16)
    assert lut.tables[0, 0b1101] == 8
    # nibble 0b0000 decodes to (-3, -3): partial dot -9 - 3 = -12
    assert lut.tables[0, 0b0000] == -12


def test_lut_bounds_and_guards():
    rng = np.random.default_rng(0)
    for B in (1, 2, 4):
        codes = random_codes(rng, 4, 64, B)
        q = codec.to_scaled_int(codes.planes)[0]
        lut = build_lut(q, B)
        # a slot covers 4/B dims, each contributing at most (2^B - 1)^2
        limit = (4 // B) * ((1 << B) - 1) ** 2
        assert int(np.abs(lut.tables.astype(np.int64)).max()) <= limit
        assert limit <= 450  # int16 tables always suffice
    with pytest.raises(ValueError):
        build_lut(np.array([2, 1]), B=2)  # even value is off-lattice
    with pytest.raises(ValueError):
        build_lut(np.array([5, 1]), B=2)  # out of range for two bits
    with pytest.raises(ValueError):
        build_lut(np.array([1, 1]), B=2, mode="fast")


# -------------------------------------------------- exhaustive small cases


@pytest.mark.parametrize("B", [1, 2])
def test_pair_kernels_exhaustive_m4(B):
    codes = all_codes(4, B)
    ints = codec.to_scaled_int(codes.planes)
    planes = codec.to_planes(codes)
    store = codec.pack_store(codes)
    n = codes.count
    bit_list = codes.planes.tolist()
    for qi in range(n):
        lut = build_lut(ints[qi], B)
        batch = scan_sdc(lut, store)
        ref = scan_reference(ints[qi], ints)
        bit = scan_bitwise(planes.words[qi], planes)
        for di in range(n):
            expect = oracle_dot(bit_list[qi], bit_list[di])
            assert ref[di] == expect
            assert bit[di] == expect
            assert batch.int_dots[di] == expect


def test_pair_kernels_exhaustive_b4_m2():
    # every four-bit code on two dimensions: 256 codes, all pairs
    codes = all_codes(2, 4)
    ints = codec.to_scaled_int(codes.planes)
    planes = codec.to_planes(codes)
    bit_list = codes.planes.tolist()
    lut_dims = codec.check_geometry(2, 4)
    assert lut_dims == 2
    store = codec.pack_store(codes)
    for qi in range(codes.count):
        ref = scan_reference(ints[qi], ints)
        bit = scan_bitwise(planes.words[qi], planes)
        batch = scan_sdc(build_lut(ints[qi], 4), store)
        expect = [oracle_dot(bit_list[qi], b) for b in bit_list]
        assert ref.tolist() == expect
        assert bit.tolist() == expect
        assert batch.int_dots.tolist() == expect


# ------------------------------------------------------- random agreement


@pytest.mark.parametrize("B", [1, 2, 4])
@pytest.mark.parametrize("m", [64, 128])
def test_exact_kernels_agree_random(B, m):
    rng = np.random.default_rng(2024 + B + m)
    docs = random_codes(rng, 500, m, B)
    queries = random_codes(rng, 8, m, B)
    d_ints = codec.to_scaled_int(docs.planes)
    q_ints = codec.to_scaled_int(queries.planes)
    d_planes = codec.to_planes(docs)
    q_planes = codec.to_planes(queries)
    store = codec.pack_store(docs)
    u = B - 1
    for qi in range(queries.count):
        ref = scan_reference(q_ints[qi], d_ints)
        bit = scan_bitwise(q_planes.words[qi], d_planes)
        lut = build_lut(q_ints[qi], B, inv_norm=float(queries.inv_norms[qi]))
        batch = scan_sdc(lut, store)
        assert np.array_equal(ref, bit)
        assert np.array_equal(ref, batch.int_dots)
        # spot-check a few entries against the python oracle
        for di in (0, 17, 499):
            assert ref[di] == oracle_dot(queries.planes[qi].tolist(),
                                         docs.planes[di].tolist())
        # the cosine path is shared: identical bits for exact kernels
        direct = finish_scores(ref, float(queries.inv_norms[qi]),
                               docs.inv_norms, u)
        assert np.array_equal(direct, batch.scores)


def test_scores_match_decoded_cosine():
    rng = np.random.default_rng(7)
    docs = random_codes(rng, 200, 64, 4)
    queries = random_codes(rng, 4, 64, 4)
    q_ints = codec.to_scaled_int(queries.planes)
    store = codec.pack_store(docs)
    du = docs.unit()
    qu = queries.unit()
    for qi in range(queries.count):
        lut = build_lut(q_ints[qi], 4, inv_norm=float(queries.inv_norms[qi]))
        batch = scan_sdc(lut, store)
        expect = du @ qu[qi]
        assert np.allclose(batch.scores, expect, atol=1e-5)


def test_self_similarity_is_one():
    rng = np.random.default_rng(11)
    for B in (1, 2, 4):
        codes = random_codes(rng, 50, 64, B)
        ints = codec.to_scaled_int(codes.planes)
        store = codec.pack_store(codes)
        for qi in (0, 13, 49):
            lut = build_lut(ints[qi], B, inv_norm=float(codes.inv_norms[qi]))
            batch = scan_sdc(lut, store)
            assert abs(batch.scores[qi] - 1.0) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**63 - 1), st.sampled_from([1, 2, 4]))
def test_exact_agreement_property(seed, B):
    rng = np.random.default_rng(seed)
    m = int(rng.choice([8, 16, 64]))
    docs = random_codes(rng, 33, m, B)
    queries = random_codes(rng, 1, m, B)
    d_ints = codec.to_scaled_int(docs.planes)
    q_ints = codec.to_scaled_int(queries.planes)[0]
    ref = scan_reference(q_ints, d_ints)
    bit = scan_bitwise(codec.to_planes(queries).words[0], codec.to_planes(docs))
    sdc = scan_sdc(build_lut(q_ints, B), codec.pack_store(docs))
    assert np.array_equal(ref, bit)
    assert np.array_equal(ref, sdc.int_dots)


# ----------------------------------------------------------------- q8 path


@pytest.mark.parametrize("B", [2, 4])
def test_q8_error_within_analytic_bound(B):
    rng = np.random.default_rng(31 + B)
    m = 128
    docs = random_codes(rng, 400, m, B)
    queries = random_codes(rng, 6, m, B)
    d_ints = codec.to_scaled_int(docs.planes)
    q_ints = codec.to_scaled_int(queries.planes)
    store = codec.pack_store(docs)
    S = codec.check_geometry(m, B)
    u = B - 1
    for qi in range(queries.count):
        inv_q = float(queries.inv_norms[qi])
        exact = scan_sdc(build_lut(q_ints[qi], B, inv_norm=inv_q), store)
        q8 = scan_sdc(build_lut(q_ints[qi], B, mode="q8", inv_norm=inv_q), store)
        lut = build_lut(q_ints[qi], B, mode="q8")
        # each table entry is off by at most scale/2 after rounding
        dot_err = np.abs(exact.int_dots
                         - (q8.int_dots.astype(np.float64) * lut.scale + S * lut.bias))
        assert dot_err.max() <= S * lut.scale / 2 + 1e-9
        score_err = np.abs(exact.scores - q8.scores)
        bound = (S * lut.scale / 2) * inv_q * docs.inv_norms.astype(np.float64) / (1 << (2 * u))
        assert np.all(score_err <= bound + 1e-12)


def test_q8_exact_when_table_constant():
    # all-equal tables quantize losslessly (scale falls back to 1, entries 0)
    q = np.array([1, 1, 1, 1])
    lut = build_lut(q, 1, mode="q8")
    assert lut.scale > 0
    codes = CodeBatch(np.ones((3, 1, 4), dtype=np.uint8))
    exact = scan_sdc(build_lut(q, 1), codec.pack_store(codes))
    est = scan_sdc(lut, codec.pack_store(codes))
    assert np.allclose(est.scores, exact.scores)
    assert np.array_equal(est.int_dots + 0, est.int_dots)  # integer accumulators


# ------------------------------------------------------------ float & misc


def test_dot_reference_and_float_basics():
    assert dot_reference(np.array([3, 1]), np.array([3, -1])) == 8
    assert dot_float(np.array([1.0, 2.0]), np.array([3.0, -1.0])) == 1.0
    with pytest.raises(ValueError):
        dot_reference(np.array([1]), np.array([1, 2]))


def test_scan_float_matches_numpy():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((100, 32)).astype(np.float32)
    q = rng.standard_normal(32).astype(np.float32)
    out = scan_float(q, x)
    expect = x.astype(np.float64) @ q.astype(np.float64)
    assert np.allclose(out, expect, rtol=1e-12, atol=1e-12)


def test_scan_sdc_accepts_block_lists():
    rng = np.random.default_rng(5)
    docs = random_codes(rng, 71, 16, 2)
    q = codec.to_scaled_int(docs.planes)[0]
    store = codec.pack_store(docs)
    whole = scan_sdc(build_lut(q, 2), store)
    per_block = scan_sdc(build_lut(q, 2), store.blocks())
    assert np.array_equal(whole.int_dots, per_block.int_dots)
    assert np.array_equal(whole.scores, per_block.scores)


def test_scan_sdc_drops_padded_lanes():
    rng = np.random.default_rng(6)
    docs = random_codes(rng, 5, 16, 2)
    q = codec.to_scaled_int(docs.planes)[0]
    batch = scan_sdc(build_lut(q, 2), codec.pack_store(docs))
    assert batch.int_dots.shape == (5,)
    assert batch.scores.shape == (5,)


def test_scan_sdc_geometry_mismatch():
    rng = np.random.default_rng(8)
    docs = random_codes(rng, 4, 16, 2)
    lut = build_lut(codec.to_scaled_int(random_codes(rng, 1, 32, 2).planes)[0], 2)
    with pytest.raises(ValueError):
        scan_sdc(lut, codec.pack_store(docs))


def test_output_reuse():
    rng = np.random.default_rng(9)
    docs = random_codes(rng, 40, 16, 2)
    q = codec.to_scaled_int(docs.planes)[0]
    out = ScoreBatch.empty(40)
    res = scan_sdc(build_lut(q, 2), codec.pack_store(docs), out=out)
    assert res is out
    with pytest.raises(ValueError):
        scan_sdc(build_lut(q, 2), codec.pack_store(docs), out=ScoreBatch.empty(7))


# ------------------------------------------------------------------ top-k


def oracle_topk(scores, ids, k):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], ids[i]))
    return order[: min(k, len(scores))]


def test_topk_orders_by_score_then_id():
    scores = np.array([0.5, 0.9, 0.5, 0.1, 0.9], dtype=np.float64)
    ids = np.array([40, 30, 20, 10, 3], dtype=np.uint64)
    pos = topk_positions(scores, ids, 4)
    assert pos.tolist() == [4, 1, 2, 0]  # 0.9/id3, 0.9/id30, 0.5/id20, 0.5/id40


def test_topk_k_larger_than_n_and_zero():
    scores = np.array([0.1, 0.2], dtype=np.float64)
    ids = np.array([7, 3], dtype=np.uint64)
    assert topk_positions(scores, ids, 10).tolist() == [1, 0]
    assert topk_positions(scores, ids, 0).tolist() == []


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 60), st.integers(1, 25))
def test_topk_matches_oracle_property(seed, n, k):
    rng = np.random.default_rng(seed)
    # coarse grid of scores forces plenty of ties
    scores = (rng.integers(0, 5, size=n) / 4.0).astype(np.float64)
    ids = rng.permutation(n).astype(np.uint64) * 3
    expect = oracle_topk(scores.tolist(), ids.tolist(), k)
    for impl in BACKENDS:
        got = impl.topk_positions(scores, ids, k)
        assert got.tolist() == expect


# ------------------------------------------------------ backend equivalence


def test_backends_match_on_integer_kernels():
    rng = np.random.default_rng(77)
    for B, m in ((1, 64), (2, 64), (4, 128)):
        docs = random_codes(rng, 300, m, B)
        queries = random_codes(rng, 3, m, B)
        d_ints = codec.to_scaled_int(docs.planes)
        q_ints = codec.to_scaled_int(queries.planes)
        d_planes = codec.to_planes(docs)
        q_planes = codec.to_planes(queries)
        store = codec.pack_store(docs)
        S = store.slots
        u = B - 1
        for qi in range(queries.count):
            outs = {}
            for impl in BACKENDS:
                ref = np.empty(docs.count, dtype=np.int64)
                impl.scan_reference(q_ints[qi].astype(np.int64),
                                    d_ints.astype(np.int8), ref)
                bit = np.empty(docs.count, dtype=np.int64)
                impl.scan_bitwise(q_planes.words[qi], d_planes.words, m, u, bit)
                lut = build_lut(q_ints[qi], B)
                acc = np.empty(store.n_blocks * store.V, dtype=np.int64)
                impl.scan_sdc_i16(store.words, lut.tables, S, acc)
                lut8 = build_lut(q_ints[qi], B, mode="q8")
                acc8 = np.empty(store.n_blocks * store.V, dtype=np.int64)
                impl.scan_sdc_u8(store.words, lut8.tables, S, acc8)
                outs[impl.__name__] = (ref, bit, acc, acc8)
            a = outs["binembed.kernels._backend_numba"]
            b = outs["binembed.kernels._backend_numpy"]
            for x, y in zip(a, b):
                assert np.array_equal(x, y)


def test_backend_selection_reports_name():
    assert get_backend() in ("numba", "numpy")
    assert set(KERNEL_CHOICES) == {"reference", "bitwise", "sdc-exact", "sdc-q8"}
