"""Recall metric and benchmark harness behavior."""

import numpy as np
import pytest

from binembed.embstore import GroundTruth, gen_synthetic
from binembed.evaluate import (BENCH_CSV_HEADER, BenchReport, RecallReport,
                               bench_float_baseline, bench_kernels, recall_at_k,
                               search_float_flat, write_bench_csv)
from binembed.index import TopK, build_flat, search_flat
from binembed.kernels import KERNEL_CHOICES
from binembed.model import ModelConfig, encode_batch, init_model


def oracle_recall(result_ids, relevant, k):
    top = [int(v) for v in result_ids[:k]]
    return sum(1 for v in relevant if int(v) in top) / len(relevant)


# ----------------------------------------------------------------- recall


def test_recall_hand_example():
    # 3 of the 4 relevant ids inside the top 5 -> 0.75
    truth = GroundTruth({7: [1, 2, 3, 4]})
    results = {7: np.array([2, 9, 1, 8, 3], dtype=np.uint64)}
    report = recall_at_k(results, truth, 5)
    assert report.per_query[7] == 0.75
    assert report.mean == 0.75


def test_recall_cutoff_applies():
    truth = GroundTruth({0: [5]})
    results = {0: np.array([1, 2, 5], dtype=np.uint64)}
    assert recall_at_k(results, truth, 2).mean == 0.0
    assert recall_at_k(results, truth, 3).mean == 1.0


def test_recall_accepts_topk_objects():
    truth = GroundTruth({3: [10, 11]})
    top = TopK(2, np.array([11, 99], dtype=np.uint64), np.array([0.9, 0.5]))
    report = recall_at_k({3: top}, truth, 2)
    assert report.per_query[3] == 0.5


def test_recall_query_missing_from_truth_errors():
    truth = GroundTruth({0: [1]})
    with pytest.raises(KeyError, match="missing from ground truth"):
        recall_at_k({5: np.array([1], dtype=np.uint64)}, truth, 1)


def test_recall_permutation_invariant_random():
    rng = np.random.default_rng(0)
    truth = GroundTruth({q: rng.choice(1000, 8, replace=False) for q in range(40)})
    results = {q: rng.choice(1000, 30, replace=False).astype(np.uint64)
               for q in range(40)}
    base = recall_at_k(results, truth, 10)
    shuffled = {q: results[q] for q in rng.permutation(list(results))}
    again = recall_at_k(shuffled, truth, 10)
    assert again.mean == base.mean
    assert again.per_query == base.per_query
    for q in results:
        assert base.per_query[q] == oracle_recall(results[q], truth[q], 10)


def test_recall_carries_identifiers():
    truth = GroundTruth({0: [1]})
    report = recall_at_k({0: np.array([1], dtype=np.uint64)}, truth, 1,
                         dataset="bench-a", model="m1", kernel="sdc-exact")
    assert isinstance(report, RecallReport)
    assert (report.dataset, report.model, report.kernel) == ("bench-a", "m1", "sdc-exact")


# ------------------------------------------------------------ float search


def test_search_float_flat_matches_numpy_oracle():
    rng = np.random.default_rng(2)
    vecs = rng.standard_normal((200, 16)).astype(np.float32)
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    ids = rng.permutation(500)[:200].astype(np.uint64)
    q = vecs[17]
    top = search_float_flat(vecs, ids, q, 10)
    cos = vecs.astype(np.float64) @ q.astype(np.float64)
    want = sorted(range(200), key=lambda i: (-cos[i], ids[i]))[:10]
    assert list(top.ids) == [ids[i] for i in want]
    assert int(top.ids[0]) == int(ids[17])
    assert top.scores[0] == pytest.approx(1.0, abs=1e-6)


def test_search_float_flat_empty():
    top = search_float_flat(np.zeros((0, 4), np.float32), np.zeros(0, np.uint64),
                            np.zeros(4, np.float32), 5)
    assert top.ids.size == 0


# ------------------------------------------------------------- benchmarks


@pytest.fixture(scope="module")
def bench_setup():
    emb, _, _ = gen_synthetic(40, 5, 32, 0.05, seed=3)
    model = init_model(ModelConfig(32, 16, 3), seed=0)
    codes = encode_batch(model, emb.vectors)
    index = build_flat(codes, emb.ids)
    return emb, codes, index


def test_bench_zero_queries_error(bench_setup):
    _, codes, index = bench_setup
    with pytest.raises(ValueError, match="no queries"):
        bench_kernels(index, codes.select([]), k=5)


def test_bench_cycles_to_min_queries(bench_setup):
    _, codes, index = bench_setup
    reports = bench_kernels(index, codes.select([0, 1, 2]), k=5,
                            kernel_names=("bitwise",), min_queries=50, warmup=2)
    (rep,) = reports
    assert rep.queries == 50
    assert rep.kernel == "bitwise"
    assert rep.bits == index.m * index.B
    assert rep.count == index.count
    assert rep.threads == 1
    assert rep.sec_per_query > 0 and rep.qps > 0
    assert rep.qps == pytest.approx(1.0 / rep.sec_per_query, rel=1e-9)


def test_bench_covers_all_kernels_and_csv(bench_setup, tmp_path):
    _, codes, index = bench_setup
    path = tmp_path / "bench.csv"
    reports = bench_kernels(index, codes.select(range(5)), k=5,
                            min_queries=10, warmup=1, csv_path=path)
    assert [r.kernel for r in reports] == list(KERNEL_CHOICES)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == BENCH_CSV_HEADER
    assert len(lines) == 1 + len(KERNEL_CHOICES)
    first = lines[1].split(",")
    assert first[0] == "reference"
    assert int(first[1]) == index.m * index.B


def test_bench_alloc_counters_do_not_scale_with_index(bench_setup):
    emb, codes, _ = bench_setup
    small = build_flat(codes.select(range(40)), emb.ids[:40])
    big = build_flat(codes, emb.ids)
    kwargs = dict(k=5, kernel_names=("sdc-exact",), min_queries=5, warmup=2,
                  debug_alloc=True)
    (rs,) = bench_kernels(small, codes.select([0]), **kwargs)
    (rb,) = bench_kernels(big, codes.select([0]), **kwargs)
    assert rs.alloc_blocks >= 0 and rb.alloc_blocks >= 0
    # per-query allocations are a handful of bulk arrays, never per candidate
    assert rb.alloc_blocks < 200
    assert abs(rb.alloc_blocks - rs.alloc_blocks) < 50


def test_bench_float_baseline_report(bench_setup):
    emb, _, _ = bench_setup
    rep = bench_float_baseline(emb.vectors, emb.ids, emb.vectors[:4], k=5,
                               min_queries=20, warmup=1)
    assert rep.kernel == "float"
    assert rep.bits == 32 * emb.dim
    assert rep.queries == 20
    with pytest.raises(ValueError, match="no queries"):
        bench_float_baseline(emb.vectors, emb.ids, emb.vectors[:0], k=5)


def test_bench_csv_roundtrip_format(tmp_path):
    rep = BenchReport(kernel="sdc-q8", bits=256, count=1000, k=20, queries=100,
                      sec_per_query=1.25e-4, qps=8000.0, alloc_blocks=7)
    path = tmp_path / "one.csv"
    write_bench_csv(path, [rep])
    body = path.read_text().strip().splitlines()
    assert body[0] == BENCH_CSV_HEADER
    cells = body[1].split(",")
    assert cells[0] == "sdc-q8"
    assert cells[-2:] == ["1", "7"]
    assert float(cells[5]) == pytest.approx(1.25e-4)
