"""Recall metrics and kernel throughput benchmarks.

Benchmarks time full searches (scan + score + selection) one query at a
time on one thread, after a warm-up pass, mirroring an exhaustive-search
latency protocol.  The scan paths allocate a constant number of bulk
arrays per query and never build per-candidate python objects; a debug
mode records allocation counters so that stays observable.
"""

import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .embstore import GroundTruth
from .index import FlatIndex, TopK, search_flat
from .model import CodeBatch


# ------------------------------------------------------------------ recall


@dataclass
class RecallReport:
    """Per-query and mean recall at a fixed cutoff."""

    k: int
    per_query: dict
    mean: float
    dataset: str = ""
    model: str = ""
    kernel: str = ""


def recall_at_k(results: dict, truth: GroundTruth, k: int,
                dataset: str = "", model: str = "", kernel: str = "") -> RecallReport:
    """Fraction of each query's relevant set found in its top-k.

    ``results`` maps query id to a TopK (or an id sequence).  Every
    result query must be present in the ground truth.
    """
    per_query = {}
    for qid, res in results.items():
        qid = int(qid)
        if qid not in truth.relevant:
            raise KeyError("query %d missing from ground truth" % qid)
        ids = res.ids if isinstance(res, TopK) else np.asarray(res, dtype=np.uint64)
        top = set(int(v) for v in ids[:k])
        rel = truth.relevant[qid]
        hits = sum(1 for v in rel if int(v) in top)
        per_query[qid] = hits / len(rel) if len(rel) else 0.0
    mean = float(np.mean(list(per_query.values()))) if per_query else 0.0
    return RecallReport(k=k, per_query=per_query, mean=mean,
                        dataset=dataset, model=model, kernel=kernel)


def search_float_flat(vectors: np.ndarray, ids: np.ndarray, query: np.ndarray,
                      k: int) -> TopK:
    """Float cosine baseline over unit-normalized vectors."""
    if vectors.shape[0] == 0 or k <= 0:
        return TopK.empty(k)
    scores = kernels.scan_float(query, vectors)
    return TopK.from_scores(scores, np.asarray(ids, dtype=np.uint64), k)


# ------------------------------------------------------------- benchmarks


@dataclass
class BenchReport:
    """Single-kernel timing over a query set."""

    kernel: str
    bits: int
    count: int
    k: int
    queries: int
    sec_per_query: float
    qps: float
    threads: int = 1
    alloc_blocks: int = field(default=-1)  # -1 unless debug mode

    def csv_row(self) -> str:
        return "%s,%d,%d,%d,%d,%.9f,%.2f,%d,%d" % (
            self.kernel, self.bits, self.count, self.k, self.queries,
            self.sec_per_query, self.qps, self.threads, self.alloc_blocks)


BENCH_CSV_HEADER = "kernel,bits,count,k,queries,sec_per_query,qps,threads,alloc_blocks"


def _measure(run_one, n_queries: int, warmup: int, debug_alloc: bool):
    for i in range(min(warmup, n_queries)):
        run_one(i)
    allocs = -1
    if debug_alloc:
        run_one(0)
        tracemalloc.start()
        before = tracemalloc.take_snapshot()
        run_one(0)
        after = tracemalloc.take_snapshot()
        tracemalloc.stop()
        allocs = sum(max(s.count_diff, 0)
                     for s in after.compare_to(before, "lineno"))
    t0 = time.perf_counter()
    for i in range(n_queries):
        run_one(i)
    elapsed = time.perf_counter() - t0
    return elapsed, allocs


def bench_kernels(index: FlatIndex, queries: CodeBatch, k: int = 20,
                  kernel_names=kernels.KERNEL_CHOICES, min_queries: int = 100,
                  warmup: int = 5, debug_alloc: bool = False,
                  csv_path=None) -> list:
    """Time flat searches per kernel; at least ``min_queries`` timed each.

    Query codes are cycled when fewer than ``min_queries`` are supplied.
    """
    if queries.count == 0:
        raise ValueError("no queries to measure")
    if index.count == 0:
        raise ValueError("empty index cannot be benchmarked")
    n_queries = max(min_queries, queries.count)
    rows = [queries.select([i % queries.count]) for i in range(n_queries)]
    bits = index.m * index.B
    reports = []
    for name in kernel_names:
        kern = kernels.KERNEL_CHOICES[
            kernels.KERNEL_CHOICES.index(name)] if name in kernels.KERNEL_CHOICES else name

        def run_one(i, kern=kern):
            search_flat(index, rows[i], k, kern)

        elapsed, allocs = _measure(run_one, n_queries, warmup, debug_alloc)
        reports.append(BenchReport(
            kernel=kern, bits=bits, count=index.count, k=k, queries=n_queries,
            sec_per_query=elapsed / n_queries, qps=n_queries / elapsed,
            alloc_blocks=allocs))
    if csv_path:
        write_bench_csv(csv_path, reports)
    return reports


def bench_float_baseline(vectors: np.ndarray, ids: np.ndarray,
                         queries: np.ndarray, k: int = 20,
                         min_queries: int = 100, warmup: int = 5,
                         debug_alloc: bool = False) -> BenchReport:
    """Time the float cosine baseline over the same protocol."""
    vectors = np.ascontiguousarray(vectors, dtype=np.float32)
    queries = np.ascontiguousarray(queries, dtype=np.float32)
    if queries.shape[0] == 0:
        raise ValueError("no queries to measure")
    ids = np.asarray(ids, dtype=np.uint64)
    n_queries = max(min_queries, queries.shape[0])

    def run_one(i):
        search_float_flat(vectors, ids, queries[i % queries.shape[0]], k)

    elapsed, allocs = _measure(run_one, n_queries, warmup, debug_alloc)
    return BenchReport(
        kernel="float", bits=32 * vectors.shape[1], count=vectors.shape[0],
        k=k, queries=n_queries, sec_per_query=elapsed / n_queries,
        qps=n_queries / elapsed, alloc_blocks=allocs)


def write_bench_csv(path, reports) -> None:
    with open(str(path), "w") as f:
        f.write(BENCH_CSV_HEADER + "\n")
        for r in reports:
            f.write(r.csv_row() + "\n")
