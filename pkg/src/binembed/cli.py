"""Command line front end.

Subcommands cover the full workflow: synthetic data generation, model
training (plain and backward compatible), encoding, index building,
search, recall evaluation, kernel benchmarks, and whole-experiment runs
from a config file.  Training flags mirror the training config keys;
a ``--config`` file provides defaults and explicit flags override it.

Searches always fetch one extra candidate and drop the query's own id,
so corpus vectors can be used as queries without scoring themselves;
for held-out queries this leaves the plain top-k unchanged.
"""

import argparse
import os
import sys
from dataclasses import fields

import numpy as np

from . import __version__, codec, evaluate, experiment
from .embstore import (gen_synthetic, load_embeddings, load_pairs, load_truth,
                       save_embeddings, save_pairs, save_truth)
from .index import (_read_ids, _write_ids, FlatIndex, build_ivf, default_n_list,
                    load_index, IvfIndex, save_index, search_flat, search_ivf)
from .kernels import KERNEL_CHOICES
from .model import CodeBatch, ModelConfig, encode_batch, init_model, load_model, save_model
from .trainer import TrainConfig, parse_train_config, train, train_backward_compatible


# ----------------------------------------------------------------- helpers


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    defaults = TrainConfig()
    for f in fields(TrainConfig):
        p.add_argument("--" + f.name.replace("_", "-"), type=f.type, default=None,
                       help="training %s (default %s)" % (f.name, getattr(defaults, f.name)))


def _train_config_from_args(args) -> TrainConfig:
    cfg = parse_train_config(args.config) if args.config else TrainConfig()
    for f in fields(TrainConfig):
        value = getattr(args, f.name)
        if value is not None:
            setattr(cfg, f.name, value)
    return cfg


def _store_to_codes(store: codec.PackedStore) -> CodeBatch:
    if store.count == 0:
        planes = np.zeros((0, store.B, store.m), dtype=np.uint8)
        return CodeBatch(planes, inv_norms=np.ones(0, dtype=np.float32))
    planes = np.concatenate([codec.unpack_block(b)[0] for b in store.blocks()])
    return CodeBatch(planes, inv_norms=store.inv_norms[:store.count])


def _encode_queries(args):
    model = load_model(args.model)
    emb = load_embeddings(args.data)
    return model, emb, encode_batch(model, emb.vectors)


def _search_one(index, query_codes, row, k, kernel, n_probe):
    if isinstance(index, IvfIndex):
        return search_ivf(index, query_codes, k, n_probe, kernel, row=row)
    return search_flat(index, query_codes, k, kernel, row=row)


def _drop_self(top, qid: int, k: int):
    keep = top.ids != np.uint64(qid)
    return top.ids[keep][:k], top.scores[keep][:k]


def _emit(lines, path=None) -> None:
    if path:
        with open(path, "w") as f:
            for line in lines:
                f.write(line + "\n")
    else:
        for line in lines:
            print(line)


# ------------------------------------------------------------- subcommands


def _cmd_gen_data(args) -> int:
    emb, pairs, truth = gen_synthetic(args.clusters, args.per_cluster, args.dim,
                                      args.noise_sigma, args.seed)
    out = args.out
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    save_embeddings(out + ".embf", emb)
    save_pairs(out + ".embp", pairs)
    save_truth(out + ".embg", truth)
    print("wrote %d vectors (dim %d), %d pairs, %d truth queries to %s.{embf,embp,embg}"
          % (emb.count, emb.dim, len(pairs), len(truth), out))
    return 0


def _train_common(args, bc: bool) -> int:
    emb = load_embeddings(args.data)
    pairs = load_pairs(args.pairs)
    cfg = _train_config_from_args(args)
    if bc:
        old_model = load_model(args.old_model)
        model = init_model(ModelConfig(emb.dim, old_model.config.code_dim,
                                       old_model.config.loops,
                                       old_model.config.hidden),
                           seed=args.init_seed)
        old_emb = load_embeddings(args.old_data) if args.old_data else None
        model, reports = train_backward_compatible(
            model, old_model, emb, pairs, cfg, old_embeddings=old_emb,
            csv_path=args.log)
    else:
        model = init_model(ModelConfig(emb.dim, args.code_dim, args.loops,
                                       args.hidden), seed=args.init_seed)
        model, reports = train(model, emb, pairs, cfg, csv_path=args.log)
    save_model(args.out, model)
    last = reports[-1].loss if reports else float("nan")
    print("trained %d steps, final loss %.4f, saved %s"
          % (len(reports), last, args.out))
    return 0


def _cmd_train(args) -> int:
    return _train_common(args, bc=False)


def _cmd_train_bc(args) -> int:
    return _train_common(args, bc=True)


def _cmd_encode(args) -> int:
    model, emb, codes = _encode_queries(args)
    store = codec.pack_store(codes, norm_mode=args.norm_mode)
    codec.save_segment(args.out, store)
    _write_ids(args.out + ".ids", emb.ids)
    print("encoded %d vectors to %s (%d-bit codes: m=%d, B=%d)"
          % (codes.count, args.out, model.config.total_bits,
             model.config.code_dim, model.config.planes))
    return 0


def _cmd_build_index(args) -> int:
    store = codec.load_segment(args.codes)
    ids = _read_ids(args.codes + ".ids", store.count)
    if args.B and store.B != args.B:
        raise ValueError("codes have B=%d planes, --B asked for %d" % (store.B, args.B))
    if args.type == "ivf":
        if not (args.data and args.model):
            raise ValueError("building an IVF index needs --data and --model")
        emb = load_embeddings(args.data)
        model = load_model(args.model)
        codes = _store_to_codes(store)
        n_list = args.nlist or default_n_list(store.count)
        index = build_ivf(emb.vectors, codes, ids, n_list, model,
                          norm_mode=store.norm_mode, seed=args.seed)
    else:
        index = FlatIndex(store, ids)
    save_index(index, args.out)
    kind = "ivf(%d lists)" % index.n_list if isinstance(index, IvfIndex) else "flat"
    print("built %s index over %d codes at %s" % (kind, index.count, args.out))
    return 0


def _cmd_search(args) -> int:
    index = load_index(args.index)
    _, emb, codes = _encode_queries(args)
    lines = ["qid,rank,id,score"]
    for row in range(codes.count):
        qid = int(emb.ids[row])
        top = _search_one(index, codes, row, args.k + 1, args.kernel, args.nprobe)
        ids, scores = _drop_self(top, qid, args.k)
        for rank, (i, s) in enumerate(zip(ids, scores), 1):
            lines.append("%d,%d,%d,%.6f" % (qid, rank, int(i), s))
    _emit(lines, args.out)
    return 0


def _cmd_eval(args) -> int:
    index = load_index(args.index)
    _, emb, codes = _encode_queries(args)
    truth = load_truth(args.truth)
    results = {}
    for row in range(codes.count):
        qid = int(emb.ids[row])
        top = _search_one(index, codes, row, args.k + 1, args.kernel, args.nprobe)
        ids, _ = _drop_self(top, qid, args.k)
        results[qid] = ids
    report = evaluate.recall_at_k(results, truth, args.k,
                                  dataset=args.data, model=args.model,
                                  kernel=args.kernel)
    lines = ["qid,recall@%d" % args.k]
    lines += ["%d,%.6f" % (qid, report.per_query[qid]) for qid in sorted(report.per_query)]
    lines.append("mean,%.6f" % report.mean)
    _emit(lines, args.out)
    if args.out:
        print("recall@%d mean %.4f over %d queries (%s)"
              % (args.k, report.mean, len(report.per_query), args.out))
    return 0


def _cmd_bench(args) -> int:
    index = load_index(args.index)
    if isinstance(index, IvfIndex):
        raise ValueError("benchmarks run on flat indexes")
    _, _, codes = _encode_queries(args)
    names = [s.strip() for s in args.kernels.split(",") if s.strip()]
    reports = evaluate.bench_kernels(index, codes, k=args.k, kernel_names=names,
                                     min_queries=args.queries,
                                     debug_alloc=args.debug_alloc)
    lines = [evaluate.BENCH_CSV_HEADER] + [r.csv_row() for r in reports]
    _emit(lines, args.out)
    return 0


def _cmd_run(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    summary = experiment.run_experiment(args.config, overrides)
    for system, mean in summary["recall"].items():
        print("%s: recall@%d %.4f" % (system, summary["config"]["eval_k"], mean))
    print("reports in %s" % summary["run_dir"])
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="binembed",
                                description="binary embedding retrieval toolkit")
    p.add_argument("--version", action="version", version="binembed %s" % __version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a clustered synthetic benchmark")
    g.add_argument("--clusters", type=int, required=True)
    g.add_argument("--per-cluster", type=int, required=True)
    g.add_argument("--dim", type=int, required=True)
    g.add_argument("--noise-sigma", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="path prefix for .embf/.embp/.embg")
    g.set_defaults(fn=_cmd_gen_data)

    for name, bc in (("train", False), ("train-bc", True)):
        t = sub.add_parser(name, help="train a code model"
                           + (" with the compatibility loss" if bc else ""))
        t.add_argument("--data", required=True, help="embeddings (.embf)")
        t.add_argument("--pairs", required=True, help="anchor/positive pairs (.embp)")
        t.add_argument("--out", required=True, help="model checkpoint to write")
        t.add_argument("--config", default=None, help="key=value training config file")
        t.add_argument("--log", default=None, help="per-step CSV log path")
        t.add_argument("--init-seed", type=int, default=0)
        if bc:
            t.add_argument("--old-model", required=True)
            t.add_argument("--old-data", default=None,
                           help="embeddings the old model encodes (default: --data)")
        else:
            t.add_argument("--code-dim", type=int, required=True)
            t.add_argument("--loops", type=int, default=3)
            t.add_argument("--hidden", type=int, default=0)
        _add_train_flags(t)
        t.set_defaults(fn=_cmd_train_bc if bc else _cmd_train)

    e = sub.add_parser("encode", help="encode embeddings into a code segment")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="code segment to write (.rbei)")
    e.add_argument("--norm-mode", choices=sorted(codec.NORM_MODE_CODES), default="f32")
    e.set_defaults(fn=_cmd_encode)

    b = sub.add_parser("build-index", help="build a search index from a code segment")
    b.add_argument("--codes", required=True, help="code segment (.rbei)")
    b.add_argument("--out", required=True, help="index directory to write")
    b.add_argument("--type", choices=("flat", "ivf"), default="flat")
    b.add_argument("--nlist", type=int, default=0, help="coarse lists (0 = sqrt(count))")
    b.add_argument("--B", type=int, default=0, help="expected bits per dimension, checked")
    b.add_argument("--data", default=None, help="float embeddings (ivf clustering)")
    b.add_argument("--model", default=None, help="code model (ivf centroid codes)")
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(fn=_cmd_build_index)

    s = sub.add_parser("search", help="run queries against an index")
    s.add_argument("--index", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True, help="query embeddings (.embf)")
    s.add_argument("--kernel", choices=KERNEL_CHOICES, default="sdc-exact")
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--nprobe", type=int, default=None)
    s.add_argument("--out", default=None, help="CSV path (default: stdout)")
    s.set_defaults(fn=_cmd_search)

    v = sub.add_parser("eval", help="recall of an index against ground truth")
    v.add_argument("--index", required=True)
    v.add_argument("--model", required=True)
    v.add_argument("--data", required=True, help="query embeddings (.embf)")
    v.add_argument("--truth", required=True, help="ground truth (.embg)")
    v.add_argument("--k", type=int, default=10)
    v.add_argument("--kernel", choices=KERNEL_CHOICES, default="sdc-exact")
    v.add_argument("--nprobe", type=int, default=None)
    v.add_argument("--out", default=None, help="CSV path (default: stdout)")
    v.set_defaults(fn=_cmd_eval)

    n = sub.add_parser("bench", help="time search kernels on a flat index")
    n.add_argument("--index", required=True)
    n.add_argument("--model", required=True)
    n.add_argument("--data", required=True, help="query embeddings (.embf)")
    n.add_argument("--kernels", default=",".join(KERNEL_CHOICES))
    n.add_argument("--queries", type=int, default=100, help="timed queries per kernel")
    n.add_argument("--k", type=int, default=20)
    n.add_argument("--debug-alloc", action="store_true",
                   help="record allocation counters per query")
    n.add_argument("--out", default=None, help="CSV path (default: stdout)")
    n.set_defaults(fn=_cmd_bench)

    r = sub.add_parser("run", help="run a full experiment from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int, default=None, help="override the config seed")
    r.add_argument("--out-dir", default=None, help="override the report directory")
    r.set_defaults(fn=_cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
