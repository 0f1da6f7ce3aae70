"""End-to-end experiment driver: data, training, codes, index, recall.

Runs are driven by a flat ``key=value`` config and are deterministic:
the same config writes byte-identical reports.  Two modes:

- ``retrieval`` compares systems on one synthetic corpus: a float
  cosine baseline, multi-bit codes ("ours"), and a single-bit hash of
  equal total bits ("hash", the same architecture with zero refinement
  loops and a wider code).  Output is one recall row per system.
- ``bc`` models a backbone upgrade.  An old model indexes the original
  vectors.  A new model is trained on drifted vectors with the
  compatibility loss, and an ablated twin without it; both are scored
  by querying the old index with new-model query codes.

Every pipeline stage runs under a named guard, so a failure aborts the
run with the stage name attached.  The report directory can be
overridden with the ``BINEMBED_REPORT_DIR`` environment variable; no
other behavior is environment dependent.
"""

import os
from dataclasses import fields

import numpy as np

from . import __version__
from .embstore import EmbeddingSet, gen_synthetic, perturb_embeddings, save_embeddings
from .evaluate import recall_at_k, search_float_flat
from .index import (build_flat, build_ivf, default_n_list, save_index,
                    search_flat, search_ivf)
from .model import ModelConfig, clone_model, encode_batch, init_model, load_model, save_model
from .trainer import TrainConfig, train, train_backward_compatible

REPORT_DIR_ENV = "BINEMBED_REPORT_DIR"

_BASE_DEFAULTS = {
    "name": "experiment",
    "mode": "retrieval",           # retrieval | bc
    "seed": 0,
    "out_dir": "reports",
    # synthetic corpus
    "clusters": 10000,
    "per_cluster": 10,
    "dim": 128,
    "noise_sigma": 0.1,
    # evaluation
    "num_queries": 1000,
    "eval_k": 10,
    "kernel": "sdc-exact",
    "index_type": "flat",          # flat | ivf
    "n_list": 0,                   # 0 = sqrt(count)
    "n_probe": 0,                  # 0 = index default
    # systems (retrieval mode)
    "systems": "float,ours,hash",
    "ours_code_dim": 64,
    "ours_loops": 3,
    "hash_code_dim": 256,
    "hidden": 0,                   # 0 = same as dim
    "model_path_ours": "",
    "model_path_hash": "",
    # backbone upgrade (bc mode); the drift is per coordinate, so the
    # old/new cosine is about 1/sqrt(1 + drift_sigma^2 * dim)
    "drift_sigma": 0.05,
    # artifact persistence (reports and models are always written)
    "save_data": 0,
    "save_index": 0,
}


def _defaults() -> dict:
    out = dict(_BASE_DEFAULTS)
    for f in fields(TrainConfig):
        out["train_" + f.name] = getattr(TrainConfig(), f.name)
    out["train_seed"] = -1  # -1 = follow the experiment seed
    return out


DEFAULTS = _defaults()


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, cause):
        super().__init__("stage %r failed: %s" % (stage, cause))
        self.stage = stage


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


# ------------------------------------------------------------ configuration


def parse_experiment_config(path) -> dict:
    """Read a flat key=value file (# comments allowed) into a raw dict."""
    raw = {}
    with open(str(path)) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError("%s:%d: expected key=value, got %r" % (path, lineno, line))
            key, value = line.split("=", 1)
            raw[key.strip()] = value.strip()
    return raw


def resolve_config(raw: dict = None, overrides: dict = None) -> dict:
    """Merge raw values over the defaults, coercing to the default types."""
    cfg = dict(DEFAULTS)
    for source in (raw or {}), (overrides or {}):
        for key, value in source.items():
            if key not in cfg:
                raise ValueError("unknown config key %r" % key)
            default = DEFAULTS[key]
            if isinstance(default, int):
                cfg[key] = int(value)
            elif isinstance(default, float):
                cfg[key] = float(value)
            else:
                cfg[key] = str(value)
    if cfg["mode"] not in ("retrieval", "bc"):
        raise ValueError("mode must be retrieval or bc, got %r" % cfg["mode"])
    return cfg


def config_echo_lines(cfg: dict) -> list:
    return ["%s=%s" % (key, cfg[key]) for key in DEFAULTS]


def _train_config(cfg: dict) -> TrainConfig:
    kwargs = {f.name: cfg["train_" + f.name] for f in fields(TrainConfig)}
    if kwargs["seed"] < 0:
        kwargs["seed"] = cfg["seed"]
    return TrainConfig(**kwargs)


# ------------------------------------------------------------ shared stages


def _query_rows(count: int, num_queries: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed + 1)
    take = min(num_queries, count)
    rows = rng.choice(count, size=take, replace=False)
    return np.sort(rows)


def _drop_self(top_ids: np.ndarray, qid: int, k: int) -> np.ndarray:
    return top_ids[top_ids != np.uint64(qid)][:k]


def _search_binary(cfg, index, query_codes, qids, k):
    n_probe = cfg["n_probe"] if cfg["n_probe"] > 0 else None
    results = {}
    for i, qid in enumerate(qids):
        if cfg["index_type"] == "ivf":
            top = search_ivf(index, query_codes, k + 1, n_probe, cfg["kernel"], row=i)
        else:
            top = search_flat(index, query_codes, k + 1, cfg["kernel"], row=i)
        results[int(qid)] = _drop_self(top.ids, int(qid), k)
    return results


def _search_float(emb: EmbeddingSet, rows, qids, k):
    results = {}
    for row, qid in zip(rows, qids):
        top = search_float_flat(emb.vectors, emb.ids, emb.vectors[row], k + 1)
        results[int(qid)] = _drop_self(top.ids, int(qid), k)
    return results


def _build(cfg, emb: EmbeddingSet, codes, model):
    if cfg["index_type"] == "ivf":
        n_list = cfg["n_list"] if cfg["n_list"] > 0 else default_n_list(emb.count)
        return build_ivf(emb.vectors, codes, emb.ids, n_list, model, seed=cfg["seed"])
    if cfg["index_type"] != "flat":
        raise ValueError("index_type must be flat or ivf, got %r" % cfg["index_type"])
    return build_flat(codes, emb.ids)


def _system_geometry(cfg, system: str) -> ModelConfig:
    if system == "ours":
        return ModelConfig(dim=cfg["dim"], code_dim=cfg["ours_code_dim"],
                           loops=cfg["ours_loops"], hidden=cfg["hidden"])
    if system == "hash":
        return ModelConfig(dim=cfg["dim"], code_dim=cfg["hash_code_dim"],
                           loops=0, hidden=cfg["hidden"])
    raise ValueError("unknown system %r" % system)


def _get_model(cfg, system, emb, pairs, run_dir):
    """Load the system's checkpoint if a path is configured, else train."""
    path = cfg.get("model_path_%s" % system, "")
    geometry = _system_geometry(cfg, system)
    if path:
        if not os.path.exists(path):
            raise FileNotFoundError("model checkpoint %r does not exist" % path)
        model = load_model(path)
        if (model.config.dim, model.config.code_dim, model.config.loops) != (
                geometry.dim, geometry.code_dim, geometry.loops):
            raise ValueError("checkpoint %r geometry does not match the %s system"
                             % (path, system))
        return model
    model = init_model(geometry, seed=cfg["seed"])
    tc = _train_config(cfg)
    train(model, emb, pairs, tc,
          csv_path=os.path.join(run_dir, "train_%s.csv" % system))
    save_model(os.path.join(run_dir, "model_%s.rbem" % system), model)
    return model


RECALL_CSV_HEADER = "system,kernel,code_dim,planes,total_bits,k,recall"


def _write_recall_csv(path, rows) -> None:
    with open(path, "w") as f:
        f.write(RECALL_CSV_HEADER + "\n")
        for system, kernel, code_dim, planes, total_bits, k, mean in rows:
            f.write("%s,%s,%d,%d,%d,%d,%.6f\n"
                    % (system, kernel, code_dim, planes, total_bits, k, mean))


# ----------------------------------------------------------------- drivers


def _run_retrieval(cfg: dict, run_dir: str) -> dict:
    emb, pairs, truth = _stage(
        "gen-data", gen_synthetic, cfg["clusters"], cfg["per_cluster"],
        cfg["dim"], cfg["noise_sigma"], cfg["seed"])
    if cfg["save_data"]:
        save_embeddings(os.path.join(run_dir, "corpus.embf"), emb)
    rows = _query_rows(emb.count, cfg["num_queries"], cfg["seed"])
    qids = emb.ids[rows]
    k = cfg["eval_k"]

    systems = [s.strip() for s in cfg["systems"].split(",") if s.strip()]
    csv_rows, means = [], {}
    for system in systems:
        if system == "float":
            results = _stage("search", _search_float, emb, rows, qids, k)
            report = _stage("eval", recall_at_k, results, truth, k,
                            dataset=cfg["name"], model="float", kernel="float")
            csv_rows.append(("float", "float", cfg["dim"], 32, 32 * cfg["dim"],
                             k, report.mean))
        else:
            model = _stage("train", _get_model, cfg, system, emb, pairs, run_dir)
            codes = _stage("encode", encode_batch, model, emb.vectors)
            index = _stage("build-index", _build, cfg, emb, codes, model)
            if cfg["save_index"]:
                save_index(index, os.path.join(run_dir, "index_%s" % system))
            results = _stage("search", _search_binary, cfg, index,
                             codes.select(rows), qids, k)
            report = _stage("eval", recall_at_k, results, truth, k,
                            dataset=cfg["name"], model=system, kernel=cfg["kernel"])
            mc = model.config
            csv_rows.append((system, cfg["kernel"], mc.code_dim, mc.planes,
                             mc.total_bits, k, report.mean))
        means[system] = csv_rows[-1][-1]
    _write_recall_csv(os.path.join(run_dir, "recall.csv"), csv_rows)
    return {"recall": means}


def _run_bc(cfg: dict, run_dir: str) -> dict:
    emb_old, pairs, truth = _stage(
        "gen-data", gen_synthetic, cfg["clusters"], cfg["per_cluster"],
        cfg["dim"], cfg["noise_sigma"], cfg["seed"])
    emb_new = _stage("gen-data", perturb_embeddings, emb_old,
                     cfg["drift_sigma"], cfg["seed"] + 1)
    if cfg["save_data"]:
        save_embeddings(os.path.join(run_dir, "corpus_old.embf"), emb_old)
        save_embeddings(os.path.join(run_dir, "corpus_new.embf"), emb_new)
    rows = _query_rows(emb_old.count, cfg["num_queries"], cfg["seed"])
    qids = emb_old.ids[rows]
    k = cfg["eval_k"]
    tc = _train_config(cfg)
    geometry = _system_geometry(cfg, "ours")

    old_model = _stage("train", init_model, geometry, seed=cfg["seed"])
    _stage("train", train, old_model, emb_old, pairs, tc,
           csv_path=os.path.join(run_dir, "train_old.csv"))
    save_model(os.path.join(run_dir, "model_old.rbem"), old_model)
    old_codes = _stage("encode", encode_batch, old_model, emb_old.vectors)
    old_index = _stage("build-index", _build, cfg, emb_old, old_codes, old_model)
    if cfg["save_index"]:
        save_index(old_index, os.path.join(run_dir, "index_old"))

    # both new arms start from one fresh init so only the loss differs
    new_init = init_model(geometry, seed=cfg["seed"] + 1)
    bc_model = clone_model(new_init)
    _stage("train", train_backward_compatible, bc_model, old_model, emb_new,
           pairs, tc, old_embeddings=emb_old,
           csv_path=os.path.join(run_dir, "train_bc.csv"))
    save_model(os.path.join(run_dir, "model_bc.rbem"), bc_model)
    ablated_model = clone_model(new_init)
    _stage("train", train, ablated_model, emb_new, pairs, tc,
           csv_path=os.path.join(run_dir, "train_ablated.csv"))
    save_model(os.path.join(run_dir, "model_ablated.rbem"), ablated_model)

    pairings = (
        ("old->old", old_model, emb_old),
        ("bc_new->old", bc_model, emb_new),
        ("ablated_new->old", ablated_model, emb_new),
    )
    csv_rows, means = [], {}
    for label, query_model, query_emb in pairings:
        query_codes = _stage("encode", encode_batch, query_model,
                             query_emb.vectors[rows])
        results = _stage("search", _search_binary, cfg, old_index,
                         query_codes, qids, k)
        report = _stage("eval", recall_at_k, results, truth, k,
                        dataset=cfg["name"], model=label, kernel=cfg["kernel"])
        mc = query_model.config
        csv_rows.append((label, cfg["kernel"], mc.code_dim, mc.planes,
                         mc.total_bits, k, report.mean))
        means[label] = report.mean
    _write_recall_csv(os.path.join(run_dir, "recall.csv"), csv_rows)
    return {"recall": means}


def run_experiment(config, overrides: dict = None) -> dict:
    """Run a full pipeline from a config path or dict; returns a summary.

    The summary dict carries the resolved config, the run directory and
    the per-system mean recalls.  All reports land in
    ``<out_dir>/<name>/seed<seed>/``.
    """
    if isinstance(config, dict):
        raw = config
    else:
        raw = parse_experiment_config(config)
    cfg = resolve_config(raw, overrides)
    out_dir = os.environ.get(REPORT_DIR_ENV, cfg["out_dir"])
    run_dir = os.path.join(out_dir, cfg["name"], "seed%d" % cfg["seed"])
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config_echo.txt"), "w") as f:
        for line in config_echo_lines(cfg):
            f.write(line + "\n")
    with open(os.path.join(run_dir, "version.txt"), "w") as f:
        f.write("binembed %s\n" % __version__)

    if cfg["mode"] == "bc":
        summary = _run_bc(cfg, run_dir)
    else:
        summary = _run_retrieval(cfg, run_dir)
    summary["run_dir"] = run_dir
    summary["config"] = cfg
    return summary
