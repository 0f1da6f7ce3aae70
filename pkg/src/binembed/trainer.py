"""Contrastive training of the binarization model.

The optimization loop follows the momentum-queue recipe: a frozen-rate
moving copy of the model encodes positives and feeds a FIFO queue of
negative candidates; per anchor, the hardest queue entries (highest
cosine, excluding the anchor's own cluster) enter an NCE softmax loss
over decoded code vectors.  Gradients flow through the straight-through
binarization, are clipped by global norm, and applied with Adam.

Backward-compatible mode trains a new model against a frozen old model:
the total objective adds a second contrastive term whose positives and
queue are the old model's codes, so new-model queries stay comparable
against an index of old codes without re-encoding it.
"""

import math
import os
from dataclasses import dataclass, fields

import numpy as np

from .embstore import EmbeddingSet, PairList
from .model import RbeModel, backward, clone_model, encode_batch, forward

CSV_HEADER = "step,loss,bc_loss,grad_norm,queue_fill,recall@10_val"


# ------------------------------------------------------------------ config


@dataclass
class TrainConfig:
    """Hyperparameters; defaults follow the training recipe."""

    batch_size: int = 64
    learning_rate: float = 0.02
    temperature: float = 0.07
    grad_clip_norm: float = 5.0
    queue_len: int = 0  # 0 means 16 * batch_size
    hard_top_k: int = 64
    momentum_coef: float = 0.999
    epochs: int = 5
    seed: int = 0
    bc_weight: float = 1.0
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.queue_len == 0:
            self.queue_len = 16 * self.batch_size

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.learning_rate <= 0 or self.temperature <= 0 or self.grad_clip_norm <= 0:
            raise ValueError("learning_rate, temperature and grad_clip_norm must be positive")
        if self.queue_len < 1 or self.queue_len % self.batch_size != 0:
            raise ValueError("queue_len must be a positive multiple of batch_size")
        if not 1 <= self.hard_top_k <= self.queue_len:
            raise ValueError("hard_top_k must be in [1, queue_len]")
        if not 0.0 <= self.momentum_coef < 1.0:
            raise ValueError("momentum_coef must be in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.bc_weight < 0:
            raise ValueError("bc_weight must be non-negative")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")


def parse_train_config(path) -> TrainConfig:
    """Read a flat key=value text file (# comments allowed)."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    with open(str(path)) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError("%s:%d: expected key=value" % (path, lineno))
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise ValueError("%s:%d: unknown config key %r" % (path, lineno, key))
            kind = types[key]
            if kind == "int" or kind is int:
                values[key] = int(raw)
            elif kind == "float" or kind is float:
                values[key] = float(raw)
            else:
                values[key] = raw
    cfg = TrainConfig(**values)
    cfg.validate()
    return cfg


def config_lines(cfg: TrainConfig) -> list:
    """key=value echo of a config, in declaration order."""
    return ["%s=%s" % (f.name, getattr(cfg, f.name)) for f in fields(TrainConfig)]


# --------------------------------------------------------------- optimizer


class Adam:
    """Standard Adam over a dict of named parameter arrays."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict, lr: float = None) -> None:
        lr = self.lr if lr is None else float(lr)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def global_grad_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


def clip_grads_(grads: dict, max_norm: float) -> float:
    """Scale gradients in place to global norm <= max_norm; returns pre-clip norm."""
    norm = global_grad_norm(grads)
    if norm > max_norm and norm > 0:
        scale = np.float32(max_norm / norm)
        for g in grads.values():
            g *= scale
    return norm


# ------------------------------------------------------------------ queue


class NegativeQueue:
    """Fixed-capacity FIFO of candidate negatives.

    Entries are decoded unit code vectors with their source ids; during
    training they are produced exclusively by the momentum model (or the
    frozen old model in backward-compatible mode).  Pushing past
    capacity evicts the oldest entries, so the backing arrays are always
    in insertion order.
    """

    def __init__(self, capacity: int, dim: int):
        self.capacity = int(capacity)
        self.units = np.empty((0, dim), dtype=np.float32)
        self.ids = np.empty(0, dtype=np.uint64)

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @property
    def fill(self) -> float:
        return self.size / self.capacity

    def push(self, units: np.ndarray, ids: np.ndarray) -> None:
        units = np.asarray(units, dtype=np.float32)
        ids = np.asarray(ids, dtype=np.uint64)
        if units.shape[0] != ids.shape[0]:
            raise ValueError("units/ids length mismatch")
        self.units = np.concatenate([self.units, units])[-self.capacity:]
        self.ids = np.concatenate([self.ids, ids])[-self.capacity:]


def select_hard_negatives(anchor_unit: np.ndarray, queue: NegativeQueue,
                          k: int, exclude_ids=()) -> tuple:
    """Hardest (most similar) queue entries for one anchor.

    Returns ``(units, ids)`` ordered by similarity descending, ties by
    insertion order; entries whose id is in ``exclude_ids`` are skipped,
    and fewer than k entries are returned when the queue runs short.
    """
    if queue.size == 0:
        raise ValueError("negative queue is empty")
    sims = queue.units @ np.asarray(anchor_unit, dtype=np.float32)
    keep = np.flatnonzero(
        ~np.isin(queue.ids, np.asarray(list(exclude_ids), dtype=np.uint64))
        if len(exclude_ids) else np.ones(queue.size, dtype=bool))
    order = keep[np.argsort(-sims[keep], kind="stable")][:k]
    return queue.units[order], queue.ids[order]


# ------------------------------------------------------------------- loss


def contrastive_loss(anchors_decoded: np.ndarray, positive_units: np.ndarray,
                     negatives, temperature: float):
    """NCE softmax over cosine similarities of decoded codes.

    ``negatives`` is a per-anchor sequence of (k_i, m) unit-vector
    arrays.  Returns ``(loss, grad)`` where grad is the exact gradient
    with respect to the anchor decoded vectors (the cosine's
    normalization jacobian included); positives and negatives are
    treated as constants.
    """
    a = np.asarray(anchors_decoded, dtype=np.float64)
    pos = np.asarray(positive_units, dtype=np.float64)
    n, m = a.shape
    if isinstance(negatives, np.ndarray) and negatives.ndim == 3:
        # uniform per-anchor counts: skip the ragged assembly
        kmax = negatives.shape[1]
        counts = np.full(n, kmax, dtype=np.int64)
        negs = negatives.astype(np.float64)
    else:
        counts = np.array([len(x) for x in negatives], dtype=np.int64)
        kmax = int(counts.max()) if n else 0
        negs = np.zeros((n, kmax, m), dtype=np.float64)
        for i, x in enumerate(negatives):
            if len(x):
                negs[i, : len(x)] = x

    norms = np.sqrt((a * a).sum(axis=1, keepdims=True))
    ahat = a / norms
    logits = np.empty((n, 1 + kmax), dtype=np.float64)
    logits[:, 0] = (ahat * pos).sum(axis=1) / temperature
    if kmax:
        logits[:, 1:] = np.einsum("nm,nkm->nk", ahat, negs) / temperature
        pad = np.arange(kmax)[None, :] >= counts[:, None]
        logits[:, 1:][pad] = -np.inf
    mx = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - mx)
    z = ex.sum(axis=1, keepdims=True)
    loss = float(np.mean(np.log(z[:, 0]) + mx[:, 0] - logits[:, 0]))

    dlogits = ex / z
    dlogits[:, 0] -= 1.0
    dlogits /= n * temperature
    g_ahat = dlogits[:, 0:1] * pos
    if kmax:
        g_ahat += np.einsum("nk,nkm->nm", np.where(np.isneginf(logits[:, 1:]), 0.0,
                                                   dlogits[:, 1:]), negs)
    inner = (g_ahat * ahat).sum(axis=1, keepdims=True)
    grad = (g_ahat - ahat * inner) / norms
    return loss, grad.astype(np.float32)


# --------------------------------------------------------------- momentum


def momentum_update(online: RbeModel, momentum_copy: RbeModel, coef: float) -> None:
    """theta_m <- coef * theta_m + (1 - coef) * theta_online; BN stats copied."""
    if online.config != momentum_copy.config:
        raise ValueError("online and momentum models have different configs")
    coef = np.float32(coef)
    one_minus = np.float32(1.0 - float(coef))
    online_params = online.params()
    for name, p in momentum_copy.params().items():
        p *= coef
        p += one_minus * online_params[name]
    online_bufs = online.buffers()
    for name, b in momentum_copy.buffers().items():
        np.copyto(b, online_bufs[name])


# ------------------------------------------------------------- exclusions


class PairComponents:
    """Connected components of the positive-pair graph.

    Anchors must not see their own cluster in the negative set; linked
    ids (directly or transitively) share a component label.
    """

    def __init__(self, ids: np.ndarray, pairs: PairList):
        self.sorted_ids = np.sort(np.asarray(ids, dtype=np.uint64))
        n = self.sorted_ids.shape[0]
        parent = np.arange(n, dtype=np.int64)

        def find(i):
            root = i
            while parent[root] != root:
                root = parent[root]
            while parent[i] != root:
                parent[i], i = root, parent[i]
            return root

        a_rows = np.searchsorted(self.sorted_ids, pairs.anchor_ids)
        p_rows = np.searchsorted(self.sorted_ids, pairs.positive_ids)
        for i, j in zip(a_rows.tolist(), p_rows.tolist()):
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[ri] = rj
        self.labels = np.array([find(i) for i in range(n)], dtype=np.int64)

    def labels_for(self, ids: np.ndarray) -> np.ndarray:
        rows = np.searchsorted(self.sorted_ids, np.asarray(ids, dtype=np.uint64))
        return self.labels[rows]


def _batch_hard_negatives(anchor_units: np.ndarray, anchor_labels: np.ndarray,
                          queue: NegativeQueue, queue_labels: np.ndarray,
                          k: int) -> list:
    """Per-anchor hardest negatives with own-cluster exclusion.

    Matches :func:`select_hard_negatives` per anchor: similarity
    descending, ties by insertion order.  Excluded entries are pushed to
    -inf so one stable batched argsort replaces per-anchor sorts.
    """
    if queue.size == 0:
        return [np.empty((0, anchor_units.shape[1]), np.float32)] * anchor_units.shape[0]
    sims = (anchor_units @ queue.units.T).astype(np.float64)
    excluded = queue_labels[None, :] == anchor_labels[:, None]
    sims[excluded] = -np.inf
    # Fold the insertion-order tie-break into the sort key: distinct f32
    # similarities at the top-k boundary differ by at least one ulp, far
    # above queue_len * 1e-13, so the penalty only separates exact ties.
    key = sims - np.arange(queue.size, dtype=np.float64)[None, :] * 1e-13
    kk = min(k, queue.size)
    if kk < queue.size:
        part = np.argpartition(-key, kk - 1, axis=1)[:, :kk]
        vals = np.take_along_axis(key, part, axis=1)
        order = np.take_along_axis(part, np.argsort(-vals, axis=1, kind="stable"), axis=1)
    else:
        order = np.argsort(-key, axis=1, kind="stable")
    valid = np.minimum(kk, queue.size - excluded.sum(axis=1))
    if valid.min() == kk:
        return queue.units[order]
    return [queue.units[order[i, : valid[i]]] for i in range(anchor_units.shape[0])]


# ---------------------------------------------------------------- reports


@dataclass
class TrainStepReport:
    step: int
    loss: float
    bc_loss: float
    grad_norm: float
    queue_fill: float


class _CsvLog:
    def __init__(self, path):
        self.path = str(path) if path else None
        if self.path:
            os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
            if not os.path.exists(self.path) or os.path.getsize(self.path) == 0:
                with open(self.path, "w") as f:
                    f.write(CSV_HEADER + "\n")

    def row(self, step, loss, bc_loss, grad_norm, queue_fill, recall):
        if not self.path:
            return
        with open(self.path, "a") as f:
            f.write("%d,%.6f,%.6f,%.6f,%.4f,%s\n"
                    % (step, loss, bc_loss, grad_norm, queue_fill,
                       "" if recall is None else "%.4f" % recall))


# ----------------------------------------------------------- training loop


def _lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if cfg.lr_schedule == "constant" or total_steps <= 1:
        return cfg.learning_rate
    frac = step / max(1, total_steps - 1)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * frac))


def _row_lookup(embeddings: EmbeddingSet):
    order = np.argsort(embeddings.ids, kind="stable")
    sorted_ids = embeddings.ids[order]

    def rows(ids):
        pos = np.searchsorted(sorted_ids, np.asarray(ids, dtype=np.uint64))
        return order[pos]

    return rows


def _train_impl(model: RbeModel, embeddings: EmbeddingSet, pairs: PairList,
                cfg: TrainConfig, old_model: RbeModel = None,
                old_embeddings: EmbeddingSet = None, csv_path=None, val_fn=None):
    cfg.validate()
    if len(pairs) == 0:
        raise ValueError("empty pair list")
    if cfg.batch_size > len(pairs):
        raise ValueError("batch_size %d exceeds the %d available pairs"
                         % (cfg.batch_size, len(pairs)))
    if old_model is not None and old_embeddings is None:
        old_embeddings = embeddings

    rng = np.random.default_rng(cfg.seed)
    momentum_model = clone_model(model)
    m = model.config.code_dim
    queue = NegativeQueue(cfg.queue_len, m)
    bc_queue = NegativeQueue(cfg.queue_len, m) if old_model is not None else None
    comps = PairComponents(embeddings.ids, pairs)
    rows = _row_lookup(embeddings)
    old_rows = _row_lookup(old_embeddings) if old_model is not None else None
    params = model.params()
    opt = Adam(params, cfg.learning_rate)
    log = _CsvLog(csv_path)

    steps_per_epoch = len(pairs) // cfg.batch_size
    total_steps = steps_per_epoch * cfg.epochs
    reports = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        ep_loss = []
        ep_bc = []
        ep_norm = []
        for b in range(steps_per_epoch):
            sel = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            aid = pairs.anchor_ids[sel]
            pid = pairs.positive_ids[sel]
            anchors_f = embeddings.vectors[rows(aid)]
            codes, tape = forward(model, anchors_f, train=True, keep_tape=True)

            pos_codes = encode_batch(momentum_model, embeddings.vectors[rows(pid)])
            queue.push(pos_codes.unit(), pid)
            if old_model is not None:
                old_pos = encode_batch(old_model, old_embeddings.vectors[old_rows(pid)])
                bc_queue.push(old_pos.unit(), pid)

            anchor_units = codes.unit()
            a_labels = comps.labels_for(aid)
            negs = _batch_hard_negatives(anchor_units, a_labels, queue,
                                         comps.labels_for(queue.ids), cfg.hard_top_k)
            loss, grad = contrastive_loss(codes.decoded, pos_codes.unit(), negs,
                                          cfg.temperature)
            bc_loss = 0.0
            if old_model is not None:
                bc_negs = _batch_hard_negatives(anchor_units, a_labels, bc_queue,
                                                comps.labels_for(bc_queue.ids),
                                                cfg.hard_top_k)
                bc_loss, bc_grad = contrastive_loss(codes.decoded, old_pos.unit(),
                                                    bc_negs, cfg.temperature)
                grad = grad + np.float32(cfg.bc_weight) * bc_grad

            total = loss + cfg.bc_weight * bc_loss
            if not math.isfinite(total):
                raise RuntimeError(
                    "non-finite loss %r at step %d (epoch %d batch %d, "
                    "anchor ids %s...)" % (total, step, epoch, b, aid[:4].tolist()))

            grads, _ = backward(model, tape, grad)
            gnorm = clip_grads_(grads, cfg.grad_clip_norm)
            opt.step(params, grads, _lr_at(cfg, step, total_steps))
            momentum_update(model, momentum_model, cfg.momentum_coef)

            reports.append(TrainStepReport(step, loss, bc_loss, gnorm, queue.fill))
            ep_loss.append(loss)
            ep_bc.append(bc_loss)
            ep_norm.append(gnorm)
            step += 1
        recall = val_fn(model) if val_fn is not None else None
        log.row(step - 1, float(np.mean(ep_loss)), float(np.mean(ep_bc)),
                float(np.mean(ep_norm)), queue.fill, recall)
    return model, reports


def train(model: RbeModel, embeddings: EmbeddingSet, pairs: PairList,
          cfg: TrainConfig, csv_path=None, val_fn=None):
    """Contrastive training; returns ``(model, per-step reports)``."""
    return _train_impl(model, embeddings, pairs, cfg,
                       csv_path=csv_path, val_fn=val_fn)


def train_backward_compatible(new_model: RbeModel, old_model: RbeModel,
                              embeddings: EmbeddingSet, pairs: PairList,
                              cfg: TrainConfig, old_embeddings: EmbeddingSet = None,
                              csv_path=None, val_fn=None):
    """Train the new model with the compatibility term against a frozen old model.

    ``embeddings`` are the new backbone's vectors; ``old_embeddings``
    (default: same set) are what the frozen old model encodes for the
    compatibility positives and its queue.
    """
    return _train_impl(new_model, embeddings, pairs, cfg, old_model=old_model,
                       old_embeddings=old_embeddings, csv_path=csv_path, val_fn=val_fn)
