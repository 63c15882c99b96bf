"""Dataset splitting, batching, optimization, and evaluation metrics.

Training is bit-reproducible for a fixed config: shuffling, dropout, and
init all draw from counter-based generators addressed by (seed, stream,
epoch, item), batch shards are reduced in a fixed order, and checkpoints
serialize with sorted keys.
"""

from __future__ import annotations

import csv
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import model as M
from .graphs import Corpus
from .junction import decompose

STREAM_SPLIT = 2
STREAM_SHUFFLE = 3
STREAM_DROPOUT = 4

LOG_COLUMNS = ("epoch", "split", "loss", "metric", "lr", "seconds")


class TrainingError(RuntimeError):
    """Aborted or misconfigured training run."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters.

    split is (train, valid, test) fractions summing to 1; optimizer is
    "adam" or "adamw" (decoupled weight decay); scheduler "none" or "rop"
    (reduce LR on plateau).  threads > 1 evaluates batch shards in a pool
    while keeping gradient reduction order fixed.
    """

    epochs: int = 500
    lr: float = 1e-3
    optimizer: str = "adam"
    weight_decay: float = 0.01
    scheduler: str = "rop"
    rop_factor: float = 0.5
    rop_patience: int = 10
    batch_size: int = 64
    seed: int = 0
    split: tuple = (0.8, 0.1, 0.1)
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.scheduler not in ("none", "rop"):
            raise ValueError(f"unknown scheduler {self.scheduler!r}")
        if not 0.0 < self.rop_factor < 1.0:
            raise ValueError("rop_factor must be in (0, 1)")
        if self.rop_patience < 1:
            raise ValueError("rop_patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        split = tuple(float(x) for x in self.split)
        object.__setattr__(self, "split", split)
        if len(split) != 3 or any(x < 0 for x in split) \
                or abs(sum(split) - 1.0) > 1e-9:
            raise ValueError("split must be three nonnegative ratios summing to 1")

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["split"] = list(self.split)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "split" in kwargs:
            kwargs["split"] = tuple(kwargs["split"])
        return cls(**kwargs)


def split_dataset(records, ratios, seed: int):
    """Deterministic shuffled split into (train, valid, test) lists."""
    n = len(records)
    if n == 0:
        raise TrainingError("empty dataset")
    perm = ag.make_rng(seed, STREAM_SPLIT).permutation(n)
    n_train = int(np.floor(ratios[0] * n))
    n_valid = int(np.floor(ratios[1] * n))
    train = [records[i] for i in perm[:n_train]]
    valid = [records[i] for i in perm[n_train:n_train + n_valid]]
    test = [records[i] for i in perm[n_train + n_valid:]]
    return train, valid, test


@dataclass
class Batch:
    """Model inputs plus the target matrix and its missing-label mask."""

    inputs: M.ModelBatch
    targets: np.ndarray     # (B, tasks)
    label_mask: np.ndarray  # (B, tasks) bool
    indices: list           # dataset positions of the items


def make_targets(records, num_tasks: int):
    """Stack record targets; None entries become masked-out zeros."""
    b = len(records)
    targets = np.zeros((b, num_tasks))
    mask = np.zeros((b, num_tasks), dtype=bool)
    for i, rec in enumerate(records):
        for j, value in enumerate(rec.targets):
            if value is not None:
                targets[i, j] = value
                mask[i, j] = True
    return targets, mask


# --- optimizers -----------------------------------------------------------------

class Adam:
    """Adam / AdamW on a named parameter dict.

    AdamW applies decoupled weight decay (lr * wd * param) to every
    parameter.  Parameters with no gradient this step are left untouched.
    """

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self._v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, grads: dict):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name in sorted(self.params):
            g = grads.get(name)
            if g is None:
                continue
            p = self.params[name]
            m = self._m[name]
            v = self._v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update


class ReduceOnPlateau:
    """Halve-style LR decay after `patience` epochs without improvement.

    An improvement is a loss more than 1e-8 below the best seen.
    """

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 10):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = None
        self.bad = 0

    def step(self, loss: float) -> float:
        if self.best is None or loss < self.best - 1e-8:
            self.best = loss
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr *= self.factor
                self.bad = 0
        return self.lr


# --- metrics --------------------------------------------------------------------

def mae_metric(preds: np.ndarray, targets: np.ndarray, mask=None) -> float:
    if mask is None:
        mask = np.ones_like(preds, dtype=bool)
    return float(np.abs(preds - targets)[mask].mean())


def _binary_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    ranks[order] = np.arange(1, len(scores) + 1)
    # average ranks over score ties, the standard rank-statistic convention
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    pos = labels > 0.5
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0)
                 / (n_pos * n_neg))


def _binary_ap(scores: np.ndarray, labels: np.ndarray) -> float:
    order = np.lexsort((np.arange(len(scores)), -scores))
    lab = labels[order] > 0.5
    tp = np.cumsum(lab)
    precision = tp / np.arange(1, len(lab) + 1)
    n_pos = int(lab.sum())
    # step interpolation: sum precision at each recall increment
    return float(precision[lab].sum() / n_pos)


def _per_task(scores, labels, mask, fn, name):
    values = []
    for j in range(scores.shape[1]):
        keep = mask[:, j]
        lab = labels[keep, j]
        if keep.sum() == 0 or len(np.unique(lab > 0.5)) < 2:
            warnings.warn(f"task {j} has a single class; excluded from {name}")
            continue
        values.append(fn(scores[keep, j], lab))
    if not values:
        raise TrainingError(f"no task with both classes present for {name}")
    return float(np.mean(values))


def roc_auc_metric(scores, labels, mask=None) -> float:
    """Rank-statistic ROC-AUC, averaged over tasks with both classes."""
    scores, labels = np.atleast_2d(scores.T).T, np.atleast_2d(labels.T).T
    if mask is None:
        mask = np.ones_like(scores, dtype=bool)
    return _per_task(scores, labels, mask, _binary_auc, "ROC-AUC")


def ap_metric(scores, labels, mask=None) -> float:
    """Average precision by step interpolation, averaged over tasks."""
    scores, labels = np.atleast_2d(scores.T).T, np.atleast_2d(labels.T).T
    if mask is None:
        mask = np.ones_like(scores, dtype=bool)
    return _per_task(scores, labels, mask, _binary_ap, "AP")


METRICS = {"mae": mae_metric, "roc_auc": roc_auc_metric, "ap": ap_metric}


# --- forward/backward plumbing ----------------------------------------------------

def _loss_tensor(pred: ag.Tensor, targets, mask, task_type: str) -> ag.Tensor:
    if task_type == "classification":
        return ag.bce_with_logits_loss(pred, targets, mask)
    return ag.mae_loss(pred, targets)


def _shard_view(params: dict) -> dict:
    # shares .data arrays, private .grad slots
    return {k: ag.Tensor(v.data, requires_grad=True, dtype=v.data.dtype)
            for k, v in params.items()}


def _run_shard(params, config, items, records, task_type, num_tasks, ctx_args):
    view = _shard_view(params)
    batch_inputs = M.make_batch(items, config)
    targets, mask = make_targets(records, num_tasks)
    ctx = M.ForwardContext(**ctx_args)
    with ag.Tape() as tape:
        result = M.forward_batch(view, config, batch_inputs, ctx)
        loss = _loss_tensor(result.prediction, targets, mask, task_type)
        weight = int(mask.sum()) if task_type == "classification" \
            else targets.size
        ag.backward(ag.scale(loss, float(weight)), tape)
    grads = {k: v.grad for k, v in view.items() if v.grad is not None}
    return float(loss.data[0]), weight, grads


def _batched(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def predict(params, config, prepared, batch_size: int = 64) -> np.ndarray:
    """Evaluation-mode predictions for a list of PreparedGraph."""
    outputs = []
    for chunk in _batched(prepared, batch_size):
        batch = M.make_batch(list(chunk), config)
        result = M.forward_batch(params, config, batch, M.ForwardContext())
        outputs.append(result.prediction.data.copy())
    return np.vstack(outputs)


def evaluate(params, config, prepared, records, num_tasks, metric: str,
             batch_size: int = 64) -> float:
    """Score a record list with MAE, ROC-AUC, or AP."""
    if metric not in METRICS:
        raise TrainingError(f"unknown metric {metric!r}")
    preds = predict(params, config, prepared, batch_size)
    targets, mask = make_targets(records, num_tasks)
    if metric == "mae":
        return mae_metric(preds, targets, mask)
    return METRICS[metric](preds, targets, mask)


def eval_loss(params, config, prepared, records, num_tasks, task_type,
              batch_size: int = 64) -> float:
    """Dropout-free loss over a split (the plateau/selection monitor)."""
    total = 0.0
    weight = 0
    for lo in range(0, len(prepared), batch_size):
        chunk = prepared[lo:lo + batch_size]
        recs = records[lo:lo + batch_size]
        batch = M.make_batch(list(chunk), config)
        targets, mask = make_targets(recs, num_tasks)
        result = M.forward_batch(params, config, batch, M.ForwardContext())
        loss = _loss_tensor(result.prediction, targets, mask, task_type)
        w = int(mask.sum()) if task_type == "classification" else targets.size
        total += float(loss.data[0]) * w
        weight += w
    return total / weight


@dataclass
class TrainResult:
    params: dict
    meta: dict
    log_rows: list = field(default_factory=list)
    best_epoch: int | None = None


def prepare_corpus(corpus: Corpus, config) -> tuple:
    """Decompose every record once and build the cluster vocabulary."""
    decomps = [decompose(rec.graph) for rec in corpus.records]
    vocab = M.build_cluster_vocab(decomps)
    prepared = [M.prepare(rec.graph, config, vocab, corpus.num_atom_types, d)
                for rec, d in zip(corpus.records, decomps)]
    return prepared, vocab


def train_on_corpus(corpus: Corpus, model_config, train_config: TrainConfig,
                    checkpoint_path=None, log_path=None,
                    params: dict | None = None) -> TrainResult:
    """Full training loop; returns best parameters and the metric log.

    The best checkpoint is selected by validation loss (training loss when
    the split has no validation part).  Raises TrainingError with the
    epoch/batch position if the loss goes NaN.
    """
    ag.set_default_dtype(model_config.precision)
    cfg = train_config
    prepared, cluster_vocab = prepare_corpus(corpus, model_config)
    indexed = list(range(len(corpus.records)))
    tr_idx, va_idx, te_idx = split_dataset(indexed, cfg.split, cfg.seed)
    if not tr_idx:
        raise TrainingError("training split is empty")
    num_tasks = corpus.num_tasks
    if params is None:
        params = M.init_params(model_config, corpus.num_atom_types,
                               len(cluster_vocab), num_tasks, cfg.seed)
    meta = {
        "model": model_config.to_dict(),
        "train": cfg.to_dict(),
        "num_tasks": num_tasks,
        "task_type": corpus.task_type,
        "num_atom_types": corpus.num_atom_types,
        "cluster_vocab": cluster_vocab,
        "atom_vocab": corpus.atom_vocab.to_json() if corpus.atom_vocab else None,
    }
    optimizer = Adam(params, cfg.lr,
                     weight_decay=cfg.weight_decay
                     if cfg.optimizer == "adamw" else 0.0)
    scheduler = ReduceOnPlateau(cfg.lr, cfg.rop_factor, cfg.rop_patience) \
        if cfg.scheduler == "rop" else None
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    log_rows = []
    best_loss = None
    best_epoch = None
    best_params = {k: v.data.copy() for k, v in params.items()}
    try:
        for epoch in range(1, cfg.epochs + 1):
            tick = time.monotonic()
            order = ag.make_rng(cfg.seed, STREAM_SHUFFLE, epoch) \
                .permutation(len(tr_idx))
            epoch_loss = 0.0
            epoch_weight = 0
            for batch_id, chunk in enumerate(_batched(order, cfg.batch_size)):
                indices = [tr_idx[i] for i in chunk]
                loss_value, weight = _train_batch(
                    params, model_config, cfg, prepared, corpus, indices,
                    epoch, optimizer, pool)
                if not np.isfinite(loss_value):
                    raise TrainingError(
                        f"NaN loss at epoch {epoch}, batch {batch_id}")
                epoch_loss += loss_value * weight
                epoch_weight += weight
            train_loss = epoch_loss / epoch_weight
            seconds = time.monotonic() - tick
            log_rows.append((epoch, "train", train_loss, "",
                             optimizer.lr, seconds))
            monitor = train_loss
            if va_idx:
                va_prep = [prepared[i] for i in va_idx]
                va_recs = [corpus.records[i] for i in va_idx]
                valid_loss = eval_loss(params, model_config, va_prep, va_recs,
                                       num_tasks, corpus.task_type,
                                       cfg.batch_size)
                metric_name = "mae" if corpus.task_type == "regression" \
                    else "roc_auc"
                try:
                    valid_metric = evaluate(params, model_config, va_prep,
                                            va_recs, num_tasks, metric_name,
                                            cfg.batch_size)
                except TrainingError:
                    valid_metric = ""
                seconds = time.monotonic() - tick
                log_rows.append((epoch, "valid", valid_loss, valid_metric,
                                 optimizer.lr, seconds))
                monitor = valid_loss
            if scheduler is not None:
                optimizer.lr = scheduler.step(monitor)
            if best_loss is None or monitor < best_loss:
                best_loss = monitor
                best_epoch = epoch
                best_params = {k: v.data.copy() for k, v in params.items()}
    finally:
        if pool is not None:
            pool.shutdown()
    for name, data in best_params.items():
        params[name].data = data
    meta["best_epoch"] = best_epoch
    if checkpoint_path is not None:
        M.save_checkpoint(checkpoint_path, params, meta)
    if log_path is not None:
        write_log(log_path, log_rows)
    return TrainResult(params=params, meta=meta, log_rows=log_rows,
                       best_epoch=best_epoch)


def _train_batch(params, model_config, cfg, prepared, corpus, indices,
                 epoch, optimizer, pool):
    shards = _partition(indices, cfg.threads)
    jobs = []
    for shard in shards:
        items = [prepared[i] for i in shard]
        records = [corpus.records[i] for i in shard]
        rngs = [ag.make_rng(cfg.seed, STREAM_DROPOUT, epoch, i) for i in shard]
        ctx_args = dict(training=True, item_rngs=rngs)
        jobs.append((items, records, ctx_args))
    if pool is None:
        outs = [_run_shard(params, model_config, items, records,
                           corpus.task_type, corpus.num_tasks, ctx_args)
                for items, records, ctx_args in jobs]
    else:
        futures = [pool.submit(_run_shard, params, model_config, items,
                               records, corpus.task_type,
                               corpus.num_tasks, ctx_args)
                   for items, records, ctx_args in jobs]
        outs = [f.result() for f in futures]
    total_weight = sum(w for _, w, _ in outs)
    grads: dict = {}
    loss_value = 0.0
    for shard_loss, weight, shard_grads in outs:  # fixed shard order
        loss_value += shard_loss * weight / total_weight
        for name, g in shard_grads.items():
            scaled = g / total_weight
            if name in grads:
                grads[name] = grads[name] + scaled
            else:
                grads[name] = scaled
    optimizer.step(grads)
    return loss_value, total_weight


def _partition(indices, shards):
    if shards <= 1 or len(indices) <= 1:
        return [list(indices)]
    size = int(np.ceil(len(indices) / shards))
    return [list(indices[i:i + size]) for i in range(0, len(indices), size)]


def write_log(path, rows):
    """CSV metric log: epoch, split, loss, metric, lr, seconds."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for epoch, split, loss, metric, lr, seconds in rows:
            writer.writerow([epoch, split, repr(float(loss)),
                             repr(float(metric)) if metric != "" else "",
                             repr(float(lr)), f"{seconds:.3f}"])
