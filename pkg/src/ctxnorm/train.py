"""Training loop, loss, metrics and the per-epoch metric log.

Deterministic by construction: batch order comes from a seeded generator,
reductions run in fixed order, and (config, seed) reproduce the MetricLog
bit for bit. Per-epoch wall-clock times are tracked separately from the
metric rows so the CSV stays byte-reproducible.
"""

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .rng import make_rng

CSV_HEADER = ("epoch", "split", "loss", "accuracy", "precision", "recall", "f1")


class DivergenceError(RuntimeError):
    """Non-finite loss or gradient during training."""


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch plus the gradient wrt logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = float(-logp[np.arange(n), labels].mean())
    probs = np.exp(logp)
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n, probs


def forward_loss(model, x, labels, ctx=None, training=True):
    """Run the model and the classification loss.

    Returns (loss, aux) where aux carries everything backward_and_step
    needs. ctx is required iff the model contains CN/CN-X layers.
    """
    if model.needs_context and ctx is None:
        raise ValueError("model contains context-normalization layers; ctx is required")
    logits = model.forward(x, ctx=ctx, training=training)
    loss, dlogits, probs = softmax_cross_entropy(logits, np.asarray(labels))
    return loss, {"dlogits": dlogits, "probs": probs, "loss": loss}


def backward_and_step(model, aux, optimizer, progress=0.0, step_index=0):
    """Backprop from the cached loss gradient and apply one optimizer step.

    Every parameter — including trainable normalization statistics — is
    updated; running statistics were already refreshed during forward.
    """
    if not np.isfinite(aux["loss"]):
        raise DivergenceError(f"non-finite loss at step {step_index}")
    model.backward(aux["dlogits"])
    for key, layer in model.named_parameters():
        if not np.isfinite(layer.grads[key[1]]).all():
            raise DivergenceError(f"non-finite gradient for {key} at step {step_index}")
    optimizer.step(model, progress=progress)


def macro_metrics(y_true, y_pred, n_classes):
    """Accuracy plus macro-averaged precision/recall/f1.

    Undefined per-class ratios (no predictions or no members) count as 0,
    so a constant predictor on a balanced 2-class set scores macro-recall
    0.5.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (y_true, y_pred), 1)
    tp = np.diag(confusion).astype(np.float64)
    pred_totals = confusion.sum(axis=0).astype(np.float64)
    true_totals = confusion.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, pred_totals, out=np.zeros(n_classes), where=pred_totals > 0)
    recall = np.divide(tp, true_totals, out=np.zeros(n_classes), where=true_totals > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros(n_classes), where=pr > 0)
    return {
        "accuracy": float((y_true == y_pred).mean()),
        "precision": float(precision.mean()),
        "recall": float(recall.mean()),
        "f1": float(f1.mean()),
    }


@dataclass
class MetricLog:
    """Per-epoch rows plus out-of-band epoch timings."""

    rows: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)

    def add(self, epoch, split, loss, metrics):
        self.rows.append(
            {
                "epoch": int(epoch),
                "split": split,
                "loss": float(loss),
                "accuracy": metrics["accuracy"],
                "precision": metrics["precision"],
                "recall": metrics["recall"],
                "f1": metrics["f1"],
            }
        )

    def last(self, split="train"):
        for row in reversed(self.rows):
            if row["split"] == split:
                return row
        return None

    def first(self, split="train"):
        for row in self.rows:
            if row["split"] == split:
                return row
        return None

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for row in self.rows:
                writer.writerow(
                    [row["epoch"], row["split"]]
                    + [repr(row[key]) for key in CSV_HEADER[2:]]
                )

    @classmethod
    def from_csv(cls, path):
        log = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames) != CSV_HEADER:
                raise ValueError(f"unexpected curves header {reader.fieldnames}")
            for row in reader:
                log.rows.append(
                    {
                        "epoch": int(row["epoch"]),
                        "split": row["split"],
                        **{key: float(row[key]) for key in CSV_HEADER[2:]},
                    }
                )
        return log


def evaluate(model, dataset, ctx_ids=None, batch_size=256):
    """Macro metrics plus mean loss over a dataset.

    Uses the eval-mode normalization paths; a model whose running statistics
    were never updated (e.g. untrained) falls back to batch statistics
    without mutating any state, so this works trained or not.
    """
    training = not model.stats_initialized
    n = dataset.x.shape[0]
    preds = np.empty(n, dtype=np.int64)
    losses = []
    counts = []
    for start in range(0, n, batch_size):
        idx = slice(start, min(start + batch_size, n))
        bctx = ctx_ids[idx] if ctx_ids is not None else None
        if model.needs_context and bctx is None:
            raise ValueError("model contains context-normalization layers; ctx is required")
        logits = model.forward(
            dataset.x[idx], ctx=bctx, training=training, update_stats=False
        )
        loss, _, probs = softmax_cross_entropy(logits, dataset.y[idx])
        preds[idx] = probs.argmax(axis=1)
        losses.append(loss)
        counts.append(probs.shape[0])
    total = sum(counts)
    mean_loss = float(sum(l * c for l, c in zip(losses, counts)) / total)
    metrics = macro_metrics(dataset.y, preds, model.n_classes)
    metrics["loss"] = mean_loss
    return metrics


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 64
    seed: int = 0
    eval_per_epoch: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def train(model, dataset, optimizer, config, ctx_assignment=None, eval_dataset=None):
    """Run the training loop and return the MetricLog.

    Context ids for each shuffled batch are sliced from the assignment;
    batches are context-agnostic random shuffles, so a batch may contain any
    context mix. Train rows log the epoch's average batch loss/accuracy.
    """
    log = MetricLog()
    n = dataset.x.shape[0]
    if config.epochs == 0:
        return log
    ctx_ids = ctx_assignment.ids if ctx_assignment is not None else None
    if model.needs_context and ctx_ids is None:
        raise ValueError("model contains context-normalization layers; ctx is required")
    shuffle_rng = make_rng(config.seed)
    steps_per_epoch = int(np.ceil(n / config.batch_size))
    total_steps = config.epochs * steps_per_epoch
    step = 0
    eval_ctx = None
    if eval_dataset is not None and ctx_assignment is not None:
        eval_ctx = ctx_assignment.assign(eval_dataset)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        preds = np.empty(n, dtype=np.int64)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            bctx = ctx_ids[idx] if ctx_ids is not None else None
            loss, aux = forward_loss(model, dataset.x[idx], dataset.y[idx], ctx=bctx)
            backward_and_step(
                model, aux, optimizer, progress=step / total_steps, step_index=step
            )
            epoch_loss += loss * idx.size
            preds[idx] = aux["probs"].argmax(axis=1)
            step += 1
        log.add(epoch, "train", epoch_loss / n, macro_metrics(dataset.y, preds, model.n_classes))
        if eval_dataset is not None:
            metrics = evaluate(model, eval_dataset, ctx_ids=eval_ctx)
            log.add(epoch, "eval", metrics["loss"], metrics)
        elif config.eval_per_epoch:
            metrics = evaluate(model, dataset, ctx_ids=ctx_ids)
            log.add(epoch, "eval", metrics["loss"], metrics)
        log.epoch_seconds.append(time.perf_counter() - t0)
    return log
