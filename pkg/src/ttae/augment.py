"""Minority-class and small-dataset augmentation workflows with classifier
metrics. Baselines (replication, jittering) and model-based augmentation
share one LabeledDataset currency; augmentation never touches a test split.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import layers as L
from . import model as M
from . import tensor as T
from .tensor import Tape, Tensor, adam_init, adam_step

_CLS_STEPS = 1000
_CLS_BATCH = 64
_CLS_LR = 1e-3
_CLS_HIDDEN = 128
_PROB_EPS = 1e-7

GROW_AMOUNTS = (25, 50, 75, 100)


@dataclass
class LabeledDataset:
    batch: np.ndarray   # (n, t, c)
    labels: np.ndarray  # (n,) binary ints
    split: str = "train"

    def __post_init__(self):
        self.batch = np.asarray(self.batch, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.batch.shape[0],):
            raise ValueError(
                f"labels {self.labels.shape} do not match batch {self.batch.shape}"
            )


@dataclass
class ClassifierMetrics:
    accuracy: float
    recall: float
    precision: float
    auc_roc: float
    auc_prc: float


def metrics_json_row(metrics, augmentation, seed):
    return json.dumps({
        "accuracy": metrics.accuracy,
        "recall": metrics.recall,
        "precision": metrics.precision,
        "auc_roc": metrics.auc_roc,
        "auc_prc": metrics.auc_prc,
        "augmentation": augmentation,
        "seed": seed,
    }, sort_keys=True)


def jitter(batch, sigma=0.03, seed=0):
    """Add N(0, sigma^2) noise in normalized units, clamped back to [0, 1]."""
    if sigma < 0:
        raise ValueError("jitter: sigma must be >= 0")
    batch = np.asarray(batch, dtype=np.float32)
    if sigma == 0:
        return batch.copy()
    rng = np.random.default_rng(seed)
    noisy = batch + rng.normal(0.0, sigma, size=batch.shape).astype(np.float32)
    return np.clip(noisy, 0.0, 1.0)


def replicate(minority, target_count):
    """Cyclic repetition of the minority batch up to target_count samples."""
    minority = np.asarray(minority)
    n = minority.shape[0]
    if n == 0:
        raise ValueError("replicate: empty minority batch")
    if target_count < n:
        raise ValueError(f"replicate: target {target_count} < current {n}")
    idx = np.arange(target_count) % n
    return minority[idx].copy()


def _require_trained(bundle):
    if not bundle.config.trained:
        raise ValueError("augment_with_model: generator bundle is not trained")


def augment_with_model(train, bundle, mode, amount=None, seed=0):
    """Extend a training split with generated samples.

    mode='balance_minority': `bundle` generates the minority class (it must
    have been trained on minority samples only) until both counts are equal.
    mode='grow_percent': append amount% generated samples per class, via a
    {label: bundle} mapping (or one bundle when only one class is present).
    Generated samples carry the label of the bundle that produced them.
    """
    labels = train.labels
    counts = {int(v): int((labels == v).sum()) for v in np.unique(labels)}

    if mode == "balance_minority":
        if len(counts) != 2:
            raise ValueError("balance_minority expects a binary training split")
        minority = min(counts, key=counts.get)
        majority = max(counts, key=counts.get)
        need = counts[majority] - counts[minority]
        if isinstance(bundle, dict):
            bundle = bundle[minority]
        _require_trained(bundle)
        if need == 0:
            return LabeledDataset(train.batch.copy(), labels.copy(), train.split)
        generated = M.generate(bundle, need, seed)
        new_batch = np.concatenate([train.batch, generated])
        new_labels = np.concatenate([labels, np.full(need, minority, dtype=np.int64)])
        return LabeledDataset(new_batch, new_labels, train.split)

    if mode == "grow_percent":
        if amount not in GROW_AMOUNTS:
            raise ValueError(f"grow_percent amount must be one of {GROW_AMOUNTS}")
        if isinstance(bundle, dict):
            bundles = {int(k): v for k, v in bundle.items()}
        elif len(counts) == 1:
            bundles = {next(iter(counts)): bundle}
        else:
            raise ValueError(
                "grow_percent with multiple classes needs a {label: bundle} mapping"
            )
        pieces_x, pieces_y = [train.batch], [labels]
        for label, count in sorted(counts.items()):
            extra = count * amount // 100
            if extra == 0:
                continue
            gen_bundle = bundles[label]
            _require_trained(gen_bundle)
            pieces_x.append(M.generate(gen_bundle, extra, seed + label))
            pieces_y.append(np.full(extra, label, dtype=np.int64))
        return LabeledDataset(np.concatenate(pieces_x), np.concatenate(pieces_y),
                              train.split)

    raise ValueError(f"unknown augmentation mode {mode!r}")


# --- classifier metrics -----------------------------------------------------------


def auc_roc(labels, scores):
    """Area under the ROC curve by trapezoid over tie-grouped thresholds.

    Equals the concordant-pair statistic with ties counted half.
    """
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc_roc: needs both classes")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    boundaries = np.flatnonzero(np.diff(sorted_scores)) + 1
    group_ends = np.append(boundaries, scores.size)
    tp = np.cumsum(sorted_labels)[group_ends - 1]
    fp = group_ends - tp
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    return float(np.trapezoid(tpr, fpr))


def auc_prc(labels, scores):
    """Area under the precision-recall curve by trapezoid over tie-grouped
    thresholds, anchored at (recall 0, precision 1)."""
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise ValueError("auc_prc: needs both classes")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    boundaries = np.flatnonzero(np.diff(sorted_scores)) + 1
    group_ends = np.append(boundaries, scores.size)
    tp = np.cumsum(sorted_labels)[group_ends - 1]
    precision = np.concatenate([[1.0], tp / group_ends])
    recall = np.concatenate([[0.0], tp / n_pos])
    return float(np.trapezoid(precision, recall))


def classify_and_report(train, test, seed, steps=_CLS_STEPS):
    """Train the reference MLP on the train split, score the test split."""
    if train.batch.shape[0] == 0 or test.batch.shape[0] == 0:
        raise ValueError("classify_and_report: empty split")
    if np.unique(test.labels).size < 2:
        raise ValueError("classify_and_report: test split has a single class")

    T.enable_allocator_reuse()
    rng = np.random.default_rng(seed)
    d_in = train.batch.shape[1] * train.batch.shape[2]
    params = L.init_mlp(rng, d_in, hidden=_CLS_HIDDEN, d_out=1)
    tensors = L.trainable(params)
    state = adam_init(tensors)
    y_train = train.labels.astype(np.float32).reshape(-1, 1)
    one = Tensor(np.ones((), dtype=np.float32))

    for _ in range(steps):
        idx = rng.integers(0, train.batch.shape[0], _CLS_BATCH)
        x = Tensor(train.batch[idx])
        y = Tensor(y_train[idx])
        with Tape() as tape:
            probs = T.sigmoid(L.mlp_forward(x, params))
            probs = T.clip(probs, _PROB_EPS, 1.0 - _PROB_EPS)
            loss = -((y * T.log(probs) + (one - y) * T.log(one - probs)).mean())
            grads = tape.backward(loss, params=tensors)
        adam_step(tensors, [grads[p] for p in tensors], state, _CLS_LR)

    scores = T.sigmoid(L.mlp_forward(Tensor(test.batch), params)).numpy().reshape(-1)
    predicted = scores > 0.5
    actual = test.labels.astype(bool)
    tp = int((predicted & actual).sum())
    fp = int((predicted & ~actual).sum())
    fn = int((~predicted & actual).sum())
    return ClassifierMetrics(
        accuracy=float((predicted == actual).mean()),
        recall=tp / (tp + fn) if tp + fn else 0.0,
        precision=tp / (tp + fp) if tp + fp else 0.0,
        auc_roc=auc_roc(actual, scores),
        auc_prc=auc_prc(actual, scores),
    )
