"""Linear probing, k-fold ensembles, supervised baseline, classification metrics.

Metrics are computed in exact rational arithmetic and rounded once, so any
correct reimplementation yields the identical float.
"""

from __future__ import annotations

import copy
import io
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from . import autodiff as ad
from .model import EncoderConfig, EncoderModel, backbone_features, build_encoder, encode, tiny_config
from .trainer import LrSchedule, OptimizerState, cosine_lr_at, scaled_lr, sgd_step

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------- metrics

@dataclass(eq=False)
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, cols = predicted class

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion matrix entries must be non-negative")

    @classmethod
    def from_predictions(cls, y_true, y_pred, num_classes):
        cm = np.zeros((num_classes, num_classes), np.int64)
        np.add.at(cm, (np.asarray(y_true, np.int64), np.asarray(y_pred, np.int64)), 1)
        return cls(cm)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())


def _as_counts(cm):
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm, np.int64)
    if counts.sum(axis=1).max(initial=0) == 0:
        raise EvaluationError("confusion matrix has no samples")
    return counts


def per_class_stats(cm):
    """(precision, recall, f1, support) per class as Fractions; precision/recall 0 when undefined."""
    counts = _as_counts(cm)
    rows = []
    for k in range(counts.shape[0]):
        tp = int(counts[k, k])
        support = int(counts[k].sum())
        predicted = int(counts[:, k].sum())
        p = Fraction(tp, predicted) if predicted else Fraction(0)
        r = Fraction(tp, support) if support else Fraction(0)
        f1 = 2 * p * r / (p + r) if p + r else Fraction(0)
        rows.append((p, r, f1, support))
    return rows


def balanced_accuracy(cm) -> float:
    """Mean recall over classes with nonzero support."""
    rows = [r for r in per_class_stats(cm) if r[3] > 0]
    return float(sum(r[1] for r in rows) / len(rows))


def macro_f1(cm) -> float:
    """Unweighted mean F1 over classes with nonzero support (F1 = 0 when P + R = 0)."""
    rows = [r for r in per_class_stats(cm) if r[3] > 0]
    return float(sum(r[2] for r in rows) / len(rows))


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    macro_f1: float
    balanced_acc: float
    per_class: list

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix):
        rows = [(float(p), float(r), float(f), s) for p, r, f, s in per_class_stats(cm)]
        return cls(cm, macro_f1(cm), balanced_accuracy(cm), rows)

    @classmethod
    def from_predictions(cls, y_true, y_pred, num_classes):
        return cls.from_confusion(ConfusionMatrix.from_predictions(y_true, y_pred, num_classes))

    def to_csv(self):
        """Three CSV blocks separated by blank lines: confusion, per-class, aggregate."""
        buf = io.StringIO()
        k = self.confusion.num_classes
        buf.write("true\\pred," + ",".join(str(j) for j in range(k)) + "\n")
        for i in range(k):
            buf.write(f"{i}," + ",".join(str(int(v)) for v in self.confusion.counts[i]) + "\n")
        buf.write("\nclass,precision,recall,f1,support\n")
        for i, (p, r, f, s) in enumerate(self.per_class):
            buf.write(f"{i},{p!r},{r!r},{f!r},{s}\n")
        buf.write("\nmacro_f1,balanced_acc\n")
        buf.write(f"{self.macro_f1!r},{self.balanced_acc!r}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        blocks = [b for b in text.strip().split("\n\n")]
        if len(blocks) != 3:
            raise ValueError("EvalReport CSV needs 3 blocks")
        rows = [line.split(",") for line in blocks[0].splitlines()[1:]]
        cm = ConfusionMatrix(np.array([[int(v) for v in r[1:]] for r in rows]))
        per = []
        for line in blocks[1].splitlines()[1:]:
            _, p, r, f, s = line.split(",")
            per.append((float(p), float(r), float(f), int(s)))
        mf, ba = (float(v) for v in blocks[2].splitlines()[1].split(","))
        return cls(cm, mf, ba, per)


# ---------------------------------------------------------------- splits

def kfold_split(labels, k=5, seed=0, groups=None):
    """Stratified disjoint folds covering every index.

    With ``groups`` (e.g. source mosaic ids), each fold is exactly one group,
    which keeps spatial neighbours out of the validation split.
    """
    labels = np.asarray(labels)
    n = labels.size
    if groups is not None:
        groups = np.asarray(groups)
        uniq = sorted(set(groups.tolist()))
        if len(uniq) != k:
            raise EvaluationError(f"grouped k-fold needs exactly {k} groups, got {len(uniq)}")
        return [np.flatnonzero(groups == g) for g in uniq]
    classes, counts = np.unique(labels, return_counts=True)
    if counts.min(initial=n) < k:
        raise EvaluationError(
            f"cannot stratify {k} folds: class {classes[counts.argmin()]} has only {counts.min()} samples"
        )
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    offset = 0
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        for j, i in enumerate(idx):
            folds[(j + offset) % k].append(int(i))
        offset += len(idx)
    return [np.sort(np.array(f, dtype=np.int64)) for f in folds]


def subset_fraction(labels, fraction, seed=0):
    """Class-balanced subsample of ``fraction`` of the set; 1.0 returns every index."""
    labels = np.asarray(labels)
    if not 0 < fraction <= 1:
        raise EvaluationError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return np.arange(labels.size)
    classes, counts = np.unique(labels, return_counts=True)
    per_class = min(int(round(fraction * labels.size / len(classes))), int(counts.min()))
    if per_class < 1:
        raise EvaluationError(
            f"fraction {fraction} of {labels.size} samples leaves no sample for some of {len(classes)} classes"
        )
    rng = np.random.default_rng(seed)
    picked = [rng.choice(np.flatnonzero(labels == c), per_class, replace=False) for c in classes]
    return np.sort(np.concatenate(picked))


# ---------------------------------------------------------------- labeled data

@dataclass
class LabeledSet:
    images: np.ndarray  # (N, 3, S, S) normalized views
    labels: np.ndarray
    groups: Optional[np.ndarray] = None
    num_classes: Optional[int] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, np.int64)
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if self.labels.size else 0

    def __len__(self):
        return int(self.labels.size)

    def take(self, idx):
        idx = np.asarray(idx, np.int64)
        return LabeledSet(
            self.images[idx], self.labels[idx], None if self.groups is None else self.groups[idx], self.num_classes
        )


def extract_features(encoder: EncoderModel, images, batch_size=256, projected=False):
    """Frozen pooled backbone features (eval mode, no tape)."""
    out = []
    for i in range(0, len(images), batch_size):
        x = images[i:i + batch_size]
        f = encode(encoder, x, "eval") if projected else backbone_features(encoder, x, "eval")
        out.append(f.data)
    if not out:
        return np.zeros((0, encoder.config.feature_dim if not projected else encoder.config.out_dim), np.float32)
    return np.concatenate(out)


def embedding_std(encoder: EncoderModel, batch) -> float:
    """Mean per-dimension std of l2-normalized encoder outputs (collapse diagnostic)."""
    y = extract_features(encoder, batch, projected=True).astype(np.float64)
    return embedding_std_of(y)


def embedding_std_of(y) -> float:
    y = np.asarray(y, np.float64)
    if y.shape[0] < 2:
        raise ValueError("embedding_std needs at least 2 samples")
    norm = np.sqrt((y * y).sum(1, keepdims=True))
    z = y / np.where(norm > 0, norm, 1.0)
    return float(z.std(axis=0).mean())


# ---------------------------------------------------------------- linear heads

@dataclass
class LinearHead:
    weight: np.ndarray  # (D, K)
    bias: np.ndarray  # (K,)

    @property
    def num_classes(self):
        return self.bias.shape[0]

    def logits(self, feats):
        return feats @ self.weight + self.bias

    def probabilities(self, feats):
        return ad.softmax(self.logits(np.asarray(feats, self.weight.dtype)))


@dataclass
class ProbeConfig:
    lr: float = 30.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64
    epochs: int = 30
    # per-feature standardization with training-split statistics, folded into the head
    standardize: bool = True


def _cosine(lr0, t, total):
    return 0.5 * lr0 * (1 + math.cos(math.pi * t / total))


def train_linear_head(train_x, train_y, val_x, val_y, num_classes, config: ProbeConfig, seed=0):
    """SGD on a single linear layer; returns the head from the best-validation epoch and its score."""
    rng = np.random.default_rng(seed)
    d = train_x.shape[1]
    mu = np.zeros(d, np.float32)
    sd = np.ones(d, np.float32)
    if config.standardize:
        mu = train_x.mean(axis=0).astype(np.float32)
        sd = (train_x.std(axis=0) + 1e-6).astype(np.float32)
    train_x = (train_x - mu) / sd
    w = ad.parameter(np.zeros((d, num_classes), np.float32), "weight")
    b = ad.parameter(np.zeros(num_classes, np.float32), "bias")
    state = OptimizerState(config.momentum, config.weight_decay)
    steps_per_epoch = max(1, math.ceil(len(train_y) / config.batch_size))
    total = steps_per_epoch * config.epochs
    best = (-1.0, None)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_y))
        for s in range(steps_per_epoch):
            idx = order[s * config.batch_size:(s + 1) * config.batch_size]
            with ad.Tape() as tape:
                loss = ad.softmax_cross_entropy(ad.affine(train_x[idx], w, b), train_y[idx])
                grads = tape.backward(loss)
            sgd_step({"weight": w, "bias": b}, {"weight": grads[w], "bias": grads[b]}, state,
                     _cosine(config.lr, step, total))
            step += 1
        # fold the standardization in so the head applies to raw features
        wr = w.data / sd[:, None]
        head = LinearHead(wr, b.data - mu @ wr)
        score = _score(head, val_x, val_y, num_classes)
        if score > best[0]:
            best = (score, head)
    return best[1], best[0]


def _score(head, x, y, num_classes):
    if len(y) == 0:
        return 0.0
    pred = head.probabilities(x).argmax(1)
    return balanced_accuracy(ConfusionMatrix.from_predictions(y, pred, num_classes))


def _check_folds(data: LabeledSet, folds, k, seed):
    """Validate class coverage of each training split; retry stratified folds once."""
    def missing(fs):
        for i, val in enumerate(fs):
            train = np.setdiff1d(np.arange(len(data)), val)
            have = set(np.unique(data.labels[train]).tolist())
            gone = set(np.unique(data.labels).tolist()) - have
            if gone:
                return i, gone
        return None

    bad = missing(folds)
    if bad is None:
        return folds
    log.warning("fold %d training split lacks classes %s; retrying with stratified folds", *bad)
    folds = kfold_split(data.labels, k, seed + 1)
    bad = missing(folds)
    if bad is not None:
        raise EvaluationError(f"fold {bad[0]} training split lacks classes {sorted(bad[1])}")
    return folds


@dataclass
class ProbeResult:
    heads: list
    val_scores: list
    folds: list = field(default_factory=list)


def linear_probe_train(encoder: EncoderModel, data: LabeledSet, config: Optional[ProbeConfig] = None,
                       folds=5, seed=0, features=None) -> ProbeResult:
    """Train one linear head per fold on frozen pooled backbone features."""
    config = config or ProbeConfig()
    feats = extract_features(encoder, data.images) if features is None else features
    fold_idx = folds if isinstance(folds, list) else kfold_split(data.labels, folds, seed, data.groups)
    fold_idx = _check_folds(data, fold_idx, len(fold_idx), seed)
    heads, scores = [], []
    for i, val in enumerate(fold_idx):
        train = np.setdiff1d(np.arange(len(data)), val)
        head, score = train_linear_head(
            feats[train], data.labels[train], feats[val], data.labels[val], data.num_classes, config, seed + i
        )
        heads.append(head)
        scores.append(score)
    return ProbeResult(heads, scores, fold_idx)


def ensemble_predict(heads, feats):
    """Average per-head softmax probabilities; argmax with lowest-index tie-break."""
    if not heads:
        raise EvaluationError("no heads to ensemble")
    k = heads[0].num_classes
    if any(h.num_classes != k for h in heads):
        raise EvaluationError("heads disagree on the class set")
    probs = np.mean([h.probabilities(feats) for h in heads], axis=0)
    return probs, probs.argmax(axis=1)


# ---------------------------------------------------------------- supervised baseline

@dataclass
class SupervisedConfig:
    base_lr: float = 0.05
    batch_size: int = 64
    epochs: int = 100
    momentum: float = 0.9
    weight_decay: float = 1e-4
    encoder: EncoderConfig = field(default_factory=tiny_config)


@dataclass
class SupervisedModel:
    encoder: EncoderModel
    head: LinearHead

    def probabilities(self, images):
        return self.head.probabilities(extract_features(self.encoder, images))


def _supervised_step(encoder, w, b, x, y, state, lr):
    named = {f"encoder/{k}": v for k, v in encoder.params.items()}
    named["head.weight"] = w
    named["head.bias"] = b
    with ad.Tape() as tape:
        loss = ad.softmax_cross_entropy(ad.affine(backbone_features(encoder, x, "train"), w, b), y)
        grads = tape.backward(loss)
    sgd_step(named, {k: grads.get(t) for k, t in named.items()}, state, lr)
    return float(loss.data), grads


def train_supervised_fold(train: LabeledSet, val: LabeledSet, config: SupervisedConfig, seed=0):
    enc = build_encoder(config.encoder, seed=seed)
    rng = np.random.default_rng(seed)
    d = config.encoder.feature_dim
    bound = math.sqrt(6.0 / d)
    w = ad.parameter(rng.uniform(-bound, bound, (d, train.num_classes)).astype(np.float32), "head.weight")
    b = ad.parameter(np.zeros(train.num_classes, np.float32), "head.bias")
    state = OptimizerState(config.momentum, config.weight_decay)
    bs = min(config.batch_size, len(train))
    steps_per_epoch = max(1, len(train) // bs)
    sched = LrSchedule(config.base_lr, config.batch_size, steps_per_epoch * config.epochs)
    best = (-1.0, None)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        for s in range(steps_per_epoch):
            idx = order[s * bs:(s + 1) * bs]
            if len(idx) < 2:
                continue
            _supervised_step(enc, w, b, train.images[idx], train.labels[idx], state, cosine_lr_at(sched, step))
            step += 1
        model = SupervisedModel(enc, LinearHead(w.data, b.data))
        pred = model.probabilities(val.images).argmax(1) if len(val) else np.zeros(0, np.int64)
        score = balanced_accuracy(ConfusionMatrix.from_predictions(val.labels, pred, train.num_classes)) if len(val) else 0.0
        if score > best[0]:
            best = (score, SupervisedModel(copy.deepcopy(enc), LinearHead(w.data.copy(), b.data.copy())))
    return best[1], best[0]


def supervised_baseline_train(data: LabeledSet, config: Optional[SupervisedConfig] = None, folds=5, seed=0):
    """End-to-end training from scratch, one model per fold, best epoch by validation balanced accuracy."""
    config = config or SupervisedConfig()
    fold_idx = folds if isinstance(folds, list) else kfold_split(data.labels, folds, seed, data.groups)
    fold_idx = _check_folds(data, fold_idx, len(fold_idx), seed)
    models, scores = [], []
    for i, val in enumerate(fold_idx):
        train = np.setdiff1d(np.arange(len(data)), val)
        m, s = train_supervised_fold(data.take(train), data.take(val), config, seed=seed * 100 + i)
        models.append(m)
        scores.append(s)
    return models, scores


def ensemble_predict_models(models, images):
    probs = np.mean([m.probabilities(images) for m in models], axis=0)
    return probs, probs.argmax(axis=1)
