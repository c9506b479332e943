"""Training loops for the autoencoder and classifier heads, splits and evaluation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tn
from .dsp import Window
from .errors import (
    ClassTooSmall,
    EmptyDataset,
    InvalidConfig,
    NonFiniteLoss,
    NonFiniteValue,
    SingleClassDataset,
)
from .model import AutoencoderModel, ClassifierModel

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 50
    epochs: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    shuffle: bool = True
    freeze_policy: str = "except-last-lstm"

    @classmethod
    def for_head(cls, **kw):
        kw.setdefault("batch_size", 10)
        kw.setdefault("epochs", 25)
        return cls(**kw)

    def validate(self):
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if self.epochs < 1:
            raise InvalidConfig("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidConfig("learning rate must be positive")


def _stack(windows) -> np.ndarray:
    if isinstance(windows, np.ndarray):
        return windows if windows.ndim == 3 else windows[None]
    return np.stack([w.values if isinstance(w, Window) else np.asarray(w) for w in windows])


def batches(n: int, cfg: TrainConfig, epoch: int, min_last: int = 1):
    """Index batches for one epoch; order is a pure function of (seed, epoch).

    A trailing batch smaller than ``min_last`` is folded into the one before it.
    """
    order = np.random.default_rng([cfg.seed, epoch]).permutation(n) if cfg.shuffle else np.arange(n)
    cuts = list(range(0, n, cfg.batch_size))
    out = [order[s:s + cfg.batch_size] for s in cuts]
    if len(out) > 1 and len(out[-1]) < min_last:
        tail = out.pop()
        out[-1] = np.concatenate([out[-1], tail])
    return out


def _step(opt: tn.Adam, compute_loss):
    opt.zero_grad()
    try:
        L = compute_loss()
        if not np.isfinite(L.data):
            raise NonFiniteLoss("loss is not finite")
        L.backward()
    except NonFiniteValue as exc:
        raise NonFiniteLoss(f"training aborted: {exc}") from exc
    opt.step()
    return float(L.data)


def train_autoencoder(windows, model: AutoencoderModel, cfg: TrainConfig = None, on_epoch=None):
    """Fit encoder and decoder by ADAM on reconstruction MSE.

    Returns the (mutated) model and the per-epoch mean loss history.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    if windows is None or len(windows) == 0:
        raise EmptyDataset("no training windows")
    X = _stack(windows).astype(model.dtype, copy=False)
    opt = tn.Adam(model.parameters(), lr=cfg.learning_rate)
    history = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in batches(len(X), cfg, epoch):
            xb = X[idx]
            total += _step(opt, lambda: tn.mse(model(tn.Tensor(xb)), xb)) * len(idx)
        history.append(total / len(X))
        log.debug("autoencoder epoch %d mse %.6f", epoch + 1, history[-1])
        if on_epoch:
            on_epoch(epoch, history[-1])
    return model, history


def _targets(labels, clf: ClassifierModel):
    classes = list(clf.head.classes)
    try:
        idx = np.array([classes.index(l) for l in labels])
    except ValueError as exc:
        raise InvalidConfig(f"label not among head classes {classes}: {exc}") from exc
    if clf.head.task == "detect":
        return idx, idx.astype(clf.dtype)[:, None]
    return idx, np.eye(len(classes), dtype=clf.dtype)[idx]


def encoder_features(clf: ClassifierModel, X, batch_size=32):
    """Outputs of the frozen layers below the last LSTM."""
    out = []
    with tn.no_grad():
        for s in range(0, len(X), batch_size):
            out.append(clf.encoder.features(X[s:s + batch_size]).data)
    return np.concatenate(out, axis=0)


def train_head(labeled: Sequence, clf: ClassifierModel, cfg: TrainConfig = None, on_epoch=None):
    """Fit a classifier head on (window, label) pairs.

    Frozen parameters never reach the optimizer.  Under the except-last-lstm
    policy the frozen layers' outputs are computed once up front.
    """
    cfg = cfg or TrainConfig.for_head()
    cfg.validate()
    if not labeled:
        raise EmptyDataset("no labeled windows")
    clf.head.freeze_policy = cfg.freeze_policy
    clf.head.validate()
    X = _stack([w for w, _ in labeled]).astype(clf.dtype, copy=False)
    labels = [l for _, l in labeled]
    if len(set(labels)) < 2:
        raise SingleClassDataset(f"only one class present: {labels[0]!r}")
    _, Y = _targets(labels, clf)
    kind = "binary-cross-entropy" if clf.head.task == "detect" else "categorical-cross-entropy"

    cached = cfg.freeze_policy == "except-last-lstm"
    feats = encoder_features(clf, X) if cached else None
    opt = tn.Adam(clf.trainable_parameters(), lr=cfg.learning_rate)
    history = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch, 1])
        total = 0.0
        for idx in batches(len(X), cfg, epoch, min_last=2):
            yb = Y[idx]
            if cached:
                def fwd(idx=idx):
                    return clf.forward_features(tn.Tensor(feats[idx]), training=True, rng=rng)
            else:
                def fwd(idx=idx):
                    return clf(tn.Tensor(X[idx]), training=True, rng=rng)
            total += _step(opt, lambda: tn.loss(fwd(), yb, kind)) * len(idx)
        history.append(total / len(X))
        log.debug("head epoch %d loss %.6f", epoch + 1, history[-1])
        if on_epoch:
            on_epoch(epoch, history[-1])
    recalibrate_batchnorm(clf, feats if cached else X, from_features=cached)
    return clf, history


def recalibrate_batchnorm(clf: ClassifierModel, X, from_features=False, batch_size=64):
    """Set the head's running moments to the population statistics of the
    final embeddings of the training set.

    The momentum average lags the embedding LSTM while it trains and still
    carries its initial unit variance after a few hundred steps.
    """
    out = []
    with tn.no_grad():
        for s in range(0, len(X), batch_size):
            xb = tn.Tensor(X[s:s + batch_size])
            e = clf.encoder.embed_features(xb) if from_features else clf.encoder(xb)
            out.append(e.data)
    E = np.concatenate(out, axis=0)
    clf.bn["mean"].data = E.mean(axis=0).astype(clf.dtype)
    clf.bn["var"].data = E.var(axis=0).astype(clf.dtype)


def split_dataset(labeled: Sequence, train_fraction=0.6, seed=0, stratified=True):
    """Deterministic per-class proportional split into (train, test)."""
    if not 0 < train_fraction < 1:
        raise InvalidConfig("train_fraction must lie in (0, 1)")
    labels = [item[1] for item in labeled]
    rng = np.random.default_rng(seed)
    train_idx = []
    groups = {}
    for i, l in enumerate(labels):
        groups.setdefault(l, []).append(i)
    if stratified:
        for label in sorted(groups, key=str):
            members = groups[label]
            if len(members) < 2:
                raise ClassTooSmall(f"class {label!r} has {len(members)} item(s); need >= 2")
            k = int(np.floor(train_fraction * len(members) + 0.5))
            k = min(max(k, 1), len(members) - 1)
            train_idx += list(rng.permutation(members)[:k])
    else:
        k = int(np.floor(train_fraction * len(labels) + 0.5))
        train_idx = list(rng.permutation(len(labels))[:k])
    chosen = set(int(i) for i in train_idx)
    train = [labeled[i] for i in range(len(labeled)) if i in chosen]
    test = [labeled[i] for i in range(len(labeled)) if i not in chosen]
    return train, test


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows truth, columns prediction
    classes: tuple

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.classes)
        if self.counts.shape != (k, k):
            raise InvalidConfig(f"confusion counts {self.counts.shape} for {k} classes")
        if np.any(self.counts < 0):
            raise InvalidConfig("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total

    @classmethod
    def from_predictions(cls, truth, pred, classes):
        k = len(classes)
        counts = np.zeros((k, k), dtype=np.int64)
        np.add.at(counts, (np.asarray(truth), np.asarray(pred)), 1)
        return cls(counts, tuple(classes))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["truth/prediction", *self.classes])
            for name, row in zip(self.classes, self.counts):
                w.writerow([name, *row.tolist()])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        classes = tuple(rows[0][1:])
        return cls([[int(v) for v in r[1:]] for r in rows[1:]], classes)


def predict(clf, windows, threshold=0.5) -> np.ndarray:
    """Class indices: threshold on the sigmoid output, argmax on softmax."""
    proba = clf.predict_proba(_stack(windows))
    if clf.head.task == "detect":
        return (proba[:, 0] >= threshold).astype(np.int64)
    return np.argmax(proba, axis=1)


def evaluate(clf, test: Sequence, threshold=0.5) -> ConfusionMatrix:
    if not test:
        raise EmptyDataset("empty test set")
    classes = tuple(clf.head.classes)
    truth = [classes.index(l) for _, l in test]
    pred = predict(clf, [w for w, _ in test], threshold)
    return ConfusionMatrix.from_predictions(truth, pred, classes)


def write_loss_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(history, start=1):
            w.writerow([i, repr(float(v))])
