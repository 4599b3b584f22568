"""Frozen-teacher evaluation: feature tables, kNN and linear probes, prototype neighbours."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import config as config_mod
from . import tensor as T
from . import vit
from .checkpoint import Checkpoint, atomic_write, decode_records, encode_records
from .data import ToyImage, corpus_labels, corpus_pixels, stream
from .loss import PrototypeBank, prototype_logits, usage_entropy

_SPLIT = 29


class ProbeError(ValueError):
    pass


@dataclass
class FeatureTable:
    rows: np.ndarray  # (n, width) pre-projector cls features
    labels: np.ndarray
    source: str = ""

    def to_bytes(self) -> bytes:
        meta = json.dumps({"source": self.source})
        return encode_records(meta, [("features", self.rows), ("labels", self.labels.astype(np.float64))])

    @classmethod
    def from_bytes(cls, raw: bytes) -> "FeatureTable":
        meta, sections = decode_records(raw)
        parts = dict(sections)
        return cls(parts["features"], parts["labels"].astype(np.int64), json.loads(meta)["source"])


def extract_features(ck: Checkpoint, corpus: list[ToyImage], batch: int = 256, source: str = "") -> FeatureTable:
    """Teacher cls features for every corpus image, no augmentation, off-tape."""
    cfg = config_mod.loads(ck.config_text)
    enc = cfg.encoder()
    if not corpus:
        raise ProbeError("empty corpus")
    if corpus[0].pixels.shape != (enc.channels, enc.image_side, enc.image_side):
        raise ProbeError(f"corpus images {corpus[0].pixels.shape} do not match encoder side {enc.image_side}")
    params = {k: T.Tensor(v) for k, v in ck.teacher.items()}
    px = corpus_pixels(corpus)
    rows = np.concatenate([vit.encode(params, enc, px[i:i + batch]).data for i in range(0, len(px), batch)])
    return FeatureTable(rows, corpus_labels(corpus), source)


def projected_features(ck: Checkpoint, table: FeatureTable) -> np.ndarray:
    params = {k: T.Tensor(v) for k, v in ck.teacher.items()}
    return vit.project(params, T.Tensor(table.rows)).data


def stratified_split(labels: np.ndarray, seed: int, test_frac: float = 0.2):
    """Per-class shuffled 80/20 split; returns (train_idx, test_idx) sorted."""
    rng = stream(seed, _SPLIT)
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(test_frac * len(idx)))
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))


@dataclass
class ProbeResult:
    accuracy: float
    per_class: dict[int, float]
    split: str
    kind: str
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return json.dumps(d, sort_keys=True)


def _result(pred: np.ndarray, truth: np.ndarray, split: str, kind: str, **extra) -> ProbeResult:
    per = {int(c): float((pred[truth == c] == c).mean()) for c in np.unique(truth)}
    return ProbeResult(float((pred == truth).mean()), per, split, kind, extra)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def knn_predict(train_x, train_y, test_x, k: int) -> np.ndarray:
    """Cosine kNN majority vote; ties go to the smallest class id."""
    sims = _unit(test_x) @ _unit(train_x).T
    nearest = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    n_classes = int(train_y.max()) + 1
    votes = np.zeros((len(test_x), n_classes), dtype=np.int64)
    for j in range(k):
        np.add.at(votes, (np.arange(len(test_x)), train_y[nearest[:, j]]), 1)
    return votes.argmax(axis=1)  # argmax returns the first maximum


def knn_probe(table: FeatureTable, k: int = 5, seed: int = 0, train_is_test: bool = False) -> ProbeResult:
    labels = table.labels
    if train_is_test:
        tr = te = np.arange(len(labels))
        split = "train=test"
    else:
        tr, te = stratified_split(labels, seed)
        split = f"stratified 80/20 seed={seed}"
    if not 1 <= k <= len(tr):
        raise ProbeError(f"k={k} outside [1, {len(tr)}]")
    missing = set(np.unique(labels[te])) - set(np.unique(labels[tr]))
    if missing:
        raise ProbeError(f"classes {sorted(missing)} absent from the train split")
    pred = knn_predict(table.rows[tr], labels[tr], table.rows[te], k)
    return _result(pred, labels[te], split, f"knn k={k}")


def linear_probe(table: FeatureTable, epochs: int = 200, lr: float = 0.1, seed: int = 0) -> ProbeResult:
    """Affine softmax classifier, zero-initialized, full-batch gradient descent on frozen features."""
    labels = table.labels
    tr, te = stratified_split(labels, seed)
    n_classes = int(labels.max()) + 1
    x_tr, y_tr = table.rows[tr], labels[tr]
    mu, sd = x_tr.mean(axis=0), x_tr.std(axis=0) + 1e-8
    xs = T.Tensor((x_tr - mu) / sd)
    w = T.Tensor(np.zeros((x_tr.shape[1], n_classes)), requires_grad=True)
    b = T.Tensor(np.zeros(n_classes), requires_grad=True)
    onehot = np.eye(n_classes)[y_tr]
    final_loss = float("nan")
    for _ in range(epochs):
        w.grad = b.grad = None
        try:
            with T.Tape() as tape:
                probs = T.softmax(T.linear(xs, w, b), 1.0)
                loss = (T.log(probs) * onehot).sum() * (-1.0 / len(y_tr))
        except T.NonFiniteError as exc:
            raise ProbeError(f"linear probe diverged ({exc})") from exc
        final_loss = loss.item()
        if not np.isfinite(final_loss):
            raise ProbeError(f"linear probe diverged (loss {final_loss})")
        tape.backward(loss)
        w.data = w.data - lr * w.grad
        b.data = b.data - lr * b.grad
    logits = ((table.rows[te] - mu) / sd) @ w.data + b.data
    return _result(logits.argmax(axis=1), labels[te], f"stratified 80/20 seed={seed}",
                   "linear", epochs=epochs, lr=lr, final_loss=final_loss)


@dataclass
class PrototypeAssignments:
    nearest: list[int]  # per prototype: index of the max-cosine feature row
    usage: list[int]  # per prototype: how many rows predict it (argmax)
    usage_entropy: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def prototype_nn(bank: PrototypeBank | np.ndarray, features: np.ndarray) -> PrototypeAssignments:
    """Nearest training feature for each prototype and argmax usage over the features."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or len(feats) == 0:
        raise ProbeError("prototype_nn needs a non-empty (n, d) feature matrix")
    if not isinstance(bank, PrototypeBank):
        bank = PrototypeBank(T.Tensor(bank))
    logits = prototype_logits(bank, _unit(feats)).data  # (n, K)
    nearest = logits.argmax(axis=0)
    assign = logits.argmax(axis=1)
    usage = np.bincount(assign, minlength=bank.K)
    return PrototypeAssignments([int(i) for i in nearest], [int(c) for c in usage], usage_entropy(assign, bank.K))


def corpus_usage_entropy(ck: Checkpoint, corpus: list[ToyImage]) -> float:
    table = extract_features(ck, corpus)
    return prototype_nn(ck.prototypes, projected_features(ck, table)).usage_entropy


def write_json(path, text: str) -> None:
    atomic_write(path, (text + "\n").encode("utf-8"))
