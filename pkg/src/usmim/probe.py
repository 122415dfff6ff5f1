"""Frozen-encoder linear probe on the synthetic lesion-presence task."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import ImageRecord, load_corpus, parse_manifest, resize_bilinear
from .encoder import EncoderConfig, Params, encode


class ProbeError(ValueError):
    pass


@dataclass
class ProbeTask:
    records: list[ImageRecord]
    labels: np.ndarray  # 1 = at least one lesion
    train_frac: float = 0.6

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.records) != self.labels.shape[0]:
            raise ProbeError("one label per record")
        if not 0 < self.train_frac < 1:
            raise ProbeError("train_frac must lie in (0, 1)")

    @classmethod
    def from_records(cls, records: Sequence[ImageRecord], train_frac: float = 0.6) -> "ProbeTask":
        labels = [int(len(r.meta.get("bboxes", r.meta.get("lesions", []))) > 0) for r in records]
        return cls(list(records), np.array(labels), train_frac)

    @classmethod
    def from_dir(cls, path, train_frac: float = 0.6) -> "ProbeTask":
        """PGM images plus ``manifest.txt``; the label is whether the manifest lists any lesion."""
        path = Path(path)
        manifest = parse_manifest(path / "manifest.txt")
        records = [r for r in load_corpus(path) if r.id in manifest]
        if not records:
            raise ProbeError(f"no images in {path} match its manifest")
        labels = [int(manifest[r.id]["lesion_count"] > 0) for r in records]
        return cls(records, np.array(labels), train_frac)


@dataclass
class ProbeSettings:
    epochs: int = 50
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 16
    image_size: int = 64
    shuffle_labels: bool = False  # null control: permute labels before splitting


@dataclass
class ProbeReport:
    accuracy_mean: float
    accuracy_std: float
    f1_mean: float
    f1_std: float
    per_seed: list[dict] = field(default_factory=list)

    def text(self) -> str:
        lines = [f"seed {r['seed']}: acc={r['accuracy']:.4f} f1={r['f1']:.4f} (train {r['n_train']}, test {r['n_test']})"
                 for r in self.per_seed]
        lines.append(f"accuracy {self.accuracy_mean:.4f} +/- {self.accuracy_std:.4f}")
        lines.append(f"macro-F1 {self.f1_mean:.4f} +/- {self.f1_std:.4f}")
        return "\n".join(lines) + "\n"

    def csv(self) -> str:
        rows = ["seed,accuracy,f1,n_train,n_test"]
        rows += [f"{r['seed']},{r['accuracy']!r},{r['f1']!r},{r['n_train']},{r['n_test']}" for r in self.per_seed]
        rows.append(f"mean,{self.accuracy_mean!r},{self.f1_mean!r},,")
        rows.append(f"std,{self.accuracy_std!r},{self.f1_std!r},,")
        return "\n".join(rows) + "\n"


def params_digest(params: Params) -> str:
    h = hashlib.blake2b(digest_size=16)
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k].data).tobytes())
    return h.hexdigest()


def extract_features(records: Sequence[ImageRecord], config: EncoderConfig, params: Params, image_size: int = 64,
                     batch: int = 32) -> np.ndarray:
    """Frozen class-token features ``[n, D]`` of each full image resized to ``image_size``."""
    dtype = params["stem.w"].dtype
    out = []
    with T.no_grad():
        for i in range(0, len(records), batch):
            imgs = np.stack([resize_bilinear(r.pixels, image_size, image_size) for r in records[i:i + batch]])
            out.append(encode(imgs.astype(dtype), config, params).cls_token.data.astype(np.float64))
    return np.concatenate(out)


def stratified_split(labels: np.ndarray, train_frac: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    tr, te = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = int(round(train_frac * idx.size))
        tr.append(idx[:k])
        te.append(idx[k:])
    tr, te = np.sort(np.concatenate(tr)), np.sort(np.concatenate(te))
    for name, part in (("train", tr), ("test", te)):
        if np.unique(labels[part]).size < 2:
            raise ProbeError(f"{name} split holds a single class")
    return tr, te


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def train_linear(x: np.ndarray, y: np.ndarray, n_classes: int, settings: ProbeSettings,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Softmax regression by mini-batch SGD with heavy-ball momentum."""
    d = x.shape[1]
    w = rng.normal(0.0, 0.01, size=(d, n_classes))
    b = np.zeros(n_classes)
    vw, vb = np.zeros_like(w), np.zeros_like(b)
    onehot = np.eye(n_classes)[y]
    for _ in range(settings.epochs):
        order = rng.permutation(x.shape[0])
        for i in range(0, order.size, settings.batch_size):
            j = order[i:i + settings.batch_size]
            err = (_softmax(x[j] @ w + b) - onehot[j]) / j.size
            vw = settings.momentum * vw + x[j].T @ err
            vb = settings.momentum * vb + err.sum(axis=0)
            w -= settings.lr * vw
            b -= settings.lr * vb
    return w, b


def accuracy(y: np.ndarray, pred: np.ndarray) -> float:
    return float(np.mean(np.asarray(y) == np.asarray(pred)))


def macro_f1(y: np.ndarray, pred: np.ndarray, classes: Sequence[int] = (0, 1)) -> float:
    """Unweighted mean of per-class F1; a class never predicted nor present scores 0."""
    y, pred = np.asarray(y), np.asarray(pred)
    scores = []
    for c in classes:
        tp = np.sum((pred == c) & (y == c))
        fp = np.sum((pred == c) & (y != c))
        fn = np.sum((pred != c) & (y == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def probe_features(features: np.ndarray, labels: np.ndarray, seeds: Sequence[int], train_frac: float = 0.6,
                   settings: ProbeSettings | None = None) -> ProbeReport:
    """Split, standardise on the training part, fit, and score on the held-out part, once per seed."""
    settings = settings or ProbeSettings()
    labels = np.asarray(labels, dtype=np.int64)
    if np.unique(labels).size < 2:
        raise ProbeError("probe task needs both classes")
    runs = []
    for seed in seeds:
        rng = np.random.default_rng([int(seed), 31])
        y = rng.permutation(labels) if settings.shuffle_labels else labels
        tr, te = stratified_split(y, train_frac, rng)
        mu = features[tr].mean(axis=0)
        sd = features[tr].std(axis=0)
        sd = np.where(sd > 1e-12, sd, 1.0)
        xtr, xte = (features[tr] - mu) / sd, (features[te] - mu) / sd
        w, b = train_linear(xtr, y[tr], 2, settings, rng)
        pred = np.argmax(xte @ w + b, axis=1)
        runs.append({"seed": int(seed), "accuracy": accuracy(y[te], pred), "f1": macro_f1(y[te], pred),
                     "n_train": int(tr.size), "n_test": int(te.size)})
    acc = np.array([r["accuracy"] for r in runs])
    f1 = np.array([r["f1"] for r in runs])
    return ProbeReport(float(acc.mean()), float(acc.std()), float(f1.mean()), float(f1.std()), runs)


def linear_probe(config: EncoderConfig, params: Params, task: ProbeTask, seeds: Sequence[int],
                 settings: ProbeSettings | None = None) -> ProbeReport:
    """Linear probe on frozen features; the encoder parameters are verified unchanged afterwards."""
    settings = settings or ProbeSettings()
    if not seeds:
        raise ProbeError("at least one seed")
    before = params_digest(params)
    feats = extract_features(task.records, config, params, settings.image_size)
    report = probe_features(feats, task.labels, seeds, task.train_frac, settings)
    if params_digest(params) != before:
        raise RuntimeError("probe modified the encoder parameters")
    return report

