"""Singer identification from vocal spectrograms.

Frames are described by 13 MFCCs plus deltas and accelerations (39 dims).
A three-layer bidirectional LSTM reads a snippet's frames, its outputs are
averaged over time and a dense softmax layer scores the singers.  Training
uses 20-frame chunks (truncated backpropagation, state reset per chunk).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from . import signal as sg
from .nn import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassifierConfig:
    num_singers: int = 2
    feature_dims: int = 39
    layers: int = 3
    hidden: int = 25
    tbptt_len: int = 20
    batch: int = 64
    learning_rate: float = 0.001

    def __post_init__(self):
        if self.num_singers < 2:
            raise ValueError(f"a classifier needs at least two singers, got {self.num_singers}")

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


@dataclass(frozen=True)
class LabelMap:
    names: tuple

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("label names must be unique")

    @classmethod
    def from_labels(cls, labels):
        return cls(tuple(sorted(set(labels))))

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown singer {name!r}") from None

    def __len__(self):
        return len(self.names)


@dataclass
class Prediction:
    singer: int
    distribution: np.ndarray
    snippets: list = field(default_factory=list)

    def to_json(self, labels: LabelMap):
        return {
            "singer": labels.names[self.singer],
            "prob": float(self.distribution[self.singer]),
            "distribution": {n: float(p) for n, p in zip(labels.names, self.distribution)},
            "snippets": [{n: float(p) for n, p in zip(labels.names, d)} for d in self.snippets],
        }


def features_from_spectrogram(vocal_mag, cfg: sg.StftConfig = sg.StftConfig()) -> sg.FeatureMatrix:
    """39-dim frame features (MFCC, delta, acceleration) of a magnitude matrix [bins x T]."""
    mag = np.asarray(vocal_mag, dtype=np.float64)
    if mag.ndim != 2 or mag.shape[0] != cfg.bins:
        raise ValueError(f"expected a magnitude matrix with {cfg.bins} bins, got shape {mag.shape}")
    if np.any(mag < 0):
        raise ValueError("magnitudes must be nonnegative")
    return sg.add_deltas(sg.mfcc(mag, cfg=cfg))


# ---------------------------------------------------------------------------
# network

def init_classnet(cfg: ClassifierConfig, seed=0):
    rng = nn.make_rng(seed)
    ps = nn.ParameterSet()
    ps.add("norm.mean", np.zeros(cfg.feature_dims), trainable=False)
    ps.add("norm.std", np.ones(cfg.feature_dims), trainable=False)
    H = cfg.hidden
    n_in = cfg.feature_dims
    for layer in range(cfg.layers):
        for d in ("fwd", "bwd"):
            name = f"lstm{layer + 1}.{d}"
            ps.add(f"{name}.Wx", nn.glorot(rng, (n_in, 4 * H), n_in, H))
            ps.add(f"{name}.Wh", nn.glorot(rng, (H, 4 * H), H, H))
            b = np.zeros(4 * H)
            b[H:2 * H] = 1.0
            ps.add(f"{name}.b", b)
        n_in = 2 * H
    ps.add("out.W", nn.glorot(rng, (2 * H, cfg.num_singers), 2 * H, cfg.num_singers))
    ps.add("out.b", np.zeros(cfg.num_singers))
    return ps


def _stack(params, cfg):
    return [tuple(tuple(params[f"lstm{i + 1}.{d}.{w}"] for w in ("Wx", "Wh", "b")) for d in ("fwd", "bwd"))
            for i in range(cfg.layers)]


def classnet_logits(x, params, cfg: ClassifierConfig):
    """Logits [batch, num_singers] for raw features [batch, T, 39]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != cfg.feature_dims:
        raise ValueError(f"classnet expects features of dimension {cfg.feature_dims}, got shape {x.shape}")
    if x.shape[1] < 1:
        raise ValueError("classnet needs at least one frame")
    z = (x - params["norm.mean"].data) / params["norm.std"].data
    seq = Tensor(np.ascontiguousarray(z.transpose(1, 0, 2)))
    h = nn.bilstm_seq(seq, _stack(params, cfg))
    return nn.dense(nn.mean(h, axis=0), params["out.W"], params["out.b"])


def classnet_forward(f, params, cfg: ClassifierConfig):
    """Distribution over singers for one feature matrix (T x 39)."""
    data = f.data if isinstance(f, sg.FeatureMatrix) else np.asarray(f, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError(f"classnet_forward expects a T x {cfg.feature_dims} matrix, got shape {data.shape}")
    return nn.softmax(classnet_logits(data[None], params, cfg).data)[0]


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    params: nn.ParameterSet
    losses: list


def _chunks(data, length):
    """Non-overlapping ``length``-frame chunks; sequences shorter than one chunk are skipped."""
    xs, ys = [], []
    for f, label in data:
        m = f.data if isinstance(f, sg.FeatureMatrix) else np.asarray(f)
        if len(m) < length:
            continue
        n = len(m) // length
        xs.append(m[:n * length].reshape(n, length, m.shape[1]))
        ys.append(np.full(n, label))
    if not xs:
        raise ValueError(f"no feature sequence has {length} frames")
    return np.concatenate(xs), np.concatenate(ys)


def train_classifier(data, cfg: ClassifierConfig, epochs=30, seed=0):
    """Train on (FeatureMatrix, class index) pairs.

    Every epoch draws as many class-stratified batches as the chunk pool
    holds full batches; batch positions cycle through the classes.
    """
    labels = [int(y) for _, y in data]
    present = sorted(set(labels))
    if len(present) < 2:
        raise ValueError("classifier training data must contain at least two singers")
    if max(present) >= cfg.num_singers or min(present) < 0:
        raise ValueError(f"labels must lie in [0, {cfg.num_singers})")
    X, Y = _chunks(data, cfg.tbptt_len)
    frames = np.concatenate([(f.data if isinstance(f, sg.FeatureMatrix) else np.asarray(f)) for f, _ in data])
    params = init_classnet(cfg, seed)
    params["norm.mean"].data = frames.mean(axis=0)
    params["norm.std"].data = frames.std(axis=0) + 1e-8
    by_class = [np.flatnonzero(Y == c) for c in present]
    for c, ix in zip(present, by_class):
        if len(ix) == 0:
            raise ValueError(f"class {c} has no feature sequence of at least {cfg.tbptt_len} frames")
    rng = nn.make_rng(seed + 1)
    adam = nn.AdamConfig(learning_rate=cfg.learning_rate)
    steps = max(1, len(X) // cfg.batch)
    slots = np.arange(cfg.batch) % len(present)
    losses = []
    for epoch in range(epochs):
        total = 0.0
        for _ in range(steps):
            pick = np.array([rng.choice(by_class[s]) for s in rng.permutation(slots)])
            loss, _ = nn.softmax_xent(classnet_logits(X[pick], params, cfg), Y[pick])
            loss.backward()
            nn.adam_step(params, adam)
            total += float(loss.data)
        losses.append(total / steps)
        log.info("classifier epoch %d loss %.4f", epoch + 1, losses[-1])
    return TrainResult(params, losses)


# ---------------------------------------------------------------------------
# evaluation helpers

def stratified_kfold(labels, k=5, seed=0):
    """k (train, test) index splits; each class is shuffled then dealt round-robin to the folds.

    The dealing position carries over from one class to the next so fold
    sizes stay within one of each other overall as well as per class.
    """
    labels = list(labels)
    if k < 2:
        raise ValueError("k must be at least 2")
    rng = nn.make_rng(seed)
    folds = [[] for _ in range(k)]
    pos = 0
    for name in sorted(set(labels), key=str):
        members = [i for i, y in enumerate(labels) if y == name]
        if len(members) < k:
            raise ValueError(f"class {name!r} has {len(members)} songs, fewer than k = {k}")
        for i in rng.permutation(members):
            folds[pos % k].append(int(i))
            pos += 1
    everything = set(range(len(labels)))
    return [(sorted(everything - set(f)), sorted(f)) for f in folds]


def prf_metrics(predictions, truths, num_classes):
    """Per-class and macro precision / recall / F1 (undefined ratios count as 0)."""
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(truths, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"prediction and truth lengths differ: {len(pred)} vs {len(true)}")
    for arr in (pred, true):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"label out of range [0, {num_classes})")
    per_class = []
    for c in range(num_classes):
        tp = int(np.sum((pred == c) & (true == c)))
        fp = int(np.sum((pred == c) & (true != c)))
        fn = int(np.sum((pred != c) & (true == c)))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        per_class.append({"precision": p, "recall": r, "f1": f1, "support": tp + fn})
    macro = {key: float(np.mean([m[key] for m in per_class])) for key in ("precision", "recall", "f1")}
    macro["accuracy"] = float(np.mean(pred == true)) if pred.size else 0.0
    return {"per_class": per_class, "macro": macro}


def argmax_lowest(p):
    """Index of the largest value, lowest index on ties (np.argmax already does this)."""
    return int(np.argmax(np.asarray(p)))


# ---------------------------------------------------------------------------
# persistence

def save_classifier(params, directory, cfg: ClassifierConfig, labels: LabelMap):
    if len(labels) != cfg.num_singers:
        raise ValueError(f"label map has {len(labels)} names but the model scores {cfg.num_singers} singers")
    directory = Path(directory)
    nn.save_params(params, directory, "classnet", cfg.to_json())
    (directory / "meta.json").write_text(json.dumps({"labels": list(labels.names)}, indent=2) + "\n",
                                         encoding="utf-8")


def load_classifier(directory):
    directory = Path(directory)
    arch = json.loads((directory / "arch.json").read_text(encoding="utf-8"))
    if arch.get("architecture") != "classnet":
        raise nn.BundleError(f"{directory} holds a {arch.get('architecture')!r} model, expected 'classnet'")
    cfg = ClassifierConfig.from_json(arch["hyperparameters"])
    params, _ = nn.load_params(directory, expected=init_classnet(cfg))
    labels = LabelMap(tuple(json.loads((directory / "meta.json").read_text(encoding="utf-8"))["labels"]))
    if len(labels) != cfg.num_singers:
        raise nn.BundleError(f"meta.json lists {len(labels)} singers but the model scores {cfg.num_singers}")
    return params, cfg, labels
