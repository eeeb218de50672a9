"""Vocal / non-vocal segmentation at 10 ms resolution.

A small CNN scores a 50-frame (500 ms) feature window centred on every
frame; the resulting probability track is smoothed by exact Viterbi decoding
of a two-state HMM and run-length encoded into a timeline.
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

NON_VOCAL, VOCAL = 0, 1
LABEL_NAMES = ("non_vocal", "vocal")
HOP_SECONDS = sg.HOP / sg.SAMPLE_RATE


# ---------------------------------------------------------------------------
# timelines

@dataclass
class Segment:
    start: float
    end: float
    label: str


@dataclass
class SegmentTimeline:
    segments: list = field(default_factory=list)
    hop_seconds: float = HOP_SECONDS

    def validate(self):
        for s in self.segments:
            if s.label not in LABEL_NAMES:
                raise ValueError(f"unknown segment label {s.label!r}")
            if not s.start < s.end:
                raise ValueError(f"empty segment {s}")
        for a, b in zip(self.segments, self.segments[1:]):
            if abs(a.end - b.start) > 1e-9:
                raise ValueError(f"segments not contiguous at {a.end} / {b.start}")
            if a.label == b.label:
                raise ValueError(f"adjacent segments share label {a.label!r} at {a.end}")
        return self

    @property
    def duration(self):
        return self.segments[-1].end if self.segments else 0.0

    def vocal_intervals(self):
        return [(s.start, s.end) for s in self.segments if s.label == "vocal"]

    def frame_labels(self, n_frames=None):
        """Label per frame on the hop grid; frame i is the one centred at i * hop."""
        n = n_frames if n_frames is not None else int(round(self.duration / self.hop_seconds))
        out = np.zeros(n, dtype=np.int64)
        for s in self.segments:
            a = int(round(s.start / self.hop_seconds))
            b = int(round(s.end / self.hop_seconds))
            out[a:b] = LABEL_NAMES.index(s.label)
        return out

    def to_json(self):
        return {"hop_seconds": self.hop_seconds,
                "segments": [asdict(s) for s in self.segments]}

    @classmethod
    def from_json(cls, obj):
        segs = [Segment(float(s["start"]), float(s["end"]), s["label"]) for s in obj["segments"]]
        return cls(segs, float(obj.get("hop_seconds", HOP_SECONDS))).validate()


def _runs(labels):
    labels = np.asarray(labels)
    change = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [len(labels)]])
    return [[int(labels[s]), int(s), int(e)] for s, e in zip(starts, ends)]


def timeline_from_labels(labels, hop_seconds=HOP_SECONDS, min_segment=0.2):
    """Run-length encode frame labels, absorbing runs shorter than ``min_segment`` seconds.

    The shortest offending run is merged into its longer neighbour first and
    the process repeats until every run is long enough (or one run remains).
    """
    if len(labels) == 0:
        raise ValueError("timeline_from_labels needs at least one label")
    runs = _runs(labels)
    min_frames = min_segment / hop_seconds - 1e-9
    while len(runs) > 1:
        lengths = [e - s for _, s, e in runs]
        i = int(np.argmin(lengths))
        if lengths[i] >= min_frames:
            break
        left = lengths[i - 1] if i > 0 else -1
        right = lengths[i + 1] if i + 1 < len(runs) else -1
        j = i - 1 if left >= right else i + 1
        runs[j] = [runs[j][0], min(runs[i][1], runs[j][1]), max(runs[i][2], runs[j][2])]
        del runs[i]
        merged = [runs[0]]
        for r in runs[1:]:
            if r[0] == merged[-1][0]:
                merged[-1][2] = r[2]
            else:
                merged.append(r)
        runs = merged
    segs = [Segment(s * hop_seconds, e * hop_seconds, LABEL_NAMES[lab]) for lab, s, e in runs]
    return SegmentTimeline(segs, hop_seconds).validate()


# ---------------------------------------------------------------------------
# Viterbi smoothing

@dataclass
class TransitionModel:
    p_stay_vocal: float = 0.99
    p_stay_nonvocal: float = 0.99
    prior_vocal: float = 0.5

    def __post_init__(self):
        for name in ("p_stay_vocal", "p_stay_nonvocal", "prior_vocal"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")

    def log_transitions(self):
        pn, pv = self.p_stay_nonvocal, self.p_stay_vocal
        return np.log(np.array([[pn, 1.0 - pn], [1.0 - pv, pv]]))

    def log_prior(self):
        return np.log(np.array([1.0 - self.prior_vocal, self.prior_vocal]))


def _log_emissions(p_vocal):
    p = np.clip(np.asarray(p_vocal, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    return np.stack([np.log1p(-p), np.log(p)], axis=1)


def viterbi_smooth(p_vocal, tm: TransitionModel = TransitionModel()):
    """MAP state path of the 2-state HMM with emissions (1 - p, p); ties go to non-vocal."""
    em = _log_emissions(p_vocal)
    T = len(em)
    if T < 1:
        raise ValueError("viterbi_smooth needs at least one frame")
    logA = tm.log_transitions()
    back = np.zeros((T, 2), dtype=np.int64)
    delta = tm.log_prior() + em[0]
    for t in range(1, T):
        cand = delta[:, None] + logA
        back[t] = np.argmax(cand, axis=0)
        delta = cand[back[t], [0, 1]] + em[t]
    path = np.empty(T, dtype=np.int64)
    path[-1] = int(np.argmax(delta))
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


def path_log_score(path, p_vocal, tm: TransitionModel):
    em = _log_emissions(p_vocal)
    logA = tm.log_transitions()
    s = tm.log_prior()[path[0]] + em[0, path[0]]
    for t in range(1, len(path)):
        s += logA[path[t - 1], path[t]] + em[t, path[t]]
    return s


# ---------------------------------------------------------------------------
# features and network

@dataclass(frozen=True)
class SegmenterConfig:
    window_frames: int = 50
    mfcc_dims: int = 20
    conv1_filters: int = 128
    conv1_kernel: tuple = (10, 10)
    conv2_filters: int = 32
    conv2_kernel: tuple = (5, 5)
    pool1: tuple = (5, 5)
    pool2: tuple = (2, 2)
    dense: tuple = (128, 128)
    dropout: tuple = (0.75, 0.5)
    classes: int = 2

    def flat_dims(self):
        h = self.window_frames // self.pool1[0] // self.pool2[0]
        w = self.mfcc_dims // self.pool1[1] // self.pool2[1]
        return h * w * self.conv2_filters

    def to_json(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, obj):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()})


# 26 log-mel bands pooled into 7 contiguous groups appended to the 13 MFCCs
MEL_GROUPS = np.array_split(np.arange(26), 7)


def frame_features(song: sg.AudioBuffer, cfg: sg.StftConfig = sg.StftConfig()):
    """(frames x 20): 13 MFCCs followed by 7 band-averaged log-mel energies."""
    spec = sg.stft(song, cfg)
    logmel = sg.log_mel(spec)
    ceps = sg.mfcc(spec).data
    groups = np.stack([logmel[:, g].mean(axis=1) for g in MEL_GROUPS], axis=1)
    return np.hstack([ceps, groups])


def window_indices(centres, n_frames, width=50):
    """Frame indices of ``width``-frame windows centred on ``centres``, replicated at the edges."""
    offs = np.arange(width) - width // 2
    return np.clip(np.asarray(centres)[:, None] + offs[None, :], 0, n_frames - 1)


def init_segnet(cfg: SegmenterConfig = SegmenterConfig(), seed=0):
    rng = nn.make_rng(seed)
    ps = nn.ParameterSet()
    ps.add("norm.mean", np.zeros(cfg.mfcc_dims), trainable=False)
    ps.add("norm.std", np.ones(cfg.mfcc_dims), trainable=False)
    kh, kw = cfg.conv1_kernel
    ps.add("conv1.k", nn.glorot(rng, (cfg.conv1_filters, 1, kh, kw), kh * kw, cfg.conv1_filters * kh * kw))
    ps.add("conv1.b", np.zeros(cfg.conv1_filters))
    kh, kw = cfg.conv2_kernel
    c_in = cfg.conv1_filters
    ps.add("conv2.k", nn.glorot(rng, (cfg.conv2_filters, c_in, kh, kw), c_in * kh * kw, cfg.conv2_filters * kh * kw))
    ps.add("conv2.b", np.zeros(cfg.conv2_filters))
    dims = [cfg.flat_dims(), *cfg.dense, cfg.classes]
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        name = "out" if i == len(dims) - 2 else f"dense{i + 1}"
        ps.add(f"{name}.W", nn.glorot(rng, (a, b), a, b))
        ps.add(f"{name}.b", np.zeros(b))
    return ps


def segnet_logits(windows, params, cfg: SegmenterConfig = SegmenterConfig(), train=False, rng=None,
                  trace=None):
    """Logits [batch, 2] for raw (unnormalised) feature windows [batch, 50, 20]."""
    windows = np.asarray(windows, dtype=np.float64)
    if windows.shape[1:] != (cfg.window_frames, cfg.mfcc_dims):
        raise ValueError(f"segnet expects windows of shape (*, {cfg.window_frames}, {cfg.mfcc_dims}), "
                         f"got {windows.shape}")
    z = (windows - params["norm.mean"].data) / params["norm.std"].data
    x = Tensor(z[:, None, :, :])
    h = nn.relu(nn.conv2d_same(x, params["conv1.k"], params["conv1.b"]))
    h = nn.maxpool2d(h, *cfg.pool1)
    if trace is not None:
        trace.append(h.shape)
    h = nn.relu(nn.conv2d_same(h, params["conv2.k"], params["conv2.b"]))
    if trace is not None:
        trace.append(h.shape)
    h = nn.maxpool2d(h, *cfg.pool2)
    if trace is not None:
        trace.append(h.shape)
    h = nn.reshape(h, (h.shape[0], -1))
    for i, p in enumerate(cfg.dropout):
        h = nn.relu(nn.dense(h, params[f"dense{i + 1}.W"], params[f"dense{i + 1}.b"]))
        h = nn.dropout(h, p, train, rng)
    return nn.dense(h, params["out.W"], params["out.b"])


def segnet_forward(window, params, cfg: SegmenterConfig = SegmenterConfig(), train=False, rng=None):
    """Probability that a single 50 x 20 window is vocal."""
    window = np.asarray(window)
    if window.shape != (cfg.window_frames, cfg.mfcc_dims):
        raise ValueError(f"segnet_forward expects a {cfg.window_frames}x{cfg.mfcc_dims} window, got {window.shape}")
    logits = segnet_logits(window[None], params, cfg, train, rng)
    return float(nn.softmax(logits.data)[0, VOCAL])


@dataclass
class FrameProbs:
    p_vocal: np.ndarray
    hop_seconds: float = HOP_SECONDS


def frame_probabilities(song: sg.AudioBuffer, params, cfg: SegmenterConfig = SegmenterConfig(),
                        batch=128) -> FrameProbs:
    if song.duration < 0.5:
        raise ValueError(f"song is {song.duration:.3f} s long; segmentation needs at least 0.5 s of audio")
    feats = frame_features(song)
    n = len(feats)
    out = np.empty(n)
    for start in range(0, n, batch):
        centres = np.arange(start, min(start + batch, n))
        windows = feats[window_indices(centres, n, cfg.window_frames)]
        out[start:start + len(centres)] = nn.softmax(segnet_logits(windows, params, cfg).data)[:, VOCAL]
    return FrameProbs(out)


def segment(song, params, tm: TransitionModel = TransitionModel(), min_segment=0.2):
    probs = frame_probabilities(song, params)
    labels = viterbi_smooth(probs.p_vocal, tm)
    return timeline_from_labels(labels, probs.hop_seconds, min_segment), probs


# ---------------------------------------------------------------------------
# training / evaluation

@dataclass
class TrainResult:
    params: nn.ParameterSet
    losses: list


def train_segmenter(data, epochs=5, seed=0, cfg: SegmenterConfig = SegmenterConfig(), batch=64,
                    windows_per_epoch=6400, learning_rate=0.001):
    """Train on (AudioBuffer, SegmentTimeline) pairs with class-balanced window batches.

    One epoch is ``windows_per_epoch`` sampled windows (half vocal, half not).
    """
    if not data:
        raise ValueError("train_segmenter needs a non-empty manifest")
    feats, labels, offsets = [], [], []
    pos = 0
    for audio, timeline in data:
        f = frame_features(audio)
        feats.append(f)
        labels.append(timeline.frame_labels(len(f)))
        offsets.append(np.full(len(f), pos))
        pos += len(f)
    all_feats = np.concatenate(feats)
    all_labels = np.concatenate(labels)
    starts = np.concatenate(offsets)
    lengths = np.concatenate([np.full(len(f), len(f)) for f in feats])
    by_class = [np.flatnonzero(all_labels == c) for c in (NON_VOCAL, VOCAL)]
    if any(len(ix) == 0 for ix in by_class):
        raise ValueError("segmenter training data must contain both vocal and non-vocal frames")

    params = init_segnet(cfg, seed)
    params["norm.mean"].data = all_feats.mean(axis=0)
    params["norm.std"].data = all_feats.std(axis=0) + 1e-8
    rng = nn.make_rng(seed + 1)
    adam = nn.AdamConfig(learning_rate=learning_rate)
    steps = max(1, windows_per_epoch // batch)
    half = batch // 2
    offs = np.arange(cfg.window_frames) - cfg.window_frames // 2
    losses = []
    for epoch in range(epochs):
        total = 0.0
        for _ in range(steps):
            pick = np.concatenate([rng.choice(by_class[0], half), rng.choice(by_class[1], batch - half)])
            local = pick - starts[pick]
            idx = np.clip(local[:, None] + offs[None, :], 0, lengths[pick][:, None] - 1) + starts[pick][:, None]
            logits = segnet_logits(all_feats[idx], params, cfg, train=True, rng=rng)
            loss, _ = nn.softmax_xent(logits, all_labels[pick])
            loss.backward()
            nn.adam_step(params, adam)
            total += float(loss.data)
        losses.append(total / steps)
        log.info("segmenter epoch %d loss %.4f", epoch + 1, losses[-1])
    return TrainResult(params, losses)


def eval_segmentation(pred: SegmentTimeline, truth: SegmentTimeline):
    """Frame-level precision per class and their mean on the 10 ms grid."""
    hop = truth.hop_seconds
    n_pred = int(round(pred.duration / hop))
    n_true = int(round(truth.duration / hop))
    if abs(n_pred - n_true) > 1:
        raise ValueError(f"timeline durations differ by more than one frame: {pred.duration} vs {truth.duration}")
    n = min(n_pred, n_true)
    return label_precision(pred.frame_labels(n), truth.frame_labels(n))


def label_precision(pred, truth):
    pred, truth = np.asarray(pred), np.asarray(truth)
    out = {}
    for c, name in enumerate(LABEL_NAMES):
        predicted = pred == c
        out[name] = float((predicted & (truth == c)).sum() / predicted.sum()) if predicted.any() else 0.0
    out["mean"] = (out["vocal"] + out["non_vocal"]) / 2
    out["accuracy"] = float((pred == truth).mean())
    return out


def save_segmenter(params, directory, cfg: SegmenterConfig = SegmenterConfig()):
    nn.save_params(params, directory, "segnet", cfg.to_json())


def load_segmenter(directory):
    directory = Path(directory)
    arch = json.loads((directory / "arch.json").read_text(encoding="utf-8"))
    if arch.get("architecture") != "segnet":
        raise nn.BundleError(f"{directory} holds a {arch.get('architecture')!r} model, expected 'segnet'")
    cfg = SegmenterConfig.from_json(arch["hyperparameters"])
    params, _ = nn.load_params(directory, expected=init_segnet(cfg))
    return params, cfg
