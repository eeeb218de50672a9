"""Vocal separation on log1p magnitude spectrograms.

The network treats the 257 frequency bins as channels and convolves along
time: three stride-2 1-D convolutions encode, three stride-2 transposed
convolutions decode, and every encoder output reaches the decoder through a
recurrent layer (GRU, or LSTM for the comparison variant) whose output is
added to the matching decoder activation.  Audio is rebuilt from the
estimated magnitude and the mixture's phase.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import nn
from . import signal as sg
from .nn import Tensor

log = logging.getLogger(__name__)

SI_SDR_CAP = 100.0
SKIP_KINDS = ("gru", "lstm")


@dataclass(frozen=True)
class SeparatorConfig:
    bins: int = 257
    channels: tuple = (256, 128, 64)
    kernel: int = 5
    stride: int = 2
    skip_kind: str = "gru"
    snippet_seconds: float = 6.0

    def __post_init__(self):
        if self.skip_kind not in SKIP_KINDS:
            raise ValueError(f"skip_kind must be one of {SKIP_KINDS}, got {self.skip_kind!r}")
        if len(self.channels) != 3:
            raise ValueError("the separator has exactly three encoder and three decoder layers")

    @property
    def min_frames(self):
        return self.stride ** len(self.channels)

    def to_json(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, obj):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()})


def init_sepnet(cfg: SeparatorConfig = SeparatorConfig(), seed=0):
    rng = nn.make_rng(seed)
    ps = nn.ParameterSet()
    widths = [cfg.bins, *cfg.channels]
    k = cfg.kernel
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        ps.add(f"enc{i + 1}.k", nn.glorot(rng, (b, a, k), a * k, b * k))
        ps.add(f"enc{i + 1}.b", np.zeros(b))
    for i, h in enumerate(cfg.channels):
        name = f"skip{i + 1}"
        gates = 3 if cfg.skip_kind == "gru" else 4
        ps.add(f"{name}.Wx", nn.glorot(rng, (h, gates * h), h, h))
        ps.add(f"{name}.Wh", nn.glorot(rng, (h, gates * h), h, h))
        if cfg.skip_kind == "gru":
            ps.add(f"{name}.bx", np.zeros(3 * h))
            ps.add(f"{name}.bh", np.zeros(3 * h))
        else:
            b = np.zeros(4 * h)
            b[h:2 * h] = 1.0  # forget-gate bias
            ps.add(f"{name}.b", b)
    # decoder kernels use the conv1d_transpose layout [in, out, kernel]
    rev = widths[::-1]
    for i, (a, b) in enumerate(zip(rev, rev[1:])):
        ps.add(f"dec{i + 1}.k", nn.glorot(rng, (a, b, k), a * k, b * k))
        ps.add(f"dec{i + 1}.b", np.zeros(b))
    return ps


def _skip(h, params, name, kind):
    """Recurrent map over time of an encoder activation [B, C, T] -> [B, C, T]."""
    seq = nn.transpose(h, (2, 0, 1))
    if kind == "gru":
        out = nn.gru_seq(seq, params[f"{name}.Wx"], params[f"{name}.Wh"], params[f"{name}.bx"],
                         params[f"{name}.bh"])
    else:
        out = nn.lstm_seq(seq, params[f"{name}.Wx"], params[f"{name}.Wh"], params[f"{name}.b"])
    return nn.transpose(out, (1, 2, 0))


def sepnet_logits(x, params, cfg: SeparatorConfig = SeparatorConfig()):
    """Batched forward pass: log1p magnitudes [B, bins, T] -> estimated vocal log1p magnitudes."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if x.ndim != 3 or x.shape[1] != cfg.bins:
        raise ValueError(f"sepnet expects [batch, {cfg.bins}, frames], got {x.shape}")
    T = x.shape[2]
    if T < cfg.min_frames or T % cfg.min_frames:
        raise ValueError(f"sepnet needs a frame count that is a positive multiple of {cfg.min_frames}, got {T}")
    h = x
    encoded = []
    for i in range(len(cfg.channels)):
        h = nn.relu(nn.conv1d(h, params[f"enc{i + 1}.k"], params[f"enc{i + 1}.b"], stride=cfg.stride))
        encoded.append(h)
    skips = [_skip(e, params, f"skip{i + 1}", cfg.skip_kind) for i, e in enumerate(encoded)]
    h = skips[-1]
    n = len(cfg.channels)
    for i in range(n):
        h = nn.conv1d_transpose(h, params[f"dec{i + 1}.k"], params[f"dec{i + 1}.b"], stride=cfg.stride)
        if i < n - 1:
            h = nn.add(h, skips[n - 2 - i])
        h = nn.relu(h)
    return h


def sepnet_forward(x, params, cfg: SeparatorConfig = SeparatorConfig()):
    """Single spectrogram [bins, T] -> estimated vocal log1p magnitude [bins, T] (numpy)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"sepnet_forward expects a [bins, frames] matrix, got shape {x.shape}")
    return sepnet_logits(x[None], params, cfg).data[0]


# ---------------------------------------------------------------------------
# inference

def _padded_snippets(audio: sg.AudioBuffer, snippet_seconds):
    n = int(round(snippet_seconds * audio.sample_rate))
    count = max(1, -(-len(audio) // n))
    padded = np.zeros(count * n)
    padded[:len(audio)] = audio.samples
    return [sg.AudioBuffer(padded[i * n:(i + 1) * n], audio.sample_rate) for i in range(count)]


def separate(mixture: sg.AudioBuffer, params, cfg: SeparatorConfig = SeparatorConfig(), batch=4):
    """Estimate the vocal stem; returns (vocal spectrogram, vocal audio) aligned with ``mixture``.

    The mixture is zero-padded to whole snippets, every snippet goes through
    the network, and the resynthesised snippets are concatenated and trimmed.
    The spectrogram covers only frames that overlap real audio.
    """
    if len(mixture) == 0:
        raise ValueError("cannot separate an empty mixture")
    if mixture.sample_rate != sg.SAMPLE_RATE:
        mixture = sg.resample(mixture, sg.SAMPLE_RATE)
    snippets = _padded_snippets(mixture, cfg.snippet_seconds)
    specs = [sg.stft(s) for s in snippets]
    pad_to = -(-specs[0].frames // cfg.min_frames) * cfg.min_frames
    mags = []
    for start in range(0, len(specs), batch):
        block = specs[start:start + batch]
        x = np.zeros((len(block), cfg.bins, pad_to))
        for j, s in enumerate(block):
            x[j, :, :s.frames] = sg.log1p_compress(s.magnitude)
        y = sepnet_logits(x, params, cfg).data
        mags.extend(sg.expm1_expand(y[j, :, :s.frames]) for j, s in enumerate(block))
    pieces = [sg.istft(sg.ComplexSpectrogram(m, s.phase, s.config, s.length)).samples for m, s in zip(mags, specs)]
    audio = sg.AudioBuffer(np.concatenate(pieces)[:len(mixture)], mixture.sample_rate)
    keep = sg.frame_count(len(mixture), sg.HOP)
    spec = sg.ComplexSpectrogram(np.concatenate(mags, axis=1)[:, :keep],
                                 np.concatenate([s.phase for s in specs], axis=1)[:, :keep],
                                 specs[0].config, len(mixture))
    return spec, audio


# ---------------------------------------------------------------------------
# training

@dataclass
class SnippetPair:
    mixture: sg.AudioBuffer
    vocal: sg.AudioBuffer
    name: str = ""

    def __post_init__(self):
        if len(self.mixture) != len(self.vocal) or self.mixture.sample_rate != self.vocal.sample_rate:
            raise ValueError(f"pair {self.name or '?'}: mixture and vocal differ in length or sample rate "
                             f"({len(self.mixture)} vs {len(self.vocal)} samples)")


@dataclass
class TrainResult:
    params: nn.ParameterSet
    losses: list


def _training_tensors(pairs, cfg):
    xs, ys = [], []
    for pair in pairs:
        for mix, voc in zip(sg.chop(pair.mixture, cfg.snippet_seconds), sg.chop(pair.vocal, cfg.snippet_seconds)):
            xs.append(sg.log1p_compress(sg.stft(mix).magnitude))
            ys.append(sg.log1p_compress(sg.stft(voc).magnitude))
    if not xs:
        raise ValueError(f"no pair is long enough for a {cfg.snippet_seconds} s snippet")
    T = xs[0].shape[1] // cfg.min_frames * cfg.min_frames
    return np.stack([x[:, :T] for x in xs]), np.stack([y[:, :T] for y in ys])


def train_separator(pairs, cfg: SeparatorConfig = SeparatorConfig(), epochs=10, seed=0, batch=4,
                    learning_rate=0.001):
    """L1 regression of vocal log1p magnitudes from mixture log1p magnitudes."""
    if not pairs:
        raise ValueError("train_separator needs a non-empty manifest")
    X, Y = _training_tensors(pairs, cfg)
    params = init_sepnet(cfg, seed)
    rng = nn.make_rng(seed + 1)
    adam = nn.AdamConfig(learning_rate=learning_rate)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(X))
        total, steps = 0.0, 0
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            loss = nn.l1_loss(sepnet_logits(X[idx], params, cfg), Y[idx])
            loss.backward()
            nn.adam_step(params, adam)
            total += float(loss.data)
            steps += 1
        losses.append(total / steps)
        log.info("separator (%s skip) epoch %d loss %.4f", cfg.skip_kind, epoch + 1, losses[-1])
    return TrainResult(params, losses)


# ---------------------------------------------------------------------------
# evaluation

def si_sdr(reference: sg.AudioBuffer, estimate: sg.AudioBuffer):
    """Scale-invariant SDR in dB, capped at 100 dB for a perfect (scaled) match."""
    ref = np.asarray(getattr(reference, "samples", reference), dtype=np.float64)
    est = np.asarray(getattr(estimate, "samples", estimate), dtype=np.float64)
    if ref.shape != est.shape:
        raise ValueError(f"si_sdr needs equal lengths, got {len(ref)} and {len(est)}")
    ref_energy = ref @ ref
    if ref_energy == 0.0:
        raise ValueError("si_sdr reference is identically zero")
    target = (est @ ref) / ref_energy * ref
    err = est - target
    num, den = target @ target, err @ err
    if den <= num * 10 ** (-SI_SDR_CAP / 10):
        return SI_SDR_CAP
    return float(10 * np.log10(num / den))


def eval_separation(pairs, params, cfg: SeparatorConfig = SeparatorConfig()):
    """SI-SDR of the estimate and of the unprocessed mixture for every pair."""
    if not pairs:
        raise ValueError("eval_separation needs a non-empty manifest")
    per_track = []
    for i, pair in enumerate(pairs):
        _, est = separate(pair.mixture, params, cfg)
        score = si_sdr(pair.vocal, est)
        base = si_sdr(pair.vocal, pair.mixture)
        per_track.append({"id": pair.name or str(i), "si_sdr": score, "baseline": base,
                          "improvement": score - base})
    col = lambda key: np.array([t[key] for t in per_track])
    return {
        "skip_kind": cfg.skip_kind,
        "per_track": per_track,
        "median": float(np.median(col("si_sdr"))),
        "mean": float(np.mean(col("si_sdr"))),
        "baseline_median": float(np.median(col("baseline"))),
        "baseline_mean": float(np.mean(col("baseline"))),
        "median_improvement": float(np.median(col("improvement"))),
        "mean_improvement": float(np.mean(col("improvement"))),
    }


def load_pairs(rows):
    """SnippetPairs from separation-manifest rows ({"id", "mixture", "vocal"})."""
    return [SnippetPair(sg.load_audio(r["mixture"]), sg.load_audio(r["vocal"]), r.get("id", r["mixture"]))
            for r in rows]


def save_separator(params, directory, cfg: SeparatorConfig = SeparatorConfig()):
    nn.save_params(params, directory, "sepnet", cfg.to_json())


def load_separator(directory):
    directory = Path(directory)
    arch = json.loads((directory / "arch.json").read_text(encoding="utf-8"))
    if arch.get("architecture") != "sepnet":
        raise nn.BundleError(f"{directory} holds a {arch.get('architecture')!r} model, expected 'sepnet'")
    cfg = SeparatorConfig.from_json(arch["hyperparameters"])
    params, _ = nn.load_params(directory, expected=init_sepnet(cfg))
    return params, cfg
