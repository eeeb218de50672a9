"""End-to-end singer identification: segment, keep vocal audio, separate, classify.

Also hosts the pipeline configuration file and the cross-validation harness,
which reuses the front end (segmentation + separation) across folds.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import classifier as clf
from . import segmenter as sgm
from . import separator as sep
from . import signal as sg

log = logging.getLogger(__name__)


class NoVocalContentError(RuntimeError):
    """The segmenter found no vocal interval in the input."""


@dataclass
class PipelineConfig:
    segmenter: str = ""
    separator: str = ""
    classifier: str = ""
    fft_size: int = sg.FFT_SIZE
    hop: int = sg.HOP
    sample_rate: int = sg.SAMPLE_RATE
    p_stay_vocal: float = 0.99
    p_stay_nonvocal: float = 0.99
    prior_vocal: float = 0.5
    min_segment: float = 0.2
    snippet_seconds: float = 6.0

    def __post_init__(self):
        if (self.fft_size, self.hop, self.sample_rate) != (sg.FFT_SIZE, sg.HOP, sg.SAMPLE_RATE):
            raise ValueError("the models are built for a 512-point STFT with a 160-sample hop at 16 kHz")
        if self.snippet_seconds <= 0:
            raise ValueError("snippet_seconds must be positive")
        sgm.TransitionModel(self.p_stay_vocal, self.p_stay_nonvocal, self.prior_vocal)

    @property
    def transition_model(self):
        return sgm.TransitionModel(self.p_stay_vocal, self.p_stay_nonvocal, self.prior_vocal)

    def save(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        path = Path(path)
        obj = json.loads(path.read_text(encoding="utf-8"))
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown pipeline config keys: {sorted(unknown)}")
        cfg = cls(**obj)
        # bundle paths are relative to the config file
        for key in ("segmenter", "separator", "classifier"):
            value = getattr(cfg, key)
            if value and not Path(value).is_absolute():
                setattr(cfg, key, str(path.parent / value))
        return cfg


@dataclass
class Models:
    """Loaded bundles plus the settings that drive inference."""
    seg_params: object
    seg_cfg: sgm.SegmenterConfig
    sep_params: object = None
    sep_cfg: sep.SeparatorConfig = None
    cls_params: object = None
    cls_cfg: clf.ClassifierConfig = None
    labels: clf.LabelMap = None
    config: PipelineConfig = field(default_factory=PipelineConfig)

    @classmethod
    def load(cls, config: PipelineConfig, need=("segmenter", "separator", "classifier")):
        out = {"config": config}
        for key in need:
            path = getattr(config, key)
            if not path:
                raise ValueError(f"pipeline config does not name a {key} bundle")
            if not Path(path).is_dir():
                raise FileNotFoundError(f"{key} bundle {path} does not exist")
        if "segmenter" in need:
            out["seg_params"], out["seg_cfg"] = sgm.load_segmenter(config.segmenter)
        if "separator" in need:
            out["sep_params"], out["sep_cfg"] = sep.load_separator(config.separator)
        if "classifier" in need:
            out["cls_params"], out["cls_cfg"], out["labels"] = clf.load_classifier(config.classifier)
        out.setdefault("seg_params", None)
        out.setdefault("seg_cfg", None)
        return cls(**out)


def vocal_audio(song: sg.AudioBuffer, models: Models):
    """Concatenation of the song's predicted vocal intervals, plus the timeline."""
    cfg = models.config
    timeline, _ = sgm.segment(song, models.seg_params, cfg.transition_model, cfg.min_segment)
    pieces = [song.samples[int(round(a * song.sample_rate)):int(round(b * song.sample_rate))]
              for a, b in timeline.vocal_intervals()]
    pieces = [p for p in pieces if len(p)]
    if not pieces:
        raise NoVocalContentError("no vocal segments were found in the input")
    return sg.AudioBuffer(np.concatenate(pieces), song.sample_rate), timeline


def snippet_magnitudes(audio: sg.AudioBuffer, models: Models, raw=False):
    """Per-snippet magnitude blocks [bins x frames] of the vocal audio.

    With ``raw`` the mixture spectrogram is used as is; otherwise the
    separator's vocal estimate.  A trailing block shorter than half a
    snippet is dropped unless it is the only one.
    """
    snippet = models.config.snippet_seconds
    if raw:
        n = int(round(snippet * audio.sample_rate))
        padded = np.zeros(max(1, -(-len(audio) // n)) * n)
        padded[:len(audio)] = audio.samples
        mag = np.concatenate([sg.stft(sg.AudioBuffer(padded[i:i + n], audio.sample_rate)).magnitude
                              for i in range(0, len(padded), n)], axis=1)
        mag = mag[:, :sg.frame_count(len(audio), sg.HOP)]
    else:
        sep_cfg = models.sep_cfg
        if sep_cfg.snippet_seconds != snippet:
            sep_cfg = sep.SeparatorConfig(**{**asdict(sep_cfg), "snippet_seconds": snippet})
        mag = sep.separate(audio, models.sep_params, sep_cfg)[0].magnitude
    per = int(round(snippet * audio.sample_rate / sg.HOP))
    blocks = [mag[:, i:i + per] for i in range(0, mag.shape[1], per)]
    if len(blocks) > 1 and 2 * blocks[-1].shape[1] < per:
        blocks.pop()
    return blocks


def snippet_features(song: sg.AudioBuffer, models: Models, raw=False):
    audio, _ = vocal_audio(song, models)
    return [clf.features_from_spectrogram(m) for m in snippet_magnitudes(audio, models, raw)]


def aggregate(snippet_distributions):
    """Song-level prediction: mean of snippet distributions, argmax with lowest-index ties."""
    dists = [np.asarray(d, dtype=np.float64) for d in snippet_distributions]
    if not dists:
        raise ValueError("cannot aggregate zero snippets")
    mean = np.mean(dists, axis=0)
    return clf.Prediction(clf.argmax_lowest(mean), mean, dists)


def classify_features(features, params, cfg: clf.ClassifierConfig):
    return aggregate([clf.classnet_forward(f, params, cfg) for f in features])


def predict_song(song: sg.AudioBuffer, models: Models, raw=False) -> clf.Prediction:
    if song.sample_rate != sg.SAMPLE_RATE:
        song = sg.resample(song, sg.SAMPLE_RATE)
    if song.duration < 1.0:
        raise ValueError(f"song is {song.duration:.3f} s long; identification needs at least 1 s")
    return classify_features(snippet_features(song, models, raw), models.cls_params, models.cls_cfg)


# ---------------------------------------------------------------------------
# cross-validation

def cross_validate(features, labels, num_classes, k=5, seed=0, epochs=30, cls_cfg=None):
    """k-fold stratified CV over songs given precomputed per-song snippet features.

    ``features[i]`` is the list of snippet FeatureMatrix objects of song i
    and ``labels[i]`` its class index.  Returns song-level and snippet-level
    metrics for every fold and pooled over folds.
    """
    cls_cfg = cls_cfg or clf.ClassifierConfig(num_singers=num_classes)
    folds = clf.stratified_kfold(labels, k, seed)
    song_pred = np.full(len(labels), -1)
    snip_pred, snip_true = [], []
    per_fold = []
    for fi, (train_idx, test_idx) in enumerate(folds):
        data = [(f, labels[i]) for i in train_idx for f in features[i]]
        res = clf.train_classifier(data, cls_cfg, epochs=epochs, seed=seed + fi)
        fold_song, fold_true, fold_snip, fold_snip_true = [], [], [], []
        for i in test_idx:
            pred = classify_features(features[i], res.params, cls_cfg)
            song_pred[i] = pred.singer
            fold_song.append(pred.singer)
            fold_true.append(labels[i])
            for d in pred.snippets:
                fold_snip.append(clf.argmax_lowest(d))
                fold_snip_true.append(labels[i])
        snip_pred += fold_snip
        snip_true += fold_snip_true
        per_fold.append({
            "fold": fi,
            "test_songs": len(test_idx),
            "final_loss": res.losses[-1] if res.losses else None,
            "song": clf.prf_metrics(fold_song, fold_true, num_classes)["macro"],
            "snippet": clf.prf_metrics(fold_snip, fold_snip_true, num_classes)["macro"],
        })
        log.info("fold %d song macro F1 %.4f", fi, per_fold[-1]["song"]["f1"])
    return {
        "k": k,
        "folds": per_fold,
        "song": clf.prf_metrics(song_pred, labels, num_classes),
        "snippet": clf.prf_metrics(snip_pred, snip_true, num_classes),
        "song_predictions": song_pred.tolist(),
    }
