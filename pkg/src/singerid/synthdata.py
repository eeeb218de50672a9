"""Deterministic synthetic "songs" with ground-truth stems, timelines and singer labels.

A singer is a parametric voice: a harmonic glottal-like source whose pitch
wanders inside the singer's range with vibrato, shaped by three formant
resonators plus breath noise.  The accompaniment is a sawtooth chord pad
with percussion on a tempo grid.  Every output is a pure function of
(profile, recipe, seed).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from . import signal as sg
from .segmenter import Segment, SegmentTimeline

log = logging.getLogger(__name__)

SR = sg.SAMPLE_RATE
VOCAL_RMS = 0.1
INSTRUMENTAL_RMS = 0.12


@dataclass
class SingerProfile:
    name: str
    f0_range: tuple
    vibrato_rate: float
    vibrato_depth: float  # cents
    formant_centers: tuple
    breathiness: float

    def __post_init__(self):
        lo, hi = self.f0_range
        if not 80 <= lo < hi <= 1000:
            raise ValueError(f"f0_range {self.f0_range} must lie within [80, 1000] Hz")
        if list(self.formant_centers) != sorted(self.formant_centers) or len(self.formant_centers) != 3:
            raise ValueError("need three increasing formant centres")
        if not 0 <= self.breathiness <= 0.5:
            raise ValueError("breathiness must be in [0, 0.5]")

    @property
    def mean_f0(self):
        return float(np.sqrt(self.f0_range[0] * self.f0_range[1]))


@dataclass
class SongRecipe:
    sections: list  # [(duration_s, "vocal" | "instrumental"), ...]
    singer: int
    tempo: float
    seed: int

    def validate(self):
        kinds = {k for _, k in self.sections}
        if sum(d for d, _ in self.sections) < 8.0 - 1e-9:
            raise ValueError("a song recipe must last at least 8 s")
        if not {"vocal", "instrumental"} <= kinds:
            raise ValueError("a song recipe needs at least one vocal and one instrumental section")
        return self


@dataclass
class Song:
    mixture: sg.AudioBuffer
    vocal: sg.AudioBuffer
    instrumental: sg.AudioBuffer
    timeline: SegmentTimeline
    snr_db: float


def _rng(*keys):
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]))


def _rms(x):
    return float(np.sqrt(np.mean(x ** 2))) if len(x) else 0.0


def _resonator(x, freq, bandwidth):
    r = np.exp(-np.pi * bandwidth / SR)
    theta = 2 * np.pi * freq / SR
    return lfilter([1.0 - r], [1.0, -2.0 * r * np.cos(theta), r * r], x)


def _formant_filter(x, formants):
    gains = (1.0, 0.7, 0.4)
    widths = (90.0, 110.0, 150.0)
    return sum(g * _resonator(x, f, w) for f, g, w in zip(formants, gains, widths))


def _pitch_track(profile: SingerProfile, n, rng):
    """Per-sample f0: a melody of held notes with short glides plus vibrato."""
    lo, hi = profile.f0_range
    margin = 2 ** (profile.vibrato_depth / 1200)
    lo_c, hi_c = np.log(lo * margin), np.log(hi / margin)
    notes = []
    total = 0
    cur = rng.uniform(lo_c, hi_c)
    while total < n:
        length = int(rng.uniform(0.22, 0.6) * SR)
        cur = cur + rng.normal(0, 0.12 * (hi_c - lo_c))
        # reflect back inside the allowed band
        while not lo_c <= cur <= hi_c:
            cur = 2 * lo_c - cur if cur < lo_c else 2 * hi_c - cur
        notes.append((length, cur))
        total += length
    logf = np.concatenate([np.full(length, v) for length, v in notes])[:n]
    glide = max(1, int(0.04 * SR))
    kernel = np.ones(glide) / glide
    logf = np.convolve(np.pad(logf, (glide // 2, glide - 1 - glide // 2), mode="edge"), kernel, mode="valid")
    t = np.arange(n) / SR
    phase = rng.uniform(0, 2 * np.pi)
    vib = (profile.vibrato_depth / 1200) * np.log(2) * np.sin(2 * np.pi * profile.vibrato_rate * t + phase)
    return np.exp(logf + vib), notes


def synth_vocal(profile: SingerProfile, duration_s, seed) -> sg.AudioBuffer:
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    rng = _rng(seed, 1)
    n = int(round(duration_s * SR))
    f0, notes = _pitch_track(profile, n, rng)
    phase = 2 * np.pi * np.cumsum(f0) / SR
    source = np.zeros(n)
    k_max = int(7600 // profile.f0_range[0]) + 1
    for k in range(1, k_max + 1):
        active = k * f0 < 7600
        if not active.any():
            break
        source += active * np.sin(k * phase) * k ** -1.1
    # syllable-like amplitude contour: each note swells in and eases off a little
    env = np.empty(n)
    pos = 0
    for length, _ in notes:
        seg = np.minimum(1.0, np.arange(length) / (0.03 * SR))
        seg *= 1.0 - 0.3 * (np.arange(length) / length) ** 2
        seg *= rng.uniform(0.75, 1.0)
        take = min(length, n - pos)
        env[pos:pos + take] = seg[:take]
        pos += take
    env = np.convolve(env, np.ones(160) / 160, mode="same")
    voiced = _formant_filter(source, profile.formant_centers)
    breath = _formant_filter(rng.normal(size=n), profile.formant_centers)
    voiced /= _rms(voiced) + 1e-12
    breath /= _rms(breath) + 1e-12
    x = env * ((1.0 - profile.breathiness) * voiced + profile.breathiness * breath)
    x *= VOCAL_RMS / (_rms(x) + 1e-12)
    return sg.AudioBuffer(x, SR)


def _saw(freq, t, max_hz=7000.0):
    out = np.zeros_like(t)
    k = 1
    while k * freq < max_hz:
        out += np.sin(2 * np.pi * k * freq * t) / k * np.exp(-k * freq / 2500.0)
        k += 1
    return out


def synth_instrumental(duration_s, seed, tempo=None) -> sg.AudioBuffer:
    """Chord pad, kick/hat percussion on the beat grid and a soft noise floor."""
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    rng = _rng(seed, 2)
    n = int(round(duration_s * SR))
    t = np.arange(n) / SR
    tempo = tempo if tempo is not None else rng.uniform(80, 140)
    beat = 60.0 / tempo
    bar = int(round(4 * beat * SR))
    pad = np.zeros(n)
    for start in range(0, n, bar):
        root = rng.integers(43, 55)
        third = 3 if rng.random() < 0.5 else 4
        seg = slice(start, min(start + bar, n))
        tt = t[seg] - t[start]
        env = np.minimum(1.0, tt / 0.08) * np.minimum(1.0, (t[seg][-1] - t[seg] + 1e-3) / 0.05)
        for semis in (0, third, 7, 12):
            f = 440.0 * 2 ** ((root + semis - 69) / 12)
            pad[seg] += env * _saw(f, t[seg]) * rng.uniform(0.6, 1.0)
    perc = np.zeros(n)
    hat_len = int(0.05 * SR)
    kick_len = int(0.15 * SR)
    for i, start in enumerate(range(0, n, int(round(beat * SR / 2)))):
        hat = rng.normal(size=hat_len)
        hat = np.diff(hat, prepend=0.0) * np.exp(-np.arange(hat_len) / (0.012 * SR))
        perc[start:start + hat_len] += 0.5 * hat[:n - start]
        if i % 4 == 0:
            kt = np.arange(kick_len) / SR
            kick = np.sin(2 * np.pi * (55 * kt + 60 * (1 - np.exp(-kt / 0.03)) * 0.03)) * np.exp(-kt / 0.05)
            perc[start:start + kick_len] += 2.0 * kick[:n - start]
    floor = lfilter([0.05], [1.0, -0.95], rng.normal(size=n))
    pad /= _rms(pad) + 1e-12
    perc /= _rms(perc) + 1e-12
    floor /= _rms(floor) + 1e-12
    x = pad + 0.5 * perc + 0.05 * floor
    x *= INSTRUMENTAL_RMS / _rms(x)
    return sg.AudioBuffer(x, SR)


def synth_song(recipe: SongRecipe, profiles) -> Song:
    """Mix a vocal stem (silent outside vocal sections) over the accompaniment at a seeded SNR."""
    recipe.validate()
    rng = _rng(recipe.seed, 3)
    bounds = np.round(np.cumsum([0.0] + [d for d, _ in recipe.sections]) * SR / sg.HOP).astype(int) * sg.HOP
    n = int(bounds[-1])
    vocal = np.zeros(n)
    mask = np.zeros(n, dtype=bool)
    fade = int(0.01 * SR)
    for i, (_, kind) in enumerate(recipe.sections):
        a, b = int(bounds[i]), int(bounds[i + 1])
        if kind != "vocal":
            continue
        v = synth_vocal(profiles[recipe.singer], (b - a) / SR, recipe.seed * 31 + i).samples
        ramp = np.ones(b - a)
        ramp[:fade] = np.linspace(0, 1, fade)
        ramp[-fade:] = np.linspace(1, 0, fade)
        vocal[a:b] = v * ramp
        mask[a:b] = True
    instr = synth_instrumental(n / SR, recipe.seed, recipe.tempo).samples
    snr_db = float(rng.uniform(0.0, 10.0))
    gain = 10 ** (snr_db / 20) * _rms(instr[mask]) / (_rms(vocal[mask]) + 1e-12)
    vocal *= gain
    mixture = vocal + instr
    peak = np.max(np.abs(mixture))
    if peak > 0.95:
        vocal *= 0.95 / peak
        instr = instr * (0.95 / peak)
        mixture = vocal + instr
    segs = [Segment(float(bounds[i] / SR), float(bounds[i + 1] / SR), "vocal" if k == "vocal" else "non_vocal")
            for i, (_, k) in enumerate(recipe.sections)]
    merged = []
    for s in segs:
        if merged and merged[-1].label == s.label:
            merged[-1] = Segment(merged[-1].start, s.end, s.label)
        else:
            merged.append(s)
    return Song(sg.AudioBuffer(mixture, SR), sg.AudioBuffer(vocal, SR), sg.AudioBuffer(instr, SR),
                SegmentTimeline(merged).validate(), snr_db)


def random_recipe(singer, duration_s, seed):
    """Intro, verse, bridge, verse and an optional outro on the 10 ms grid."""
    rng = _rng(seed, 4)
    q = lambda x: round(x * 100) / 100
    intro = q(rng.uniform(0.8, 2.0))
    verse = q(rng.uniform(2.5, 3.5))
    bridge = q(rng.uniform(0.6, 1.4))
    outro = q(rng.uniform(0.5, 1.2)) if rng.random() < 0.5 else 0.0
    verse2 = q(duration_s - intro - verse - bridge - outro)
    sections = [(intro, "instrumental"), (verse, "vocal"), (bridge, "instrumental"), (verse2, "vocal")]
    if outro:
        sections.append((outro, "instrumental"))
    return SongRecipe(sections, singer, float(rng.uniform(80, 140)), int(seed)).validate()


def make_profiles(num_singers, seed):
    """Singers with mean f0 at least 30 Hz apart and distinct formant/vibrato settings."""
    if num_singers < 2:
        raise ValueError("need at least two singers")
    rng = _rng(seed, 5)
    step = max(30.0, (560.0 - 110.0) / (num_singers - 1))
    centres = 110.0 + step * np.arange(num_singers)
    if centres[-1] * 1.12 > 1000:
        raise ValueError(f"{num_singers} singers do not fit the 80-1000 Hz pitch band")
    out = []
    for i, c in enumerate(rng.permutation(centres)):
        f1 = rng.uniform(450, 850)
        f2 = rng.uniform(1100, 2100)
        f3 = rng.uniform(2400, 3300)
        out.append(SingerProfile(
            name=f"singer_{i:02d}",
            f0_range=(round(float(c / 1.12), 2), round(float(c * 1.12), 2)),
            vibrato_rate=round(float(rng.uniform(4.5, 6.5)), 3),
            vibrato_depth=round(float(rng.uniform(30, 90)), 2),
            formant_centers=(round(float(f1), 1), round(float(f2), 1), round(float(f3), 1)),
            breathiness=round(float(rng.uniform(0.05, 0.3)), 3),
        ))
    return out


def build_dataset(num_singers, clips_per_singer, out_dir, seed, clip_seconds=10.0, test_fraction=0.2):
    """Write WAVs and the segmentation / separation / classification manifests.

    Returns a dict of manifest paths.  Manifest paths to audio are relative to
    ``out_dir`` so the tree can be moved.
    """
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    profiles = make_profiles(num_singers, seed)
    n_test = int(round(clips_per_singer * test_fraction))
    seg_lines, sep_lines, cls_lines = [], [], []
    for si, prof in enumerate(profiles):
        test_ids = set(_rng(seed, 6, si).permutation(clips_per_singer)[:n_test].tolist())
        for ci in range(clips_per_singer):
            clip_seed = int(_rng(seed, 7, si, ci).integers(0, 2**31 - 1))
            song = synth_song(random_recipe(si, clip_seconds, clip_seed), profiles)
            cid = f"{prof.name}_{ci:03d}"
            mix_rel = f"audio/{cid}_mix.wav"
            voc_rel = f"audio/{cid}_vocal.wav"
            sg.write_wav(out_dir / mix_rel, song.mixture)
            sg.write_wav(out_dir / voc_rel, song.vocal)
            split = "test" if ci in test_ids else "train"
            seg_lines.append({"id": cid, "path": mix_rel, "split": split, **song.timeline.to_json()})
            sep_lines.append({"id": cid, "mixture": mix_rel, "vocal": voc_rel, "split": split})
            cls_lines.append({"id": cid, "path": mix_rel, "singer": prof.name, "split": split})
        log.info("synthesised %d clips for %s", clips_per_singer, prof.name)
    paths = {
        "segmentation": out_dir / "segmentation.jsonl",
        "separation": out_dir / "separation.jsonl",
        "classification": out_dir / "classification.jsonl",
    }
    for key, lines in (("segmentation", seg_lines), ("separation", sep_lines), ("classification", cls_lines)):
        paths[key].write_text("".join(json.dumps(x, sort_keys=True) + "\n" for x in lines), encoding="utf-8")
    meta = {
        "seed": seed,
        "sample_rate": SR,
        "clip_seconds": clip_seconds,
        "num_singers": num_singers,
        "clips_per_singer": clips_per_singer,
        "counts": {p.name: clips_per_singer for p in profiles},
        "profiles": [asdict(p) for p in profiles],
    }
    paths["dataset"] = out_dir / "dataset.json"
    paths["dataset"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def read_manifest(path, split=None):
    """Parse a JSON-lines manifest, resolving relative audio paths against its directory."""
    path = Path(path)
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        for key in ("path", "mixture", "vocal"):
            if key in row and not Path(row[key]).is_absolute():
                row[key] = str(path.parent / row[key])
        rows.append(row)
    if split is not None and any("split" in r for r in rows):
        rows = [r for r in rows if r.get("split") == split]
    return rows
