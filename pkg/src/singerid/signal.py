"""Audio I/O and the deterministic DSP front end.

Everything here is a pure function of its inputs.  The pipeline runs at
16 kHz mono with a 512-point Hann STFT and a 160-sample (10 ms) hop, so one
spectrogram frame, one MFCC frame and one segmentation decision all share the
same time grid.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct, irfft, rfft

SAMPLE_RATE = 16000
FFT_SIZE = 512
HOP = 160
LOG_FLOOR = 1e-10


class WavError(ValueError):
    """Base class for WAV ingestion failures."""


class UnsupportedCodecError(WavError):
    pass


class TruncatedFileError(WavError):
    pass


class EmptyAudioError(WavError):
    pass


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("AudioBuffer holds mono samples only")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.isfinite(self.samples).all():
            raise ValueError("AudioBuffer samples must be finite")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = FFT_SIZE
    hop: int = HOP
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.fft_size <= 0 or self.fft_size & (self.fft_size - 1):
            raise ValueError(f"fft_size must be a power of two, got {self.fft_size}")
        if not 0 < self.hop <= self.fft_size:
            raise ValueError(f"hop must be in (0, fft_size], got {self.hop}")

    @property
    def bins(self):
        return self.fft_size // 2 + 1

    @property
    def hop_seconds(self):
        return self.hop / self.sample_rate

    def window(self):
        # periodic Hann
        n = np.arange(self.fft_size)
        return 0.5 - 0.5 * np.cos(2 * np.pi * n / self.fft_size)


@dataclass
class ComplexSpectrogram:
    """Magnitude and phase, each (bins x frames); ``length`` is the source length in samples."""
    magnitude: np.ndarray
    phase: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    length: int = 0

    @property
    def frames(self):
        return self.magnitude.shape[1]

    def complex(self):
        return self.magnitude * np.exp(1j * self.phase)


@dataclass
class FeatureMatrix:
    data: np.ndarray
    hop_seconds: float = HOP / SAMPLE_RATE

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ValueError(f"FeatureMatrix needs shape (frames >= 1, dims), got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("FeatureMatrix entries must be finite")

    @property
    def frames(self):
        return self.data.shape[0]

    @property
    def dims(self):
        return self.data.shape[1]


# ---------------------------------------------------------------------------
# WAV

def read_wav(path) -> AudioBuffer:
    """Read PCM16 or float32 RIFF/WAVE, mixing stereo down to mono."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise UnsupportedCodecError(f"{path}: not a RIFF/WAVE file")
    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid, size = raw[pos:pos + 4], struct.unpack("<I", raw[pos + 4:pos + 8])[0]
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise TruncatedFileError(f"{path}: fmt chunk is {len(body)} bytes, need 16")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == 0xFFFE and len(body) >= 26:
                # WAVE_FORMAT_EXTENSIBLE: real codec is the first two bytes of the subformat GUID
                fmt = (struct.unpack("<H", body[24:26])[0],) + fmt[1:]
        elif cid == b"data":
            if len(body) < size:
                raise TruncatedFileError(f"{path}: data chunk declares {size} bytes, file holds {len(body)}")
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise TruncatedFileError(f"{path}: no fmt chunk")
    if data is None:
        raise TruncatedFileError(f"{path}: no data chunk")
    codec, channels, rate, _, _, bits = fmt
    if channels not in (1, 2):
        raise UnsupportedCodecError(f"{path}: {channels} channels (only mono/stereo supported)")
    if codec == 1 and bits == 16:
        dtype, scale = "<i2", 1.0 / 32768.0
    elif codec == 3 and bits == 32:
        dtype, scale = "<f4", 1.0
    else:
        raise UnsupportedCodecError(f"{path}: codec {codec} with {bits}-bit samples is not supported")
    frame_bytes = channels * bits // 8
    n = len(data) // frame_bytes
    if n == 0:
        raise EmptyAudioError(f"{path}: zero-length audio")
    x = np.frombuffer(data[:n * frame_bytes], dtype=dtype).astype(np.float64) * scale
    x = x.reshape(n, channels).mean(axis=1)
    x = np.nan_to_num(x, nan=0.0, posinf=1.0, neginf=-1.0)
    return AudioBuffer(np.clip(x, -1.0, 1.0), rate)


def write_wav(path, audio: AudioBuffer):
    """Write mono PCM16."""
    q = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.sample_rate)
        w.writeframes(q.tobytes())


def load_audio(path, sample_rate=SAMPLE_RATE) -> AudioBuffer:
    return resample(read_wav(path), sample_rate)


# ---------------------------------------------------------------------------
# resampling / chopping

def resample(a: AudioBuffer, target_rate: int, taps: int = 64, beta: float = 8.0) -> AudioBuffer:
    """Band-limited resampling with a Kaiser-windowed sinc kernel.

    Output sample n sits at input time n * source / target; its value is a
    ``taps``-point weighted sum of the nearest input samples.  The cutoff is
    the lower of the two Nyquist rates and each kernel row is normalised to
    unit sum so DC passes unchanged.
    """
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == a.sample_rate:
        return AudioBuffer(a.samples.copy(), a.sample_rate)
    ratio = target_rate / a.sample_rate
    n_out = int(round(len(a) * ratio))
    cutoff = min(1.0, ratio)
    x = a.samples
    half = taps // 2
    out = np.empty(n_out)
    for start in range(0, n_out, 8192):
        t = np.arange(start, min(start + 8192, n_out)) / ratio
        base = np.floor(t).astype(np.int64)
        idx = base[:, None] + np.arange(-half + 1, half + 1)[None, :]
        offset = t[:, None] - idx
        kernel = cutoff * np.sinc(cutoff * offset)
        kernel *= np.i0(beta * np.sqrt(np.clip(1.0 - (offset / half) ** 2, 0.0, None))) / np.i0(beta)
        kernel /= kernel.sum(axis=1, keepdims=True)
        valid = (idx >= 0) & (idx < len(x))
        vals = np.where(valid, x[np.clip(idx, 0, len(x) - 1)], 0.0)
        out[start:start + len(t)] = np.sum(kernel * vals, axis=1)
    return AudioBuffer(np.clip(out, -1.0, 1.0), target_rate)


def chop(a: AudioBuffer, snippet_seconds: float) -> list[AudioBuffer]:
    """Cut into consecutive snippets; a tail of at least half a snippet is zero-padded, shorter tails dropped."""
    if snippet_seconds <= 0:
        raise ValueError("snippet_seconds must be positive")
    n = int(round(snippet_seconds * a.sample_rate))
    out = []
    for start in range(0, len(a), n):
        piece = a.samples[start:start + n]
        if len(piece) < n:
            if 2 * len(piece) < n:
                break
            piece = np.concatenate([piece, np.zeros(n - len(piece))])
        out.append(AudioBuffer(piece.copy(), a.sample_rate))
    return out


# ---------------------------------------------------------------------------
# STFT

def frame_count(n_samples, hop):
    return -(-n_samples // hop)


def _frames(x, cfg: StftConfig):
    half = cfg.fft_size // 2
    mode = "reflect" if len(x) > 1 else "constant"
    xp = np.pad(x, (half, half), mode=mode)
    F = frame_count(len(x), cfg.hop)
    idx = np.arange(F)[:, None] * cfg.hop + np.arange(cfg.fft_size)[None, :]
    return xp[idx]


def stft(a: AudioBuffer, cfg: StftConfig = StftConfig()) -> ComplexSpectrogram:
    """Centre-aligned Hann STFT with ceil(len / hop) frames."""
    if len(a) < 1:
        raise ValueError("stft needs at least one sample")
    spec = rfft(_frames(a.samples, cfg) * cfg.window(), axis=1).T
    return ComplexSpectrogram(np.abs(spec), np.angle(spec), cfg, len(a))


def istft(s: ComplexSpectrogram) -> AudioBuffer:
    """Weighted overlap-add inverse normalised by the summed squared window."""
    cfg = s.config
    w = cfg.window()
    frames = irfft(s.complex().T, n=cfg.fft_size, axis=1) * w
    F = frames.shape[0]
    total_len = (F - 1) * cfg.hop + cfg.fft_size
    y = np.zeros(total_len)
    env = np.zeros(total_len)
    for t in range(F):
        sl = slice(t * cfg.hop, t * cfg.hop + cfg.fft_size)
        y[sl] += frames[t]
        env[sl] += w * w
    env[env < 1e-8] = 1.0
    y /= env
    half = cfg.fft_size // 2
    length = s.length if s.length else (F - 1) * cfg.hop + 1
    out = y[half:half + length]
    if len(out) < length:
        out = np.concatenate([out, np.zeros(length - len(out))])
    return AudioBuffer(out, cfg.sample_rate)


def log1p_compress(m):
    m = np.asarray(m, dtype=np.float64)
    bad = np.argwhere(m < 0)
    if len(bad):
        raise ValueError(f"log1p_compress: negative input at index {tuple(int(i) for i in bad[0])}")
    return np.log1p(m)


def expm1_expand(m):
    return np.maximum(np.expm1(np.asarray(m, dtype=np.float64)), 0.0)


# ---------------------------------------------------------------------------
# mel / MFCC

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(num_filters=26, cfg: StftConfig = StftConfig(), f_lo=0.0, f_hi=None):
    """Unit-height triangular filters on the HTK mel scale, shape (num_filters, bins)."""
    f_hi = cfg.sample_rate / 2 if f_hi is None else f_hi
    if not 0 <= f_lo < f_hi <= cfg.sample_rate / 2:
        raise ValueError(f"need 0 <= f_lo < f_hi <= {cfg.sample_rate / 2}, got {f_lo}, {f_hi}")
    edges = mel_to_hz(np.linspace(hz_to_mel(f_lo), hz_to_mel(f_hi), num_filters + 2))
    freqs = np.arange(cfg.bins) * cfg.sample_rate / cfg.fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    narrow = np.flatnonzero((fb > 0).sum(axis=1) < 2)
    if len(narrow):
        raise ValueError(f"{num_filters} mel filters too many for {cfg.bins} bins: "
                         f"filter {narrow[0]} spans fewer than 2 bins")
    return fb


def log_mel(s: ComplexSpectrogram | np.ndarray, num_filters=26, cfg: StftConfig = StftConfig()):
    """Log mel energies (frames x num_filters) from a magnitude spectrogram."""
    mag = s.magnitude if isinstance(s, ComplexSpectrogram) else np.asarray(s)
    if isinstance(s, ComplexSpectrogram):
        cfg = s.config
    energies = (mag ** 2).T @ mel_filterbank(num_filters, cfg).T
    return np.log(np.maximum(energies, LOG_FLOOR))


def mfcc(s, num_filters=26, num_coeffs=13, cfg: StftConfig = StftConfig()) -> FeatureMatrix:
    """Orthonormal DCT-II of log mel energies, coefficients 0..num_coeffs-1."""
    if isinstance(s, ComplexSpectrogram):
        cfg = s.config
    logmel = log_mel(s, num_filters, cfg)
    coeffs = dct(logmel, type=2, norm="ortho", axis=1)[:, :num_coeffs]
    return FeatureMatrix(coeffs, cfg.hop_seconds)


def _delta(c, N=2):
    T = c.shape[0]
    padded = np.concatenate([np.repeat(c[:1], N, axis=0), c, np.repeat(c[-1:], N, axis=0)])
    denom = 2 * sum(n * n for n in range(1, N + 1))
    d = np.zeros_like(c)
    for n in range(1, N + 1):
        d += n * (padded[N + n:N + n + T] - padded[N - n:N - n + T])
    return d / denom


def add_deltas(f: FeatureMatrix) -> FeatureMatrix:
    """Append regression deltas and accelerations: [static | delta | accel]."""
    d = _delta(f.data)
    return FeatureMatrix(np.hstack([f.data, d, _delta(d)]), f.hop_seconds)
