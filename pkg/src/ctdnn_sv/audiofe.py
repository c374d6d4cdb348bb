"""Audio front-end: WAV I/O, log-Mel filterbank features, splicing.

Features are plain ``(T, D)`` float32 arrays at a 10 ms frame shift.
"""
import logging
import os
import wave
from dataclasses import asdict, dataclass

import numpy as np
from scipy.fft import dct

from . import binio
from .errors import (EmptyDataError, EmptyFeatureError, MalformedWavError, ConfigError,
                     UnsupportedEncodingError)

log = logging.getLogger(__name__)

SUPPORTED_RATES = (8000, 16000)
FEAT_MAGIC = b"FEAT"


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray  # int16
    sample_rate_hz: int

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class FbankConfig:
    num_mel_bins: int = 40
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    preemphasis: float = 0.97
    low_freq_hz: float = 20.0
    high_freq_hz: float | None = None  # None -> nyquist - 40
    log_floor: float = 1e-10
    cmn: bool = True

    def high_for(self, sample_rate):
        return sample_rate / 2 - 40 if self.high_freq_hz is None else self.high_freq_hz

    def validate(self, sample_rate):
        hi = self.high_for(sample_rate)
        if not 0 < self.low_freq_hz < hi <= sample_rate / 2:
            raise ConfigError(f"need 0 < low_freq_hz < high_freq_hz <= {sample_rate / 2}, "
                              f"got {self.low_freq_hz}, {hi}")
        if self.num_mel_bins < 1:
            raise ConfigError("num_mel_bins must be positive")
        if self.frame_shift_ms <= 0 or self.frame_length_ms <= 0:
            raise ConfigError("frame length and shift must be positive")

    def to_dict(self):
        return asdict(self)


# -- WAV -------------------------------------------------------------------

def read_wav(path):
    """Read a mono 16-bit PCM RIFF/WAVE file without resampling."""
    try:
        with wave.open(os.fspath(path), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            n = w.getnframes()
            raw = w.readframes(n)
    except wave.Error as e:
        msg = str(e)
        if "unknown format" in msg:
            raise UnsupportedEncodingError(f"{path}: {msg}") from e
        raise MalformedWavError(f"{path}: {msg}") from e
    except EOFError as e:
        raise MalformedWavError(f"{path}: truncated header") from e
    if channels != 1:
        raise UnsupportedEncodingError(f"{path}: {channels} channels, expected mono")
    if width != 2:
        raise UnsupportedEncodingError(f"{path}: {8 * width}-bit samples, expected 16-bit")
    if rate not in SUPPORTED_RATES:
        raise UnsupportedEncodingError(f"{path}: sample rate {rate} not in {SUPPORTED_RATES}")
    if len(raw) < 2:
        raise EmptyDataError(f"{path}: empty data chunk")
    samples = np.frombuffer(raw[:len(raw) // 2 * 2], dtype="<i2").astype(np.int16)
    return Waveform(samples, rate)


def write_wav(path, w):
    samples = np.asarray(w.samples)
    if samples.dtype != np.int16:
        raise UnsupportedEncodingError("write_wav expects int16 samples")
    with wave.open(os.fspath(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate_hz)
        f.writeframes(samples.astype("<i2").tobytes())


# -- Fbank -----------------------------------------------------------------

def mel(f):
    return 1127.0 * np.log(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def inv_mel(m):
    return 700.0 * (np.exp(np.asarray(m, dtype=np.float64) / 1127.0) - 1.0)


def mel_bin_centers(num_bins, low_hz, high_hz):
    """Center frequencies (Hz) of triangular filters equally spaced in Mel."""
    edges = np.linspace(mel(low_hz), mel(high_hz), num_bins + 2)
    return inv_mel(edges[1:-1])


def mel_filterbank(num_bins, n_fft, sample_rate, low_hz, high_hz):
    """(num_bins, n_fft//2 + 1) triangular weights, triangles defined on the Mel axis."""
    edges = np.linspace(mel(low_hz), mel(high_hz), num_bins + 2)
    fft_mel = mel(np.arange(n_fft // 2 + 1) * sample_rate / n_fft)
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (fft_mel - left) / (center - left)
    down = (right - fft_mel) / (right - center)
    return np.maximum(0.0, np.minimum(up, down))


def frame_params(cfg, sample_rate):
    length = int(round(cfg.frame_length_ms * sample_rate / 1000))
    shift = int(round(cfg.frame_shift_ms * sample_rate / 1000))
    return length, shift


def num_frames(num_samples, frame_length, frame_shift):
    if num_samples < frame_length:
        return 0
    return 1 + (num_samples - frame_length) // frame_shift


def frame_signal(x, frame_length, frame_shift):
    t = num_frames(len(x), frame_length, frame_shift)
    idx = np.arange(frame_length)[None, :] + frame_shift * np.arange(t)[:, None]
    return x[idx]


def _next_pow2(n):
    return 1 << (n - 1).bit_length()


def _frames(w, cfg):
    cfg.validate(w.sample_rate_hz)
    length, shift = frame_params(cfg, w.sample_rate_hz)
    x = np.asarray(w.samples, dtype=np.float64)
    if num_frames(len(x), length, shift) == 0:
        raise EmptyFeatureError(f"{len(x)} samples is shorter than one {length}-sample frame")
    if cfg.preemphasis:
        x = np.concatenate([x[:1], x[1:] - cfg.preemphasis * x[:-1]])
    return frame_signal(x, length, shift), length


def compute_fbank(w, cfg=FbankConfig()):
    """Log-Mel filterbank energies, (T, num_mel_bins) float32."""
    frames, length = _frames(w, cfg)
    n_fft = _next_pow2(length)
    spec = np.abs(np.fft.rfft(frames * np.hamming(length), n=n_fft))
    fb = mel_filterbank(cfg.num_mel_bins, n_fft, w.sample_rate_hz, cfg.low_freq_hz,
                        cfg.high_for(w.sample_rate_hz))
    feats = np.log(np.maximum(spec @ fb.T, cfg.log_floor))
    if cfg.cmn:
        feats -= feats.mean(axis=0)
    return feats.astype(np.float32)


def deltas(feats, window=2):
    """Regression deltas over +-window frames with edge replication."""
    t = len(feats)
    denom = 2 * sum(k * k for k in range(1, window + 1))
    padded = np.concatenate([np.repeat(feats[:1], window, 0), feats,
                             np.repeat(feats[-1:], window, 0)])
    out = np.zeros_like(feats, dtype=np.float64)
    for k in range(1, window + 1):
        out += k * (padded[window + k:window + k + t] - padded[window - k:window - k + t])
    return out / denom


def compute_mfcc(w, cfg=FbankConfig(cmn=False), num_ceps=19):
    """MFCC export: num_ceps cepstra + log energy, with deltas and double deltas.

    Not used by the d-vector pipeline; provided for external i-vector tooling.
    """
    frames, length = _frames(w, cfg)
    log_energy = np.log(np.maximum(np.sum(frames ** 2, axis=1), cfg.log_floor))
    n_fft = _next_pow2(length)
    spec = np.abs(np.fft.rfft(frames * np.hamming(length), n=n_fft)) ** 2
    fb = mel_filterbank(cfg.num_mel_bins, n_fft, w.sample_rate_hz, cfg.low_freq_hz,
                        cfg.high_for(w.sample_rate_hz))
    logmel = np.log(np.maximum(spec @ fb.T, cfg.log_floor))
    ceps = dct(logmel, type=2, norm="ortho", axis=1)[:, 1:num_ceps + 1]
    base = np.hstack([ceps, log_energy[:, None]])
    d1 = deltas(base)
    return np.hstack([base, d1, deltas(d1)]).astype(np.float32)


def splice_frames(f, left=4, right=4):
    """Concatenate each frame with its neighbours; edges are replicated."""
    f = np.asarray(f)
    if f.ndim != 2 or f.shape[0] == 0:
        raise EmptyFeatureError("cannot splice an empty feature matrix")
    if left < 0 or right < 0:
        raise ConfigError("splice context must be non-negative")
    t = f.shape[0]
    idx = np.clip(np.arange(t)[:, None] + np.arange(-left, right + 1)[None, :], 0, t - 1)
    return f[idx].reshape(t, -1)


# -- feature archive -------------------------------------------------------

def dump_features(mat):
    mat = np.asarray(mat)
    if mat.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    w = binio.Writer()
    w.magic(FEAT_MAGIC)
    w.u32(1)
    w.u32(mat.shape[0])
    w.u32(mat.shape[1])
    w.f32(mat)
    return w.getvalue()


def load_features(data, what="feature file"):
    r = binio.Reader(data, what)
    r.magic(FEAT_MAGIC)
    r.version()
    rows, cols = r.u32(), r.u32()
    mat = r.f32(rows * cols).reshape(rows, cols)
    r.expect_end()
    return mat


def write_features(path, mat):
    binio.write_bytes(path, dump_features(mat))


def read_features(path):
    return load_features(binio.read_bytes(path), what=os.fspath(path))


def write_feature_manifest(path, entries):
    """``entries``: iterable of (utt_id, speaker_id, feature_path)."""
    with open(path, "w", encoding="utf-8") as f:
        for utt, spk, p in entries:
            f.write(f"{utt} {spk} {p}\n")


def read_feature_manifest(path):
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if parts:
                out.append((parts[0], parts[1], parts[2]))
    return out
