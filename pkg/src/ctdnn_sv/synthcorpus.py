"""Deterministic harmonic-plus-formant synthetic speaker corpus.

Each speaker has a fixed voice (f0, three formant centers, spectral tilt);
each utterance draws its own pitch drift, amplitude modulation and a
random formant-target trajectory standing in for linguistic content.
All randomness derives from (seed, speaker, utterance), so the corpus is
bitwise reproducible and independent of generation order.
"""
import os
from dataclasses import dataclass

import numpy as np

from .audiofe import Waveform, write_wav
from .errors import ConfigError, PreconditionError

CONTROL_HOP = 80  # samples between envelope control points (5 ms at 16 kHz)


@dataclass(frozen=True)
class SynthSpec:
    num_speakers: int = 40
    utts_per_speaker: int = 20
    utt_seconds: float = 3.0
    utt_jitter: float = 0.0  # +- fraction of utt_seconds
    sample_rate: int = 16000
    seed: int = 0
    snr_db: float = 20.0
    f0_drift: float = 0.05
    content_depth: float = 0.25  # relative formant excursion per phone target

    def validate(self):
        if self.num_speakers < 2:
            raise ConfigError("num_speakers must be >= 2")
        if self.utt_seconds * (1 - self.utt_jitter) < 0.5:
            raise ConfigError("utterances must be at least 0.5 s long")
        if self.utts_per_speaker < 1:
            raise ConfigError("utts_per_speaker must be >= 1")
        return self


@dataclass(frozen=True)
class SpeakerVoice:
    f0: float
    formants: tuple
    bandwidths: tuple
    gains: tuple
    tilt_db_per_octave: float
    drift_rate_hz: float

    @classmethod
    def draw(cls, seed, speaker):
        rng = np.random.default_rng([seed, speaker, 0xF0])
        f0 = float(np.exp(rng.uniform(np.log(80.0), np.log(300.0))))
        f1 = rng.uniform(300.0, 900.0)
        f2 = rng.uniform(max(f1 + 300.0, 900.0), 2400.0)
        f3 = rng.uniform(max(f2 + 300.0, 2300.0), 3600.0)
        bw = rng.uniform([60.0, 80.0, 100.0], [140.0, 200.0, 260.0])
        gains = rng.uniform([0.8, 0.4, 0.2], [1.0, 0.9, 0.6])
        return cls(f0=f0, formants=(float(f1), float(f2), float(f3)),
                   bandwidths=tuple(float(b) for b in bw), gains=tuple(float(g) for g in gains),
                   tilt_db_per_octave=float(rng.uniform(-12.0, -3.0)),
                   drift_rate_hz=float(rng.uniform(0.5, 2.0)))


def speaker_id(i):
    return f"spk{i:04d}"


def utt_id(i, j):
    return f"{speaker_id(i)}-utt{j:03d}"


def _smooth_curve(rng, n_ctrl, step):
    """Piecewise-linear random curve in [-1, 1] with knots every ``step`` points."""
    knots = rng.uniform(-1, 1, size=n_ctrl // step + 2)
    return np.interp(np.arange(n_ctrl), np.arange(len(knots)) * step, knots)


def _formant_track(rng, voice, n_ctrl, sr, depth):
    """(3, n_ctrl) formant frequencies: phone targets of 80-200 ms, linear glides."""
    hop_s = CONTROL_HOP / sr
    times, targets = [0.0], []
    while times[-1] < n_ctrl * hop_s:
        times.append(times[-1] + rng.uniform(0.08, 0.2))
    base = np.array(voice.formants)
    for _ in times:
        t = base * (1 + depth * rng.uniform(-1, 1, size=3))
        t[1] = max(t[1], t[0] + 150.0)
        t[2] = max(t[2], t[1] + 150.0)
        targets.append(t)
    targets = np.array(targets)
    ct = np.arange(n_ctrl) * hop_s
    return np.stack([np.interp(ct, times, targets[:, i]) for i in range(3)])


def synthesize_utterance(voice, spec, speaker, utt):
    """One utterance as int16 samples."""
    rng = np.random.default_rng([spec.seed, speaker, utt + 1])
    sr = spec.sample_rate
    dur = spec.utt_seconds * (1 + spec.utt_jitter * rng.uniform(-1, 1))
    n = int(round(dur * sr))
    n_ctrl = n // CONTROL_HOP + 2

    knots_per_s = voice.drift_rate_hz
    step = max(1, int(round(sr / CONTROL_HOP / knots_per_s)))
    f0_ctrl = voice.f0 * (1 + spec.f0_drift * _smooth_curve(rng, n_ctrl, step))
    formants = _formant_track(rng, voice, n_ctrl, sr, spec.content_depth)

    n_harm = int((sr / 2 - 200) // (voice.f0 * (1 + spec.f0_drift)))
    k = np.arange(1, n_harm + 1)[:, None]
    freqs = k * f0_ctrl[None, :]  # (K, n_ctrl)
    env = np.zeros_like(freqs)
    for fc, bw, g in zip(formants, voice.bandwidths, voice.gains):
        env += g / (1 + ((freqs - fc[None, :]) / bw) ** 2)
    env *= (freqs / 100.0) ** (voice.tilt_db_per_octave / 6.0206)

    # upsample control tracks to the sample rate
    pos = np.arange(n) / CONTROL_HOP
    i0 = pos.astype(np.int64)
    frac = pos - i0
    f0 = f0_ctrl[i0] * (1 - frac) + f0_ctrl[i0 + 1] * frac
    phase = 2 * np.pi * np.cumsum(f0) / sr
    offsets = rng.uniform(0, 2 * np.pi, size=n_harm)
    sig = np.zeros(n)
    for h in range(n_harm):
        amp = env[h, i0] * (1 - frac) + env[h, i0 + 1] * frac
        sig += amp * np.sin((h + 1) * phase + offsets[h])

    am_rate = rng.uniform(3.0, 6.0)
    am = 0.65 + 0.35 * np.sin(2 * np.pi * am_rate * np.arange(n) / sr + rng.uniform(0, 2 * np.pi))
    sig *= am
    p_sig = np.mean(sig ** 2)
    sig += rng.standard_normal(n) * np.sqrt(p_sig / 10 ** (spec.snr_db / 10))
    sig *= 0.5 * 32767 / np.max(np.abs(sig))
    return np.round(sig).astype(np.int16)


def generate_corpus(spec, out_dir):
    """Write WAVs and ``corpus.lst``; returns the manifest entries.

    Manifest lines are ``<utt-id> <speaker-id> <wav-path> <duration-s>`` with
    paths relative to ``out_dir``.
    """
    spec.validate()
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i in range(spec.num_speakers):
        voice = SpeakerVoice.draw(spec.seed, i)
        spk_dir = os.path.join(out_dir, "wav", speaker_id(i))
        os.makedirs(spk_dir, exist_ok=True)
        for j in range(spec.utts_per_speaker):
            samples = synthesize_utterance(voice, spec, i, j)
            rel = os.path.join("wav", speaker_id(i), f"{utt_id(i, j)}.wav")
            write_wav(os.path.join(out_dir, rel), Waveform(samples, spec.sample_rate))
            entries.append((utt_id(i, j), speaker_id(i), rel, len(samples) / spec.sample_rate))
    write_manifest(os.path.join(out_dir, "corpus.lst"), entries)
    return entries


def write_manifest(path, entries):
    with open(path, "w", encoding="utf-8") as f:
        for utt, spk, wav, dur in entries:
            f.write(f"{utt} {spk} {wav} {dur:.4f}\n")


def read_manifest(path):
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if parts:
                out.append((parts[0], parts[1], parts[2], float(parts[3])))
    return out


@dataclass
class EvalSplit:
    enroll: list
    test: list


def split_corpus(manifest, train_speakers, eval_speakers, seed=0, enroll_per_speaker=10):
    """Disjoint train/eval speakers; eval utterances split into enroll and test.

    Each eval speaker gets ``enroll_per_speaker`` enrollment utterances when it
    has at least one more than that; otherwise all but one.
    """
    by_spk = {}
    for e in manifest:
        by_spk.setdefault(e[1], []).append(e)
    speakers = sorted(by_spk)
    if train_speakers + eval_speakers > len(speakers):
        raise PreconditionError(f"need {train_speakers + eval_speakers} speakers, "
                                f"corpus has {len(speakers)}")
    rng = np.random.default_rng([seed, 0x5B])
    order = [speakers[i] for i in rng.permutation(len(speakers))]
    train_spk = sorted(order[:train_speakers])
    eval_spk = sorted(order[train_speakers:train_speakers + eval_speakers])
    train = [e for s in train_spk for e in by_spk[s]]
    enroll, test = [], []
    for s in eval_spk:
        utts = by_spk[s]
        perm = rng.permutation(len(utts))
        n_enroll = min(enroll_per_speaker, len(utts) - 1)
        enroll += sorted((utts[i] for i in perm[:n_enroll]), key=lambda e: e[0])
        test += sorted((utts[i] for i in perm[n_enroll:]), key=lambda e: e[0])
    return train, EvalSplit(enroll, test)
