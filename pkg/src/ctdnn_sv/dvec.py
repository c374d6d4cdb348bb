"""Utterance-level d-vectors by averaging frame-level speaker features."""
import os
from dataclasses import dataclass

import numpy as np

from . import binio
from .ctdnn import forward_features
from .errors import EnrollmentError, FormatError, LengthError, TooShortError

DVEC_MAGIC = b"DVEC"


@dataclass
class DVector:
    values: np.ndarray
    utterance_id: str = ""
    speaker_id: str = ""
    num_frames_averaged: int = 1

    @property
    def dim(self):
        return self.values.shape[0]


def extract_dvector(model, fbank, utterance_id="", speaker_id=""):
    feats = forward_features(model, fbank)
    values = feats.astype(np.float64).mean(axis=0)
    return DVector(values, utterance_id, speaker_id, len(feats))


def enroll_speaker(model, utterances, speaker_id=""):
    """Unweighted mean of per-utterance d-vectors; too-short utterances are skipped."""
    vecs = []
    for f in utterances:
        try:
            vecs.append(extract_dvector(model, f))
        except TooShortError:
            continue
    if not vecs:
        raise EnrollmentError(f"no usable enrollment utterance for speaker {speaker_id!r}")
    return pool_dvectors(vecs, speaker_id)


def pool_dvectors(vecs, speaker_id=""):
    values = np.mean([v.values for v in vecs], axis=0)
    return DVector(values, speaker_id, speaker_id, sum(v.num_frames_averaged for v in vecs))


def truncate_frames(fbank, n_frames):
    """First ``n_frames`` rows of a feature matrix."""
    if n_frames > len(fbank):
        raise LengthError(f"cannot take {n_frames} frames from a {len(fbank)}-frame utterance")
    return fbank[:n_frames]


# -- archive ---------------------------------------------------------------

def dump_dvectors(vectors):
    vectors = list(vectors)
    dim = vectors[0].dim if vectors else 0
    w = binio.Writer()
    w.magic(DVEC_MAGIC)
    w.u32(1)
    w.u32(len(vectors))
    w.u32(dim)
    for v in vectors:
        if v.dim != dim:
            raise FormatError(f"vector {v.utterance_id!r} has dim {v.dim}, archive dim {dim}")
        w.text(v.utterance_id)
        w.text(v.speaker_id or "")
        w.u32(v.num_frames_averaged)
        w.f32(v.values)
    return w.getvalue()


def load_dvectors(data, what="vector archive"):
    r = binio.Reader(data, what)
    r.magic(DVEC_MAGIC)
    r.version()
    count, dim = r.u32(), r.u32()
    out = []
    for _ in range(count):
        utt = r.text()
        spk = r.text()
        frames = r.u32()
        out.append(DVector(r.f32(dim).astype(np.float64), utt, spk, frames))
    r.expect_end()
    return out


def write_dvectors(path, vectors):
    binio.write_bytes(path, dump_dvectors(vectors))


def read_dvectors(path):
    return load_dvectors(binio.read_bytes(path), what=os.fspath(path))
