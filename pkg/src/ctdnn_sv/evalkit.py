"""Trial lists, scoring, EER and DET points.

EER convention: thresholds are swept over all distinct scores (accept iff
score >= threshold, equal scores processed together); the EER is where the
false-accept and false-reject rates cross, linearly interpolated between
the two neighbouring operating points.
"""
import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import PreconditionError, TrialListError

EER_CONVENTION = ("accept iff score >= threshold; EER linearly interpolated between "
                  "adjacent operating points where FRR-FAR changes sign")


@dataclass
class Trial:
    enroll_id: str
    test_id: str
    is_target: bool
    score: float | None = None


@dataclass
class EerResult:
    eer: float
    threshold: float
    num_target: int
    num_nontarget: int

    def to_dict(self):
        return {"eer": self.eer, "threshold": self.threshold, "n_target": self.num_target,
                "n_nontarget": self.num_nontarget}


def make_trials(enroll, test):
    """Full cross product of enrollment speakers and test utterances.

    ``enroll``: iterable of speaker ids (one model per speaker).
    ``test``: iterable of (utt_id, speaker_id).
    """
    enroll = list(enroll)
    test = list(test)
    if not enroll or not test:
        raise PreconditionError("empty enrollment or test set")
    return [Trial(e, u, e == s) for e in enroll for u, s in test]


def score_trials(trials, enroll_vectors, test_vectors, backend):
    """Return new trials carrying ``backend.score`` of the resolved vectors, order kept."""
    out = []
    cache_e, cache_t = {}, {}
    for tr in trials:
        if tr.enroll_id not in enroll_vectors:
            raise TrialListError(f"unresolved enrollment id {tr.enroll_id!r}")
        if tr.test_id not in test_vectors:
            raise TrialListError(f"unresolved test id {tr.test_id!r}")
        if tr.enroll_id not in cache_e:
            cache_e[tr.enroll_id] = backend.prepare(enroll_vectors[tr.enroll_id])
        if tr.test_id not in cache_t:
            cache_t[tr.test_id] = backend.prepare(test_vectors[tr.test_id])
        out.append(tr)
    if not out:
        return []
    e = np.array([cache_e[t.enroll_id] for t in out])
    t = np.array([cache_t[t.test_id] for t in out])
    if backend.kind == "plda":
        scores = backend._scorer.score(e, t)
    else:
        en = np.linalg.norm(e, axis=1)
        tn = np.linalg.norm(t, axis=1)
        if np.any(en == 0) or np.any(tn == 0):
            from .errors import UndefinedScoreError
            raise UndefinedScoreError("cosine score of a zero vector")
        scores = np.clip(np.sum(e * t, axis=1) / (en * tn), -1.0, 1.0)
    return [Trial(tr.enroll_id, tr.test_id, tr.is_target, float(s))
            for tr, s in zip(out, scores)]


def _split_scores(trials):
    tar = np.array([t.score for t in trials if t.is_target], dtype=np.float64)
    non = np.array([t.score for t in trials if not t.is_target], dtype=np.float64)
    return tar, non


def operating_points(tar, non):
    """(thresholds, FA counts, FR counts) from +inf down to the lowest score."""
    tar = np.asarray(tar, dtype=np.float64)
    non = np.asarray(non, dtype=np.float64)
    if len(tar) == 0 or len(non) == 0:
        raise PreconditionError("EER needs at least one target and one nontarget score")
    scores = np.concatenate([tar, non])
    is_tar = np.concatenate([np.ones(len(tar), bool), np.zeros(len(non), bool)])
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    t = is_tar[order]
    # last index of each block of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    acc_tar = np.cumsum(t)[ends]
    acc_non = np.cumsum(~t)[ends]
    thresholds = np.r_[np.inf, s[ends]]
    fa = np.r_[0, acc_non]
    fr = np.r_[len(tar), len(tar) - acc_tar]
    return thresholds, fa, fr


def compute_eer(trials_or_tar, non=None):
    """EER from scored trials, or from separate target/nontarget score arrays."""
    if non is None:
        tar, non = _split_scores(trials_or_tar)
    else:
        tar = trials_or_tar
    thr, fa, fr = operating_points(tar, non)
    nt, nn = len(tar), len(non)
    # d = FRR - FAR on an exact rational scale: fr*nn - fa*nt
    d = fr * nn - fa * nt
    i = int(np.argmax(d <= 0))  # first point at or past the crossing; d[-1] <= 0 always
    if d[i] == 0:
        eer = Fraction(int(fa[i]), nn)
    else:
        # segment between point i-1 (d > 0) and i (d < 0)
        far_a, far_b = Fraction(int(fa[i - 1]), nn), Fraction(int(fa[i]), nn)
        frr_a, frr_b = Fraction(int(fr[i - 1]), nt), Fraction(int(fr[i]), nt)
        da, db = frr_a - far_a, frr_b - far_b
        alpha = da / (da - db)
        eer = far_a + alpha * (far_b - far_a)
    return EerResult(float(eer), float(thr[i]), nt, nn)


def det_points(trials_or_tar, non=None):
    """[(threshold, FAR, FRR)] for every distinct threshold, descending threshold."""
    if non is None:
        tar, non = _split_scores(trials_or_tar)
    else:
        tar = trials_or_tar
    thr, fa, fr = operating_points(tar, non)
    return [(float(t), a / len(non), r / len(tar)) for t, a, r in zip(thr, fa, fr)]


# -- I/O -------------------------------------------------------------------

def write_trials(path, trials):
    with open(path, "w", encoding="utf-8") as f:
        for t in trials:
            kind = "target" if t.is_target else "nontarget"
            tail = "" if t.score is None else f" {t.score!r}"
            f.write(f"{t.enroll_id} {t.test_id} {kind}{tail}\n")


def read_trials(path):
    out = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) not in (3, 4) or parts[2] not in ("target", "nontarget"):
                raise TrialListError(f"{path}:{n}: malformed trial line {line.strip()!r}")
            score = float(parts[3]) if len(parts) == 4 else None
            out.append(Trial(parts[0], parts[1], parts[2] == "target", score))
    return out


def write_eer_report(path, result):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(result.to_dict(), f, sort_keys=True, indent=1)
        f.write("\n")


def write_det_csv(path, points):
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# {EER_CONVENTION}\n")
        f.write("threshold,far,frr\n")
        for t, a, r in points:
            f.write(f"{t!r},{a!r},{r!r}\n")


def det_svg(points, width=320, height=320):
    """Minimal SVG line plot of FRR against FAR."""
    pts = " ".join(f"{a * width:.2f},{(1 - r) * height:.2f}" for _, a, r in points)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
            f'<rect width="{width}" height="{height}" fill="white" stroke="black"/>'
            f'<line x1="0" y1="{height}" x2="{width}" y2="0" stroke="#bbb"/>'
            f'<polyline fill="none" stroke="blue" points="{pts}"/></svg>\n')
