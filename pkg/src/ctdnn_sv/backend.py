"""Scoring back-ends for speaker vectors: cosine, LDA + cosine, two-covariance PLDA."""
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from . import binio
from .errors import (ConfigError, FormatError, NumericalError, PreconditionError,
                     UndefinedScoreError)

log = logging.getLogger(__name__)

BKND_MAGIC = b"BKND"
KIND_CODES = {"none": 0, "lda": 1, "plda": 2}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}


def cosine_score(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise UndefinedScoreError("cosine score of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def length_normalize(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def _group(vectors, labels):
    x = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    classes, inv = np.unique(labels, return_inverse=True)
    return x, classes, inv


# -- LDA -------------------------------------------------------------------

@dataclass
class LdaTransform:
    projection: np.ndarray  # (p, D)
    mean: np.ndarray  # (D,)
    num_classes: int = 0

    @property
    def dim(self):
        return self.projection.shape[0]


def scatter_matrices(x, inv, num_classes):
    """Within- and between-class scatter, both normalised by the sample count."""
    n, d = x.shape
    mean = x.mean(axis=0)
    counts = np.bincount(inv, minlength=num_classes).astype(np.float64)
    sums = np.zeros((num_classes, d))
    np.add.at(sums, inv, x)
    means = sums / counts[:, None]
    xc = x - means[inv]
    sw = xc.T @ xc / n
    mc = (means - mean) * np.sqrt(counts)[:, None]
    sb = mc.T @ mc / n
    return sw, sb, mean


def fit_lda(vectors, labels, p):
    """Top-p generalized eigenvectors of (S_b, S_w), unit S_w-norm, descending."""
    x, classes, inv = _group(vectors, labels)
    n, d = x.shape
    k = len(classes)
    if k < 2:
        raise PreconditionError("LDA needs at least 2 classes")
    if np.bincount(inv).max() < 2:
        raise PreconditionError("LDA needs a class with at least 2 samples")
    if not 1 <= p <= min(d, k - 1):
        raise ConfigError(f"LDA dimension {p} must be in [1, min(D={d}, classes-1={k - 1})]")
    sw, sb, mean = scatter_matrices(x, inv, k)
    sw = sw + 1e-6 * np.trace(sw) / d * np.eye(d)
    try:
        evals, evecs = linalg.eigh(sb, sw)
    except linalg.LinAlgError as e:
        raise NumericalError(f"within-class scatter is singular: {e}") from e
    order = np.argsort(evals)[::-1][:p]
    proj = evecs[:, order].T
    # sign convention: largest-magnitude entry of each row is positive
    flip = np.sign(proj[np.arange(p), np.argmax(np.abs(proj), axis=1)])
    return LdaTransform(proj * flip[:, None], mean, k)


def apply_lda(t, v):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != t.mean.shape[0]:
        raise ConfigError(f"vector dim {v.shape[-1]} != LDA input dim {t.mean.shape[0]}")
    return (v - t.mean) @ t.projection.T


# -- PLDA ------------------------------------------------------------------

@dataclass
class PldaModel:
    mean: np.ndarray
    between: np.ndarray
    within: np.ndarray
    loglik_history: list = field(default_factory=list)

    @property
    def dim(self):
        return self.mean.shape[0]


def _logdet_pd(a, what, iteration=None):
    try:
        c = linalg.cholesky(a, lower=True)
    except linalg.LinAlgError as e:
        raise NumericalError(f"{what} is not positive definite", iteration) from e
    return 2.0 * np.sum(np.log(np.diag(c))), c


def _class_stats(x, inv, k):
    counts = np.bincount(inv, minlength=k)
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, inv, x)
    means = sums / counts[:, None]
    xc = x - means[inv]
    scatters = np.empty((k, x.shape[1], x.shape[1]))
    for c in range(k):
        xs = xc[inv == c]
        scatters[c] = xs.T @ xs
    return counts, means, scatters


def plda_loglik(mean, between, within, counts, means, scatters, iteration=None):
    """Marginal log-likelihood of grouped data under the two-covariance model."""
    d = len(mean)
    total = 0.0
    ld_w, cw = _logdet_pd(within, "within-class covariance", iteration)
    w_inv = linalg.cho_solve((cw, True), np.eye(d))
    within_term = np.einsum("ij,kji->k", w_inv, scatters)
    for n in np.unique(counts):
        idx = np.flatnonzero(counts == n)
        ld_n, cn = _logdet_pd(within + n * between, "W + nB", iteration)
        dev = means[idx] - mean
        sol = linalg.cho_solve((cn, True), dev.T)
        quad = n * np.sum(dev.T * sol, axis=0)
        total += np.sum(-0.5 * (n * d * np.log(2 * np.pi) + (n - 1) * ld_w + ld_n
                                + within_term[idx] + quad))
    return float(total)


def fit_plda(vectors, labels, max_iter=20, tol=1e-6):
    """EM for y ~ N(mu, B), x | y ~ N(y, W). Requires >= 2 classes with >= 2 samples each."""
    x, classes, inv = _group(vectors, labels)
    k = len(classes)
    n_tot, d = x.shape
    counts, means, scatters = _class_stats(x, inv, k)
    if k < 2 or counts.min() < 2:
        raise PreconditionError("PLDA needs >= 2 classes, each with >= 2 samples")
    mu = x.mean(axis=0)
    within = scatters.sum(axis=0) / n_tot
    dm = means - mu
    between = dm.T @ dm / k
    history = [plda_loglik(mu, between, within, counts, means, scatters, 0)]
    for it in range(1, max_iter + 1):
        # E-step, written with B itself (not its inverse) so a rank-deficient B is fine
        ey = np.empty_like(means)
        cov_sum_b = np.zeros((d, d))
        w_acc = scatters.sum(axis=0)
        for n in np.unique(counts):
            idx = np.flatnonzero(counts == n)
            c_n = between + within / n
            try:
                gain = linalg.solve(c_n, between, assume_a="pos").T  # B C_n^-1
            except linalg.LinAlgError as e:
                raise NumericalError("B + W/n is singular", it) from e
            cov_y = between - gain @ between
            cov_y = 0.5 * (cov_y + cov_y.T)
            ey[idx] = mu + (means[idx] - mu) @ gain.T
            cov_sum_b += len(idx) * cov_y
            r = means[idx] - ey[idx]
            w_acc += n * (r.T @ r) + n * len(idx) * cov_y
        # M-step
        mu = ey.mean(axis=0)
        dm = ey - mu
        between = (cov_sum_b + dm.T @ dm) / k
        within = w_acc / n_tot
        between = 0.5 * (between + between.T)
        within = 0.5 * (within + within.T)
        history.append(plda_loglik(mu, between, within, counts, means, scatters, it))
        if abs(history[-1] - history[-2]) <= tol * abs(history[-2]):
            break
    return PldaModel(mu, between, within, history)


class PldaScorer:
    """Precomputed quadratic form for the same/different-speaker log-likelihood ratio."""

    def __init__(self, m):
        d = m.dim
        tot = m.between + m.within
        ld_tot, ct = _logdet_pd(tot, "total covariance")
        tot_inv = linalg.cho_solve((ct, True), np.eye(d))
        schur = tot - m.between @ tot_inv @ m.between
        schur = 0.5 * (schur + schur.T)
        ld_schur, cs = _logdet_pd(schur, "same-speaker conditional covariance")
        p = linalg.cho_solve((cs, True), np.eye(d))
        self.mean = m.mean
        self.diag = p - tot_inv  # applied to each of enroll, test
        self.cross = -tot_inv @ m.between @ p  # Q block of the same-speaker precision
        self.const = -0.5 * (ld_schur - ld_tot)

    def score(self, enroll, test):
        e = np.asarray(enroll, dtype=np.float64) - self.mean
        t = np.asarray(test, dtype=np.float64) - self.mean
        quad = (np.sum((e @ self.diag) * e, axis=-1) + np.sum((t @ self.diag) * t, axis=-1)
                + 2 * np.sum((e @ self.cross) * t, axis=-1))
        return self.const - 0.5 * quad


def plda_score(m, enroll, test):
    if len(enroll) != m.dim or len(test) != m.dim:
        raise ConfigError("vector dimension does not match the PLDA model")
    return float(PldaScorer(m).score(enroll, test))


# -- backend wrapper -------------------------------------------------------

class Backend:
    """A fitted scoring transform: ``none`` (cosine), ``lda`` (+cosine) or ``plda``."""

    def __init__(self, kind="none", length_norm=False, lda=None, plda=None):
        if kind not in KIND_CODES:
            raise ConfigError(f"unknown backend kind {kind!r}")
        self.kind = kind
        self.length_norm = length_norm
        self.lda = lda
        self.plda = plda
        self._scorer = PldaScorer(plda) if plda is not None else None

    @classmethod
    def fit(cls, kind, vectors, labels, lda_dim=150, length_norm=False):
        x = np.asarray(vectors, dtype=np.float64)
        if length_norm:
            x = length_normalize(x)
        if kind == "none":
            return cls("none", length_norm)
        if kind == "lda":
            return cls("lda", length_norm, lda=fit_lda(x, labels, lda_dim))
        if kind == "plda":
            return cls("plda", length_norm, plda=fit_plda(x, labels))
        raise ConfigError(f"unknown backend kind {kind!r}")

    def prepare(self, v):
        v = np.asarray(v, dtype=np.float64)
        if self.length_norm:
            v = length_normalize(v)
        if self.kind == "lda":
            v = apply_lda(self.lda, v)
        return v

    def score(self, enroll, test):
        e, t = self.prepare(enroll), self.prepare(test)
        if self.kind == "plda":
            return float(self._scorer.score(e, t))
        return cosine_score(e, t)


def _write_array(w, arr):
    arr = np.asarray(arr)
    w.u32(arr.ndim)
    for s in arr.shape:
        w.u32(s)
    w.blob(arr)


def _read_array(r):
    ndim = r.u32()
    shape = tuple(r.u32() for _ in range(ndim))
    data = r.blob()
    if data.size != int(np.prod(shape)):
        raise FormatError(f"{r.what}: blob of {data.size} values for shape {shape}")
    return data.reshape(shape)


def dump_backend(b):
    w = binio.Writer()
    w.magic(BKND_MAGIC)
    w.u32(1)
    w.u8(KIND_CODES[b.kind])
    w.u8(1 if b.length_norm else 0)
    if b.kind == "lda":
        _write_array(w, b.lda.mean)
        _write_array(w, b.lda.projection)
    elif b.kind == "plda":
        _write_array(w, b.plda.mean)
        _write_array(w, b.plda.between)
        _write_array(w, b.plda.within)
    return w.getvalue()


def load_backend_bytes(data, what="backend file"):
    r = binio.Reader(data, what)
    r.magic(BKND_MAGIC)
    r.version()
    code = r.u8()
    if code not in KIND_NAMES:
        raise FormatError(f"{what}: unknown backend kind code {code}")
    kind = KIND_NAMES[code]
    length_norm = bool(r.u8())
    lda = plda = None
    if kind == "lda":
        mean = _read_array(r).astype(np.float64)
        lda = LdaTransform(_read_array(r).astype(np.float64), mean)
    elif kind == "plda":
        mean, between, within = (_read_array(r).astype(np.float64) for _ in range(3))
        plda = PldaModel(mean, between, within)
    r.expect_end()
    return Backend(kind, length_norm, lda=lda, plda=plda)


def save_backend(b, path):
    binio.write_bytes(path, dump_backend(b))


def load_backend(path):
    return load_backend_bytes(binio.read_bytes(path), what=os.fspath(path))
