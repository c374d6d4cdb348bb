"""Acceptance suite: one test group per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary
prints one PASS/FAIL line per criterion with the measured values.
Criteria 6 to 8 train real models and take several minutes each on one
core; deselect them with ``-m "not slow"``.
"""
import json
import math
import time

import numpy as np
import pytest

from ctdnn_sv import audiofe, backend as bk, cli, ctdnn, dvec, evalkit
from ctdnn_sv.ctdnn import (ConvSpec, CtdnnConfig, TdSpec, build_ctdnn, canonical_config,
                            forward_features, receptive_field)
from ctdnn_sv.errors import FormatError, TruncatedFileError
from ctdnn_sv.ndnn import (Affine, Conv2D, MaxPool2D, PNorm, ReLU, Softmax, TimeDelayAffine,
                           grad_check)
from ctdnn_sv.pipeline import Pipeline, PipelineConfig

from oracles import (brute_force_eer, keep_units_alive, plda_llr_joint_gaussian,
                     plda_recovery_trial, probe_influence, probe_output_rows,
                     random_admissible_config, random_spd)


def criterion(n, title):
    return pytest.mark.criterion(n, title)


def detail(record_property, text):
    record_property("detail", text)


# -- 1: gradient correctness -------------------------------------------------------

def _glorot(layer, rng):
    layer.init_params(rng, np.float64)
    layer.params["b"][...] = rng.standard_normal(layer.params["b"].shape)  # exercise bias grads
    return layer


def _layer_cases():
    rng = np.random.default_rng(0)
    away = lambda shape: np.sign(rng.standard_normal(shape)) * rng.uniform(0.2, 1.5, shape)
    return {
        "conv": (_glorot(Conv2D(3, 4, 2, 5), rng), rng.standard_normal((2, 3, 4, 12))),
        "maxpool": (MaxPool2D(1, 2), rng.permutation(2 * 4 * 3 * 10).reshape(2, 4, 3, 10) / 7.0),
        "affine": (_glorot(Affine(9, 6), rng), rng.standard_normal((2, 5, 9))),
        "time-delay": (_glorot(TimeDelayAffine(5, 8, [-3, 0, 3]), rng), rng.standard_normal((2, 12, 5))),
        "p-norm": (PNorm(2), away((3, 10))),
        "relu": (ReLU(), away((4, 7))),
        "softmax": (Softmax(), rng.standard_normal((3, 6))),
    }


@criterion(1, "gradient correctness")
@pytest.mark.parametrize("kind", list(_layer_cases()))
def test_c1_layer_gradients(kind, record_property):
    layer, x = _layer_cases()[kind]
    rep = grad_check(layer, x, eps=1e-3)
    detail(record_property, f"{kind} {rep.max_rel_error:.1e}")
    assert rep.max_rel_error < 1e-4, rep.block_errors


@criterion(1, "gradient correctness")
def test_c1_composed_ctdnn_20_frames(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    # reduced widths, every parameter and input entry checked
    small = CtdnnConfig(num_speakers=4, input_bins=12, conv1=ConvSpec(3, 2, 3, 2),
                        conv2=ConvSpec(4, 2, 2, 2), bottleneck_dim=8,
                        td1=TdSpec([-3, 0, 3], 8, 2), td2=TdSpec([-1, 0, 2], 8, 2), feature_dim=6)
    m = build_ctdnn(small, seed=3)
    full = grad_check(m, rng.standard_normal((1, 20, 12)), eps=1e-3, labels=np.array([2]))
    # canonical geometry, a sample of entries from every block
    m = build_ctdnn(canonical_config(10), seed=3)
    sampled = grad_check(m, rng.standard_normal((1, 20, 40)), eps=1e-3, labels=np.array([7]),
                         max_entries=12)
    elapsed = time.perf_counter() - t0
    detail(record_property, f"toy {full.max_rel_error:.1e}, canonical {sampled.max_rel_error:.1e}, "
                            f"{elapsed:.1f}s")
    assert full.max_rel_error < 1e-4, full.block_errors
    assert sampled.max_rel_error < 1e-4, sampled.block_errors
    assert elapsed < 30


# -- 2: receptive field --------------------------------------------------------------

@criterion(2, "receptive-field exactness")
def test_c2_receptive_field(record_property):
    t0 = time.perf_counter()
    assert receptive_field(canonical_config()) == (10, 9, 20)
    m = build_ctdnn(canonical_config(16), seed=0)
    for t in (20, 21, 50, 100, 1000):
        f = forward_features(m, np.random.default_rng(t).standard_normal((t, 40)).astype(np.float32))
        assert f.shape == (t - 19, 400)
    agree = 0
    for seed in range(20):
        cfg = random_admissible_config(np.random.default_rng(1000 + seed)).validate()
        _, _, total = receptive_field(cfg)
        net = keep_units_alive(build_ctdnn(cfg, seed=seed, dtype=np.float64))
        t = total + 5
        assert probe_output_rows(net, t) == t - total + 1
        assert probe_influence(net, 3, t, seed=seed) == list(range(3, 3 + total))
        agree += 1
    elapsed = time.perf_counter() - t0
    detail(record_property, f"probe agrees on {agree}/20 configs, {elapsed:.1f}s")
    assert elapsed < 60


# -- 3: EER oracle ---------------------------------------------------------------------

@criterion(3, "EER oracle equivalence")
def test_c3_eer_oracle(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(100):
        nt = int(rng.integers(1, 5001))
        nn = int(rng.integers(1, 5001))
        tar = rng.normal(rng.uniform(0, 3), 1.0, nt)
        non = rng.normal(0.0, rng.uniform(0.5, 2), nn)
        if i % 3 == 0:  # coarse scores force ties
            tar, non = np.round(tar, 1), np.round(non, 1)
        got = evalkit.compute_eer(tar, non).eer
        worst = max(worst, abs(got - brute_force_eer(tar, non)))
    assert evalkit.compute_eer([0.9, 0.8], [0.2, 0.1]).eer == 0.0
    same = rng.normal(size=50)
    assert evalkit.compute_eer(same, same.copy()).eer == 0.5
    elapsed = time.perf_counter() - t0
    detail(record_property, f"max |diff| {worst:.1e} over 100 instances, {elapsed:.1f}s")
    assert worst < 1e-9
    assert elapsed < 60


# -- 4: PLDA -----------------------------------------------------------------------------

@criterion(4, "PLDA oracle equivalence")
def test_c4_plda_oracle(record_property):
    t0 = time.perf_counter()
    worst = 0.0
    for d in (2, 5, 20):
        rng = np.random.default_rng(d)
        m = bk.PldaModel(rng.standard_normal(d), random_spd(rng, d, 1.0, 20),
                         random_spd(rng, d, 0.5, 20))
        scorer = bk.PldaScorer(m)
        for _ in range(1000):
            e, t = 2 * rng.standard_normal(d), 2 * rng.standard_normal(d)
            ref = plda_llr_joint_gaussian(m.mean, m.between, m.within, e, t)
            worst = max(worst, abs(scorer.score(e, t) - ref))
    errs, monotone = [], True
    for seed in range(10):
        eb, ew, ref, fit = plda_recovery_trial(seed)
        ll = np.asarray(fit.loglik_history)
        monotone &= bool(np.all(np.diff(ll) >= -1e-8 * np.abs(ll[:-1])))
        errs.append((eb, ew, ref))
    errs = np.array(errs)
    med_b, med_w = np.median(errs[:, 0]), np.median(errs[:, 1])
    elapsed = time.perf_counter() - t0
    detail(record_property, f"oracle max diff {worst:.1e}; recovery median B {med_b:.3f} "
                            f"W {med_w:.3f}; EM monotone {monotone}; {elapsed:.1f}s")
    assert worst < 1e-6
    assert monotone
    assert med_b < 0.15 and med_w < 0.15
    # every draw: EM within 0.02 of the method-of-moments sampling error
    assert np.all(errs[:, 0] <= errs[:, 2] + 0.02)
    assert np.all(errs[:, 1] < 0.15)
    assert elapsed < 120


# -- 5: LDA ------------------------------------------------------------------------------

@criterion(5, "LDA analytic check")
def test_c5_lda(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    n = 5000
    x = np.concatenate([rng.standard_normal((n, 2)) + [5, 0], rng.standard_normal((n, 2)) - [5, 0]])
    y = np.repeat([0, 1], n)
    p = bk.fit_lda(x, y, 1).projection[0]
    diff = x[:n].mean(axis=0) - x[n:].mean(axis=0)
    angle = math.degrees(math.acos(min(1.0, abs(p @ diff) / np.linalg.norm(p) / np.linalg.norm(diff))))
    k, d = 6, 8
    means = 3 * rng.standard_normal((k, d))
    z = np.concatenate([means[c] + rng.standard_normal((40, d)) for c in range(k)])
    lab = np.repeat(np.arange(k), 40)
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    a = bk.apply_lda(bk.fit_lda(z, lab, 4), z)
    b = bk.apply_lda(bk.fit_lda(z @ q.T, lab, 4), z @ q.T)
    dist = lambda v: np.linalg.norm(v[:, None] - v[None], axis=-1)
    gap = float(np.max(np.abs(dist(a) - dist(b))))
    elapsed = time.perf_counter() - t0
    detail(record_property, f"angle {angle:.3f} deg; rotation gap {gap:.1e}; {elapsed:.1f}s")
    assert angle < 2.0
    assert gap < 1e-6
    assert elapsed < 10


# -- 6, 7: desk-scale end to end ------------------------------------------------------------

@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Default configuration: 40 speakers x 20 utterances x 3 s, 32 train / 8 eval."""
    root = tmp_path_factory.mktemp("desk")
    cfg = PipelineConfig.from_dict({"work_dir": str(root)})
    pipe = Pipeline(cfg)
    t0 = time.perf_counter()
    rep = pipe.run_all()
    return pipe, rep, time.perf_counter() - t0


@pytest.mark.slow
@criterion(6, "desk-scale end to end")
def test_c6_desk_scale(desk_run, record_property):
    pipe, rep, elapsed = desk_run
    cos, lda = rep["eer"]["cosine"]["full"], rep["eer"]["LDA"]["full"]
    n_tar = rep["details"]["full"]["eer"]["none"]["n_target"]
    detail(record_property, f"cosine {cos:.2%}, LDA {lda:.2%}, PLDA "
                            f"{rep['eer']['PLDA']['full']:.2%} ({n_tar} target trials); "
                            f"{elapsed / 60:.1f} min")
    assert len(pipe.cfg["eval"]["test_frames"]) == 4
    assert cos <= 0.10
    assert lda <= cos + 0.01
    assert elapsed < 15 * 60


@pytest.mark.slow
@criterion(7, "short-segment trend")
def test_c7_short_segments(desk_run, record_property):
    _, rep, _ = desk_run
    e = rep["eer"]["cosine"]
    chain = [e["20"], e["50"], e["100"], e["full"]]
    detail(record_property, "cosine EER 20/50/100/full: " + " / ".join(f"{v:.2%}" for v in chain))
    for shorter, longer in zip(chain, chain[1:]):
        assert shorter >= longer - 0.015
    assert e["20"] <= 0.25


# -- 8: training-size trend ---------------------------------------------------------------

def _cosine_eer_for(desk_pipe, root, seed, num_speakers):
    """Train on a seeded speaker subset and score the fixed eval set with cosine."""
    d = desk_pipe.cfg.to_dict()
    d["work_dir"] = str(root)
    d["paths"]["features"] = desk_pipe.path("features")  # shared features and split
    pipe = Pipeline(PipelineConfig.from_dict(d).with_seed(seed))
    model = ctdnn.load_model(pipe.train(num_speakers=num_speakers))
    enroll = {}
    for u, s, p in pipe._features("enroll"):
        enroll.setdefault(s, []).append(audiofe.read_features(p))
    enroll = {s: dvec.enroll_speaker(model, fs, s).values for s, fs in enroll.items()}
    test = {u: (s, dvec.extract_dvector(model, audiofe.read_features(p)).values)
            for u, s, p in pipe._features("test")}
    trials = evalkit.make_trials(sorted(enroll), [(u, s) for u, (s, _) in test.items()])
    scored = evalkit.score_trials(trials, enroll, {u: v for u, (_, v) in test.items()},
                                  bk.Backend("none"))
    return evalkit.compute_eer(scored).eer


@pytest.mark.slow
@criterion(8, "training-size trend")
def test_c8_training_size(desk_run, tmp_path, record_property):
    pipe, _, _ = desk_run
    t0 = time.perf_counter()
    wins, pairs = 0, []
    for seed in range(1, 6):
        small = _cosine_eer_for(pipe, tmp_path / f"s{seed}-8", seed, 8)
        large = _cosine_eer_for(pipe, tmp_path / f"s{seed}-32", seed, 32)
        pairs.append(f"{small:.1%}>{large:.1%}" if large < small else f"{small:.1%}<={large:.1%}")
        wins += large < small
    elapsed = time.perf_counter() - t0
    detail(record_property, f"32 beats 8 in {wins}/5 ({', '.join(pairs)}); {elapsed / 60:.1f} min")
    assert wins >= 4
    assert elapsed < 45 * 60


# -- 9: determinism ----------------------------------------------------------------------

TINY = {
    "synth": {"num_speakers": 6, "utts_per_speaker": 6, "utt_seconds": 1.2},
    "split": {"train_speakers": 4, "eval_speakers": 2, "enroll_per_speaker": 3},
    "model": {"conv1": {"maps": 4}, "conv2": {"maps": 8}, "bottleneck_dim": 64,
              "td1": {"affine_out": 32}, "td2": {"affine_out": 32}, "feature_dim": 8},
    "train": {"epochs": 1},
    "eval": {"test_frames": ["full", 100, 50, 20]},
}


@criterion(9, "determinism")
def test_c9_run_all_twice(tmp_path, record_property):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    for w in ("a", "b"):
        assert cli.main(["run-all", "--config", str(cfg), "--seed", "7", "--threads", "1",
                         "--work-dir", str(tmp_path / w)]) == 0
    files = ["results/report.json", "models/ctdnn.model"]
    files += sorted(str(p.relative_to(tmp_path / "a")) for p in (tmp_path / "a").rglob("*.dvec"))
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    detail(record_property, f"{len(files)} files byte-identical")


# -- 10: format round trips -----------------------------------------------------------------

def _round_trip(dump, load, obj):
    data = dump(obj)
    again = dump(load(data))
    assert again == data
    typed = 0
    for cut in range(len(data)):
        try:
            load(data[:cut])
        except TruncatedFileError:
            typed += 1
    assert typed == len(data)
    with pytest.raises(FormatError):
        load(b"JUNK" + data[4:])
    return len(data)


@criterion(10, "format round trips")
def test_c10_formats(record_property):
    rng = np.random.default_rng(10)
    cfg = CtdnnConfig(num_speakers=3, input_bins=12, conv1=ConvSpec(3, 2, 3, 2),
                      conv2=ConvSpec(4, 2, 2, 2), bottleneck_dim=8,
                      td1=TdSpec([-3, 0, 3], 8, 2), td2=TdSpec([-1, 0, 2], 8, 2), feature_dim=6)
    sizes = {
        "model": _round_trip(ctdnn.dump_model, ctdnn.load_model_bytes, build_ctdnn(cfg, seed=1)),
        "vectors": _round_trip(dvec.dump_dvectors, dvec.load_dvectors,
                               [dvec.DVector(rng.standard_normal(400), f"u{i}", "s", 30 + i)
                                for i in range(3)]),
        "features": _round_trip(audiofe.dump_features, audiofe.load_features,
                                rng.standard_normal((37, 40)).astype(np.float32)),
    }
    x = rng.standard_normal((40, 6))
    y = np.repeat(np.arange(4), 10)
    for kind in ("none", "lda", "plda"):
        sizes[f"backend-{kind}"] = _round_trip(bk.dump_backend, bk.load_backend_bytes,
                                               bk.Backend.fit(kind, x, y, lda_dim=3))
    # the canonical model as well, once
    m = build_ctdnn(canonical_config(50), seed=0)
    data = ctdnn.dump_model(m)
    assert ctdnn.dump_model(ctdnn.load_model_bytes(data)) == data
    with pytest.raises(TruncatedFileError):
        ctdnn.load_model_bytes(data[:len(data) // 2])
    detail(record_property, ", ".join(f"{k} {v}B" for k, v in sizes.items()))
