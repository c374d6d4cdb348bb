import logging

import numpy as np
import pytest

from ctdnn_sv import train as tr
from ctdnn_sv.ctdnn import ConvSpec, CtdnnConfig, TdSpec, build_ctdnn, dump_model
from ctdnn_sv.errors import ConfigError, LabelingError, NonFiniteLossError


def toy_config(k):
    return CtdnnConfig(num_speakers=k, input_bins=12, conv1=ConvSpec(3, 2, 3, 2),
                       conv2=ConvSpec(4, 2, 2, 2), bottleneck_dim=8,
                       td1=TdSpec([-3, 0, 3], 16, 2), td2=TdSpec([-1, 0, 2], 16, 2),
                       feature_dim=8)


def toy_utterances(num_speakers, utts, frames, seed=0, sep=1.5):
    """Gaussian frames around a per-speaker spectral template."""
    rng = np.random.default_rng(seed)
    templates = rng.standard_normal((num_speakers, 12)) * sep
    out = []
    for s in range(num_speakers):
        for u in range(utts):
            x = templates[s] + rng.standard_normal((frames, 12))
            out.append((f"s{s}-u{u}", f"s{s}", x.astype(np.float32)))
    return out


def small_cfg(**kw):
    d = dict(lr_initial=0.01, momentum=0.9, minibatch_frames=32, chunk_windows=8,
             heldout_fraction=0.0, seed=0)
    d.update(kw)
    return tr.TrainConfig(**d)


# -- dataset -----------------------------------------------------------------

def test_window_counts_at_boundary(caplog):
    cfg = toy_config(2)
    utts = [("a", "s0", np.zeros((20, 12))), ("b", "s1", np.zeros((19, 12)))]
    with caplog.at_level(logging.WARNING):
        ds = tr.make_frame_dataset(utts, cfg)
    assert list(ds.num_windows) == [1, 0]
    assert len(ds) == 1
    assert any("b" in r.getMessage() and "19" in r.getMessage() for r in caplog.records)


def test_window_count_recount():
    rng = np.random.default_rng(1)
    lengths = rng.integers(5, 80, size=25)
    utts = [(f"u{i}", f"s{i % 3}", np.zeros((int(t), 12))) for i, t in enumerate(lengths)]
    ds = tr.make_frame_dataset(utts, toy_config(3))
    assert len(ds) == sum(max(0, int(t) - 19) for t in lengths)
    # and the chunks tile exactly those windows
    assert sum(n for _, _, n in ds.chunks(7)) == len(ds)


def test_labels_contiguous_and_unknown_speaker(tmp_path):
    utts = toy_utterances(3, 2, 25)
    ds = tr.make_frame_dataset(utts, toy_config(3))
    assert sorted(ds.label_map.values()) == [0, 1, 2]
    with pytest.raises(LabelingError):
        tr.make_frame_dataset(utts + [("x", "stranger", np.zeros((30, 12)))], toy_config(3),
                              ds.label_map)
    p = tmp_path / "labels.json"
    tr.save_label_map(p, ds.label_map)
    again = tr.make_frame_dataset(utts, toy_config(3), tr.load_label_map(p))
    assert np.array_equal(again.labels, ds.labels)


def test_batch_masks_padding():
    ds = tr.make_frame_dataset([("a", "s0", np.arange(25 * 12, dtype=np.float32).reshape(25, 12))],
                               toy_config(2))
    x, mask, labels = ds.batch(ds.chunks(8), 8)
    assert x.shape == (1, 8 + 19, 12)
    assert list(mask[0]) == [1] * 6 + [0] * 2
    assert np.array_equal(x[0, :25], ds.feats[0])


# -- optimisation ----------------------------------------------------------------

def test_momentum_zero_is_vanilla_sgd():
    rng = np.random.default_rng(2)
    p = {"w": rng.standard_normal(7)}
    g = {"w": rng.standard_normal(7)}
    before = p["w"].copy()
    tr.sgd_step(p, g, {"w": np.zeros(7)}, 0.03, 0.0)
    assert np.array_equal(p["w"], before - 0.03 * g["w"])


def test_momentum_accumulates():
    p = {"w": np.zeros(1)}
    v = {"w": np.zeros(1)}
    for _ in range(3):
        tr.sgd_step(p, {"w": np.ones(1)}, v, 1.0, 0.5)
    assert v["w"][0] == 1 + 0.5 + 0.25
    assert p["w"][0] == -(1 + 1.5 + 1.75)


def test_lr_zero_leaves_parameters_unchanged():
    cfg = toy_config(2)
    ds = tr.make_frame_dataset(toy_utterances(2, 2, 40), cfg)
    m = build_ctdnn(cfg, seed=0)
    before = dump_model(m)
    st = tr.TrainState(lr=0.0)
    tr.train_epoch(m, ds, small_cfg(), st)
    assert dump_model(m) == before
    assert st.epoch == 1 and st.frames_seen == len(ds)


def test_same_seed_same_parameters():
    cfg = toy_config(3)
    ds = tr.make_frame_dataset(toy_utterances(3, 3, 40), cfg)
    runs = []
    for _ in range(2):
        m = build_ctdnn(cfg, seed=4)
        tr.train(m, ds, small_cfg(seed=9, heldout_fraction=0.1), epochs=2)
        runs.append(dump_model(m))
    assert runs[0] == runs[1]


def test_two_speaker_overfit():
    cfg = toy_config(2)
    ds = tr.make_frame_dataset(toy_utterances(2, 1, 69, seed=3), cfg)  # 50 windows each
    assert list(ds.num_windows) == [50, 50]
    m = build_ctdnn(cfg, seed=0)
    tr.train(m, ds, small_cfg(lr_initial=0.02), epochs=30)
    assert tr.evaluate_frame_accuracy(m, ds) > 0.95


def test_saturated_model_has_perfect_accuracy():
    cfg = toy_config(3)
    ds = tr.make_frame_dataset(toy_utterances(3, 1, 30, seed=4), cfg)
    m = build_ctdnn(cfg, seed=0)
    tr.train(m, ds, small_cfg(lr_initial=0.02, max_plateaus=99), epochs=60)
    assert tr.evaluate_frame_accuracy(m, ds) == 1.0


def test_untrained_accuracy_near_chance():
    k = 32
    cfg = toy_config(k)
    ds = tr.make_frame_dataset(toy_utterances(k, 1, 40, seed=5, sep=0.5), cfg)
    accs = [tr.evaluate_frame_accuracy(build_ctdnn(cfg, seed=s), ds) for s in range(3)]
    assert all(abs(a - 1 / k) <= 0.05 for a in accs), accs


def test_accuracy_recount_from_posteriors():
    cfg = toy_config(3)
    ds = tr.make_frame_dataset(toy_utterances(3, 2, 37, seed=6), cfg)
    m = build_ctdnn(cfg, seed=1)
    tr.train(m, ds, small_cfg(), epochs=2)
    labels, post = zip(*tr.frame_posteriors(m, ds, chunk_windows=8))
    labels, post = np.concatenate(labels), np.concatenate(post)
    assert len(labels) == len(ds)
    correct = 0
    for lab, row in zip(labels, post):
        best = max(range(len(row)), key=lambda j: (row[j], -j))  # lowest index on ties
        correct += best == lab
    assert tr.evaluate_frame_accuracy(m, ds, chunk_windows=8) == correct / len(labels)


def test_loss_non_increasing_over_epochs():
    cfg = toy_config(3)
    ds = tr.make_frame_dataset(toy_utterances(3, 2, 45, seed=7), cfg)
    monotone = 0
    for seed in range(5):
        m = build_ctdnn(cfg, seed=seed)
        st = tr.train(m, ds, small_cfg(seed=seed, lr_initial=0.005), epochs=6)
        losses = [h["loss"] for h in st.history]
        monotone += all(b <= a for a, b in zip(losses, losses[1:]))
    assert monotone / 5 >= 0.9


def test_checkpoint_resume_bitwise(tmp_path):
    cfg = toy_config(3)
    ds = tr.make_frame_dataset(toy_utterances(3, 3, 40, seed=8), cfg)
    tcfg = small_cfg(heldout_fraction=0.2)
    straight = build_ctdnn(cfg, seed=2)
    tr.train(straight, ds, tcfg, epochs=2)

    m = build_ctdnn(cfg, seed=2)
    tr.train(m, ds, tcfg, epochs=1, checkpoint_prefix=str(tmp_path / "ck"),
             log_path=str(tmp_path / "log.jsonl"))
    for suffix in (".model", ".momentum", ".state.json"):
        assert (tmp_path / f"ck{suffix}").exists()
    m2, st = tr.load_checkpoint(str(tmp_path / "ck"))
    tr.train(m2, ds, tcfg, state=st, epochs=2, log_path=str(tmp_path / "log.jsonl"))
    assert dump_model(m2) == dump_model(straight)
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == 2 and '"epoch": 2' in lines[1]


def test_lr_halves_on_plateau_and_stops():
    cfg = toy_config(2)
    ds = tr.make_frame_dataset(toy_utterances(2, 4, 30, seed=9), cfg)
    m = build_ctdnn(cfg, seed=0)
    st = tr.train(m, ds, small_cfg(lr_initial=1e-9, heldout_fraction=0.3, max_plateaus=2),
                  epochs=10)
    # no learning happens, so every epoch after the first is a plateau
    assert st.plateaus == 2 and st.epoch == 3
    assert st.lr == pytest.approx(1e-9 / 4)


def test_non_finite_loss_reports_lr_and_batch():
    cfg = toy_config(2)
    utts = toy_utterances(2, 1, 30)
    utts[0][2][5, 3] = np.nan
    ds = tr.make_frame_dataset(utts, cfg)
    with pytest.raises(NonFiniteLossError) as e:
        tr.train_epoch(build_ctdnn(cfg, seed=0), ds, small_cfg(), tr.TrainState(lr=0.01))
    assert e.value.lr == 0.01 and e.value.batch is not None
    assert "lr=0.01" in str(e.value)


def test_empty_dataset_and_bad_config():
    cfg = toy_config(2)
    ds = tr.make_frame_dataset([("a", "s0", np.zeros((5, 12)))], cfg)
    with pytest.raises(ConfigError):
        tr.train_epoch(build_ctdnn(cfg), ds, small_cfg(), tr.TrainState())
    with pytest.raises(ConfigError):
        small_cfg(lr_initial=0).validate()
    with pytest.raises(ConfigError):
        small_cfg(minibatch_frames=0).validate()


def test_epoch_order_balances_speakers():
    cfg = toy_config(3)
    ds = tr.make_frame_dataset(toy_utterances(3, 1, 19 + 40), cfg)
    order = tr.epoch_order(ds, ds.chunks(8), seed=0, epoch=0)
    labels = [int(ds.labels[c[0]]) for c in order]
    # five chunks per speaker, interleaved: every round of three holds each speaker once
    for r in range(5):
        assert sorted(labels[3 * r:3 * r + 3]) == [0, 1, 2]
    assert sorted(order) == sorted(ds.chunks(8))
