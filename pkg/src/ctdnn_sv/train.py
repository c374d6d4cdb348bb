"""Frame-level speaker-classification training with momentum SGD.

A training example is one receptive-field window (20 frames) labelled with
its utterance's speaker. Consecutive windows of an utterance are grouped
into chunks that share one forward pass; padded tail windows are masked
out of the loss, so the objective is exactly the mean per-window
cross-entropy.
"""
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import audiofe
from .ctdnn import dump_model, load_model_bytes
from . import binio
from .errors import ConfigError, LabelingError, NonFiniteLossError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_initial: float = 0.01
    momentum: float = 0.9
    minibatch_frames: int = 256
    chunk_windows: int = 32
    epochs_max: int = 20
    lr_decay_min_gain: float = 0.001
    max_plateaus: int = 3
    heldout_fraction: float = 0.05
    seed: int = 0

    def validate(self):
        if not self.lr_initial > 0:
            raise ConfigError("lr_initial must be > 0")
        if self.minibatch_frames < 1 or self.chunk_windows < 1:
            raise ConfigError("minibatch_frames and chunk_windows must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if not 0 <= self.heldout_fraction < 1:
            raise ConfigError("heldout_fraction must be in [0, 1)")
        return self

    @property
    def chunks_per_batch(self):
        return max(1, self.minibatch_frames // self.chunk_windows)


@dataclass
class TrainState:
    epoch: int = 0
    frames_seen: int = 0
    lr: float = 0.01
    loss_ema: float | None = None
    heldout_accuracy: float | None = None
    best_heldout_accuracy: float = -1.0
    plateaus: int = 0
    seed: int = 0
    history: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# -- dataset ---------------------------------------------------------------

def make_label_map(speaker_ids):
    return {s: i for i, s in enumerate(sorted(set(speaker_ids)))}


def save_label_map(path, label_map):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(label_map, f, sort_keys=True, indent=0)
        f.write("\n")


def load_label_map(path):
    with open(path, encoding="utf-8") as f:
        return {k: int(v) for k, v in json.load(f).items()}


class FrameDataset:
    """Utterance features plus the window bookkeeping used for batching."""

    def __init__(self, utt_ids, feats, labels, label_map, context):
        self.utt_ids = list(utt_ids)
        self.feats = list(feats)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.label_map = label_map
        self.context = context  # receptive field in frames
        self.num_windows = np.array([max(0, len(f) - context + 1) for f in self.feats],
                                    dtype=np.int64)

    def __len__(self):
        return int(self.num_windows.sum())

    @property
    def num_classes(self):
        return len(self.label_map)

    def chunks(self, chunk_windows):
        """All (utt_index, first_window, n_windows) chunks, in corpus order."""
        out = []
        for u, n in enumerate(self.num_windows):
            for s in range(0, int(n), chunk_windows):
                out.append((u, s, min(chunk_windows, int(n) - s)))
        return out

    def batch(self, chunks, chunk_windows):
        """Stack chunks into (B, chunk_windows + context - 1, D) with a window mask."""
        span = chunk_windows + self.context - 1
        dim = self.feats[0].shape[1]
        x = np.empty((len(chunks), span, dim), dtype=np.float32)
        mask = np.zeros((len(chunks), chunk_windows), dtype=np.float32)
        labels = np.empty(len(chunks), dtype=np.int64)
        for i, (u, s, n) in enumerate(chunks):
            seg = self.feats[u][s:s + n + self.context - 1]
            x[i, :len(seg)] = seg
            x[i, len(seg):] = seg[-1]
            mask[i, :n] = 1
            labels[i] = self.labels[u]
        return x, mask, labels


def make_frame_dataset(utterances, model_cfg, label_map=None):
    """Build a window dataset.

    ``utterances``: iterable of (utt_id, speaker_id, features) where
    features is a (T, D) array or a path to a feature archive file.
    A supplied ``label_map`` must cover every speaker.
    """
    from .ctdnn import receptive_field

    context = receptive_field(model_cfg)[2]
    items = list(utterances)
    if label_map is None:
        label_map = make_label_map(spk for _, spk, _ in items)
    ids, feats, labels = [], [], []
    for utt, spk, f in items:
        if spk not in label_map:
            raise LabelingError(f"speaker {spk!r} of utterance {utt!r} has no label")
        if isinstance(f, (str, os.PathLike)):
            f = audiofe.read_features(f)
        f = np.asarray(f, dtype=np.float32)
        if len(f) < context:
            log.warning("utterance %s has %d frames (< %d); contributes no windows",
                        utt, len(f), context)
        ids.append(utt)
        feats.append(f)
        labels.append(label_map[spk])
    return FrameDataset(ids, feats, labels, label_map, context)


def split_heldout(chunks, fraction, seed):
    if fraction <= 0 or len(chunks) < 2:
        return list(chunks), []
    rng = np.random.default_rng([seed, 7919])
    n_held = max(1, int(round(fraction * len(chunks))))
    held = set(rng.choice(len(chunks), n_held, replace=False).tolist())
    train = [c for i, c in enumerate(chunks) if i not in held]
    return train, [c for i, c in enumerate(chunks) if i in held]


def epoch_order(dataset, chunks, seed, epoch):
    """Shuffle chunks, then interleave speakers round-robin to balance labels."""
    rng = np.random.default_rng([seed, epoch])
    by_spk = {}
    for c in chunks:
        by_spk.setdefault(int(dataset.labels[c[0]]), []).append(c)
    queues = []
    for spk in sorted(by_spk):
        items = by_spk[spk]
        perm = rng.permutation(len(items))
        queues.append([items[i] for i in perm])
    order = []
    pos = [0] * len(queues)
    remaining = len(chunks)
    while remaining:
        for q in rng.permutation(len(queues)):
            if pos[q] < len(queues[q]):
                order.append(queues[q][pos[q]])
                pos[q] += 1
                remaining -= 1
    return order


# -- optimisation ----------------------------------------------------------

def zero_velocity(model):
    return {k: np.zeros_like(v) for k, v in model.param_blocks().items()}


def sgd_step(params, grads, velocity, lr, momentum):
    """v <- momentum * v + g;  p <- p - lr * v  (in place)."""
    for k, p in params.items():
        g = grads[k]
        if momentum:
            v = velocity[k]
            v *= momentum
            v += g
            g = v
        p -= lr * g


def train_epoch(model, dataset, cfg, state, chunks=None, heldout=None):
    """One shuffled pass of momentum SGD; returns the advanced state.

    ``chunks``/``heldout`` default to the deterministic split from
    ``cfg.heldout_fraction``. Momentum buffers live on ``state`` as the
    private attribute ``_velocity``.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ConfigError("empty training dataset")
    if chunks is None:
        chunks, heldout = split_heldout(dataset.chunks(cfg.chunk_windows),
                                        cfg.heldout_fraction, cfg.seed)
    velocity = getattr(state, "_velocity", None) or zero_velocity(model)
    params = model.param_blocks()
    order = epoch_order(dataset, chunks, state.seed, state.epoch)
    per = cfg.chunks_per_batch
    loss_sum, frames = 0.0, 0
    for b in range(0, len(order), per):
        x, mask, labels = dataset.batch(order[b:b + per], cfg.chunk_windows)
        loss, grads, _ = model.loss_and_grads(x, labels, weights=mask, need_input_grad=False)
        if not math.isfinite(loss):
            raise NonFiniteLossError(
                f"non-finite loss {loss} at epoch {state.epoch} batch {b // per} "
                f"(lr={state.lr})", lr=state.lr, batch=b // per)
        sgd_step(params, grads, velocity, state.lr, cfg.momentum)
        n = int(mask.sum())
        loss_sum += loss * n
        frames += n
        state.loss_ema = loss if state.loss_ema is None else 0.9 * state.loss_ema + 0.1 * loss
    state._velocity = velocity
    state.frames_seen += frames
    state.epoch += 1
    entry = {"epoch": state.epoch, "loss": loss_sum / max(frames, 1), "lr": state.lr}
    if heldout:
        acc = evaluate_frame_accuracy(model, dataset, heldout, cfg.chunk_windows)
        state.heldout_accuracy = acc
        entry["accuracy"] = acc
        if acc > state.best_heldout_accuracy + cfg.lr_decay_min_gain:
            state.best_heldout_accuracy = acc
        else:
            state.plateaus += 1
            state.lr *= 0.5
    state.history.append(entry)
    return state


def frame_posteriors(model, dataset, chunks=None, chunk_windows=32, batch_chunks=8):
    """Yield (labels, posteriors) arrays for every valid window."""
    from .ndnn import softmax

    if chunks is None:
        chunks = dataset.chunks(chunk_windows)
    for b in range(0, len(chunks), batch_chunks):
        x, mask, labels = dataset.batch(chunks[b:b + batch_chunks], chunk_windows)
        logits, _ = model.run(x)
        keep = mask.astype(bool)
        yield np.broadcast_to(labels[:, None], keep.shape)[keep], softmax(logits)[keep]


def evaluate_frame_accuracy(model, dataset, chunks=None, chunk_windows=32):
    """Fraction of windows whose argmax posterior (lowest index on ties) is the label."""
    correct = total = 0
    for labels, post in frame_posteriors(model, dataset, chunks, chunk_windows):
        correct += int(np.sum(np.argmax(post, axis=1) == labels))
        total += len(labels)
    return correct / total if total else 0.0


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(prefix, model, state):
    """Writes ``prefix.model``, ``prefix.momentum`` and ``prefix.state.json``."""
    binio.write_bytes(f"{prefix}.model", dump_model(model))
    vel = getattr(state, "_velocity", None)
    if vel is not None:
        vm = model.copy()
        for k, arr in vm.param_blocks().items():
            arr[...] = vel[k]
        binio.write_bytes(f"{prefix}.momentum", dump_model(vm))
    with open(f"{prefix}.state.json", "w", encoding="utf-8") as f:
        json.dump(state.to_dict(), f, sort_keys=True, indent=1)
        f.write("\n")


def load_checkpoint(prefix):
    model = load_model_bytes(binio.read_bytes(f"{prefix}.model"), what=f"{prefix}.model")
    with open(f"{prefix}.state.json", encoding="utf-8") as f:
        state = TrainState.from_dict(json.load(f))
    if os.path.exists(f"{prefix}.momentum"):
        vm = load_model_bytes(binio.read_bytes(f"{prefix}.momentum"))
        state._velocity = {k: v.copy() for k, v in vm.param_blocks().items()}
    return model, state


def append_log(path, entry):
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(entry, sort_keys=True) + "\n")


def train(model, dataset, cfg, state=None, epochs=None, log_path=None, checkpoint_prefix=None,
          progress=None):
    """Run epochs until ``epochs``/``epochs_max`` or ``max_plateaus`` lr halvings."""
    cfg.validate()
    if state is None:
        state = TrainState(lr=cfg.lr_initial, seed=cfg.seed)
    chunks, heldout = split_heldout(dataset.chunks(cfg.chunk_windows), cfg.heldout_fraction,
                                    cfg.seed)
    limit = cfg.epochs_max if epochs is None else epochs
    while state.epoch < limit and state.plateaus < cfg.max_plateaus:
        train_epoch(model, dataset, cfg, state, chunks, heldout)
        if log_path:
            append_log(log_path, state.history[-1])
        if checkpoint_prefix:
            save_checkpoint(checkpoint_prefix, model, state)
        if progress:
            progress(state)
    return state


__all__ = ["FrameDataset", "TrainConfig", "TrainState", "evaluate_frame_accuracy",
           "frame_posteriors", "load_checkpoint", "load_label_map", "make_frame_dataset",
           "make_label_map", "save_checkpoint", "save_label_map", "sgd_step", "train",
           "train_epoch"]
