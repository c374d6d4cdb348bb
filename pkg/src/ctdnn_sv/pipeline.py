"""Experiment orchestration behind the command-line tool.

A run lives in one work directory. Each stage reads the artifacts of the
stages before it, writes its own, and records a stamp (a digest of its
config section, the run seed and its input files). Re-running a stage whose
stamp still matches is a no-op unless ``force`` is set.

Conditions name the test-segment length: ``"full"`` or a frame count such
as ``"20"``. Backends are ``none`` (cosine), ``lda`` and ``plda``.
"""
import copy
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import audiofe, dvec, evalkit, synthcorpus, train as trainmod
from .backend import Backend, load_backend, save_backend
from .ctdnn import CtdnnConfig, build_ctdnn, load_model, save_model
from .errors import (ConfigError, DependencyError, EnrollmentError, LengthError,
                     TooShortError)

log = logging.getLogger(__name__)

BACKEND_LABELS = {"none": "cosine", "lda": "LDA", "plda": "PLDA"}


def _defaults():
    synth = asdict(synthcorpus.SynthSpec())
    del synth["seed"]
    model = CtdnnConfig().to_dict()
    del model["num_speakers"]
    tr = asdict(trainmod.TrainConfig())
    del tr["seed"]
    tr.update(epochs=2, num_speakers=None)
    return {
        "seed": 0,
        "work_dir": "work",
        "paths": {"corpus": "corpus", "features": "features", "models": "models",
                  "vectors": "vectors", "results": "results"},
        "synth": synth,
        "split": {"train_speakers": 32, "eval_speakers": 8, "enroll_per_speaker": 10},
        "fbank": audiofe.FbankConfig().to_dict(),
        "model": model,
        "train": tr,
        "backend": {"kinds": ["none", "lda", "plda"], "lda_dim": 150, "length_norm": False},
        "eval": {"test_frames": [None, 100, 50, 20], "enroll_frames": None},
    }


def _merge(base, user, path):
    if not isinstance(user, dict):
        raise ConfigError(f"config: {path or '<root>'}: expected an object")
    out = dict(base)
    for key, value in user.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"config: {where}: unknown key")
        if isinstance(base[key], dict):
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def stage_seed(seed, name):
    """Per-stage seed derived from the run seed by a fixed hash."""
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def condition_name(frames):
    return "full" if frames is None else str(int(frames))


def parse_condition(text):
    """``"full"`` or a positive frame count."""
    if text in (None, "full"):
        return None
    try:
        n = int(text)
    except (TypeError, ValueError):
        raise ConfigError(f"test condition must be 'full' or a frame count, got {text!r}")
    if n < 1:
        raise ConfigError(f"test condition frame count must be positive, got {n}")
    return n


@dataclass
class PipelineConfig:
    """Validated nested settings; ``raw`` keeps the merged JSON form."""

    raw: dict = field(default_factory=_defaults)

    @classmethod
    def from_dict(cls, d):
        cfg = cls(_merge(_defaults(), d, ""))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as f:
                d = json.load(f)
        except FileNotFoundError:
            raise DependencyError(f"config file {path} not found")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config: {path}: invalid JSON: {e}") from e
        return cls.from_dict(d)

    def to_dict(self):
        return copy.deepcopy(self.raw)

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def seed(self):
        return int(self.raw["seed"])

    def with_seed(self, seed):
        d = self.to_dict()
        d["seed"] = int(seed)
        return PipelineConfig.from_dict(d)

    # typed views -----------------------------------------------------------

    def synth_spec(self):
        return synthcorpus.SynthSpec(seed=stage_seed(self.seed, "synth"), **self.raw["synth"])

    def fbank_config(self):
        return audiofe.FbankConfig(**self.raw["fbank"])

    def model_config(self, num_speakers):
        return CtdnnConfig.from_dict({**self.raw["model"], "num_speakers": num_speakers})

    def train_config(self):
        d = {k: v for k, v in self.raw["train"].items() if k not in ("epochs", "num_speakers")}
        return trainmod.TrainConfig(seed=stage_seed(self.seed, "train"), **d)

    def conditions(self):
        return [parse_condition(c) for c in self.raw["eval"]["test_frames"]]

    def validate(self):
        def section(name, fn):
            try:
                fn()
            except ConfigError as e:
                raise ConfigError(f"config: {name}: {e}") from e
            except (TypeError, ValueError) as e:
                raise ConfigError(f"config: {name}: {e}") from e

        if not isinstance(self.raw["seed"], int) or self.raw["seed"] < 0:
            raise ConfigError("config: seed: must be a non-negative integer")
        section("synth", lambda: self.synth_spec().validate())
        section("fbank", lambda: self.fbank_config().validate(self.raw["synth"]["sample_rate"]))
        section("model", lambda: self.model_config(2).validate())
        section("train", lambda: self.train_config().validate())
        tr = self.raw["train"]
        if not isinstance(tr["epochs"], int) or tr["epochs"] < 1:
            raise ConfigError("config: train.epochs: must be a positive integer")
        if tr["num_speakers"] is not None and (not isinstance(tr["num_speakers"], int)
                                               or tr["num_speakers"] < 2):
            raise ConfigError("config: train.num_speakers: must be null or an integer >= 2")
        sp = self.raw["split"]
        for k in ("train_speakers", "eval_speakers", "enroll_per_speaker"):
            if not isinstance(sp[k], int) or sp[k] < 1:
                raise ConfigError(f"config: split.{k}: must be a positive integer")
        if sp["train_speakers"] < 2:
            raise ConfigError("config: split.train_speakers: need at least 2")
        be = self.raw["backend"]
        bad = [k for k in be["kinds"] if k not in BACKEND_LABELS]
        if bad or not be["kinds"]:
            raise ConfigError(f"config: backend.kinds: unknown or empty {bad or be['kinds']}")
        if not isinstance(be["lda_dim"], int) or be["lda_dim"] < 1:
            raise ConfigError("config: backend.lda_dim: must be a positive integer")
        section("eval.test_frames", self.conditions)
        ef = self.raw["eval"]["enroll_frames"]
        if ef is not None and (not isinstance(ef, int) or ef < 1):
            raise ConfigError("config: eval.enroll_frames: must be null or a positive integer")
        return self


# -- stamps and digests -------------------------------------------------------

def _file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _key(*parts):
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, sort_keys=True, indent=1)
        f.write("\n")


def _read_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


class Pipeline:
    """Stage runner bound to one config and work directory."""

    def __init__(self, cfg, work_dir=None, force=False):
        self.cfg = cfg
        self.root = os.fspath(work_dir if work_dir is not None else cfg["work_dir"])
        self.force = force

    # paths -----------------------------------------------------------------

    def path(self, kind, *parts):
        return os.path.join(self.root, self.cfg["paths"][kind], *parts)

    def _stamp_path(self, name):
        return os.path.join(self.root, "stamps", f"{name}.json")

    def _need(self, path, stage):
        if not os.path.exists(path):
            raise DependencyError(f"missing upstream artifact {path} (run the {stage} stage)")
        return path

    def _fresh(self, name, key, outputs):
        if self.force:
            return False
        sp = self._stamp_path(name)
        if not os.path.exists(sp) or not all(os.path.exists(o) for o in outputs):
            return False
        return _read_json(sp).get("key") == key

    def _stamp(self, name, key):
        os.makedirs(os.path.dirname(self._stamp_path(name)), exist_ok=True)
        _write_json(self._stamp_path(name), {"key": key, "stage": name})

    # stages ----------------------------------------------------------------

    def synth(self):
        out = self.path("corpus", "corpus.lst")
        key = _key("synth", self.cfg["synth"], self.cfg.seed)
        if self._fresh("synth", key, [out]):
            log.info("synth: up to date")
            return out
        spec = self.cfg.synth_spec()
        log.info("synth: %d speakers x %d utterances", spec.num_speakers, spec.utts_per_speaker)
        synthcorpus.generate_corpus(spec, self.path("corpus"))
        self._stamp("synth", key)
        return out

    def fbank(self):
        manifest_path = self._need(self.path("corpus", "corpus.lst"), "synth")
        lists = {n: self.path("features", f"{n}.lst") for n in ("all", "train", "enroll", "test")}
        key = _key("fbank", self.cfg["fbank"], self.cfg["split"], self.cfg.seed,
                   _file_digest(manifest_path))
        if self._fresh("fbank", key, list(lists.values())):
            log.info("fbank: up to date")
            return lists
        fcfg = self.cfg.fbank_config()
        manifest = synthcorpus.read_manifest(manifest_path)
        os.makedirs(self.path("features", "feats"), exist_ok=True)
        rel = {}
        for utt, spk, wav, _ in manifest:
            w = audiofe.read_wav(os.path.join(self.path("corpus"), wav))
            rel[utt] = os.path.join("feats", f"{utt}.feat")
            audiofe.write_features(self.path("features", rel[utt]), audiofe.compute_fbank(w, fcfg))
        log.info("fbank: %d utterances", len(manifest))
        sp = self.cfg["split"]
        tr, ev = synthcorpus.split_corpus(manifest, sp["train_speakers"], sp["eval_speakers"],
                                          seed=stage_seed(self.cfg.seed, "split"),
                                          enroll_per_speaker=sp["enroll_per_speaker"])
        for name, entries in (("all", manifest), ("train", tr), ("enroll", ev.enroll),
                              ("test", ev.test)):
            audiofe.write_feature_manifest(lists[name], [(e[0], e[1], rel[e[0]]) for e in entries])
        self._stamp("fbank", key)
        return lists

    def _features(self, name):
        lst = self._need(self.path("features", f"{name}.lst"), "fbank")
        return [(u, s, self.path("features", p)) for u, s, p in audiofe.read_feature_manifest(lst)]

    def _features_digest(self, name):
        """Digest of every feature file in a list, so edits invalidate downstream stages."""
        return _key(*(_file_digest(p) for _, _, p in self._features(name)))

    def training_subset(self, entries, num_speakers):
        """Entries of ``num_speakers`` speakers drawn by a seeded permutation."""
        speakers = sorted({s for _, s, _ in entries})
        if num_speakers is None or num_speakers >= len(speakers):
            if num_speakers is not None and num_speakers > len(speakers):
                raise ConfigError(f"train.num_speakers={num_speakers} exceeds the "
                                  f"{len(speakers)} training speakers")
            return entries
        rng = np.random.default_rng(stage_seed(self.cfg.seed, "subset"))
        keep = {speakers[i] for i in rng.permutation(len(speakers))[:num_speakers]}
        return [e for e in entries if e[1] in keep]

    def train(self, num_speakers=None, progress=None):
        tcfg = self.cfg["train"]
        n_spk = num_speakers if num_speakers is not None else tcfg["num_speakers"]
        train_list = self._need(self.path("features", "train.lst"), "fbank")
        model_path = self.path("models", "ctdnn.model")
        labels_path = self.path("models", "labels.json")
        log_path = self.path("models", "train.log.jsonl")
        key = _key("train", self.cfg["model"], tcfg, n_spk, self.cfg.seed,
                   _file_digest(train_list), self._features_digest("train"))
        if self._fresh("train", key, [model_path, labels_path]):
            log.info("train: up to date")
            return model_path
        entries = self.training_subset(self._features("train"), n_spk)
        label_map = trainmod.make_label_map(s for _, s, _ in entries)
        mcfg = self.cfg.model_config(len(label_map))
        mcfg.validate()
        ds = trainmod.make_frame_dataset(entries, mcfg, label_map)
        os.makedirs(self.path("models"), exist_ok=True)
        ckpt = self.path("models", "ckpt")
        ckpt_key = self.path("models", "ckpt.key")
        state = None
        if (not self.force and os.path.exists(f"{ckpt}.state.json") and os.path.exists(ckpt_key)
                and open(ckpt_key, encoding="utf-8").read().strip() == key):
            model, state = trainmod.load_checkpoint(ckpt)
            log.info("train: resuming from epoch %d", state.epoch)
        else:
            model = build_ctdnn(mcfg, seed=stage_seed(self.cfg.seed, "init"))
            if os.path.exists(log_path):
                os.remove(log_path)
            with open(ckpt_key, "w", encoding="utf-8") as f:
                f.write(key + "\n")
        log.info("train: %d speakers, %d windows, %d parameters", len(label_map), len(ds),
                 model.num_params())

        def report(st):
            h = st.history[-1]
            log.info("train: epoch %d loss %.4f heldout %s lr %g", h["epoch"], h["loss"],
                     h.get("accuracy"), h["lr"])
            if progress:
                progress(st)

        trainmod.train(model, ds, self.cfg.train_config(), state=state, epochs=tcfg["epochs"],
                       log_path=log_path, checkpoint_prefix=ckpt, progress=report)
        save_model(model, model_path)
        trainmod.save_label_map(labels_path, label_map)
        self._stamp("train", key)
        return model_path

    def _model(self):
        return load_model(self._need(self.path("models", "ctdnn.model"), "train"))

    def _extract_key(self, what, frames=None):
        model_digest = _file_digest(self._need(self.path("models", "ctdnn.model"), "train"))
        lst = self._need(self.path("features", f"{what}.lst"), "fbank")
        return _key("extract", what, frames, self.cfg["eval"]["enroll_frames"], model_digest,
                    _file_digest(lst), self._features_digest(what))

    def extract(self, conditions=None):
        """Train and enrollment d-vectors plus test d-vectors per condition."""
        conditions = self.cfg.conditions() if conditions is None else conditions
        os.makedirs(self.path("vectors"), exist_ok=True)
        model = None

        def get_model():
            nonlocal model
            if model is None:
                model = self._model()
            return model

        out = self.path("vectors", "train.dvec")
        key = self._extract_key("train")
        if not self._fresh("extract-train", key, [out]):
            vecs = []
            for u, s, p in self._features("train"):
                try:
                    vecs.append(dvec.extract_dvector(get_model(), audiofe.read_features(p), u, s))
                except TooShortError:
                    log.warning("extract: training utterance %s too short, skipped", u)
            dvec.write_dvectors(out, vecs)
            self._stamp("extract-train", key)
            log.info("extract: %d training vectors", len(vecs))

        out = self.path("vectors", "enroll.dvec")
        key = self._extract_key("enroll")
        if not self._fresh("extract-enroll", key, [out]):
            ef = self.cfg["eval"]["enroll_frames"]
            by_spk = {}
            for u, s, p in self._features("enroll"):
                f = audiofe.read_features(p)
                if ef is not None:
                    if len(f) < ef:
                        log.warning("extract: enrollment utterance %s has %d < %d frames, "
                                    "skipped", u, len(f), ef)
                        continue
                    f = dvec.truncate_frames(f, ef)
                by_spk.setdefault(s, []).append(f)
            vecs = [dvec.enroll_speaker(get_model(), by_spk[s], s) for s in sorted(by_spk)]
            if not vecs:
                raise EnrollmentError("no enrollment speakers")
            dvec.write_dvectors(out, vecs)
            self._stamp("extract-enroll", key)
            log.info("extract: %d enrollment models", len(vecs))

        for frames in conditions:
            self.extract_test(frames, get_model)

    def extract_test(self, frames, get_model=None):
        name = condition_name(frames)
        out = self.path("vectors", f"test_{name}.dvec")
        info_path = self.path("vectors", f"test_{name}.json")
        key = self._extract_key("test", frames)
        if self._fresh(f"extract-test-{name}", key, [out, info_path]):
            return out
        model = get_model() if get_model else self._model()
        os.makedirs(self.path("vectors"), exist_ok=True)
        vecs, skipped = [], []
        for u, s, p in self._features("test"):
            f = audiofe.read_features(p)
            try:
                if frames is not None:
                    f = dvec.truncate_frames(f, frames)
                vecs.append(dvec.extract_dvector(model, f, u, s))
            except (LengthError, TooShortError) as e:
                log.warning("extract: test utterance %s skipped for condition %s: %s", u, name, e)
                skipped.append(u)
        dvec.write_dvectors(out, vecs)
        _write_json(info_path, {"condition": name, "test_frames": frames, "used": len(vecs),
                                "skipped": len(skipped), "skipped_ids": skipped})
        self._stamp(f"extract-test-{name}", key)
        log.info("extract: condition %s: %d test vectors, %d skipped", name, len(vecs),
                 len(skipped))
        return out

    def backend_fit(self):
        src = self._need(self.path("vectors", "train.dvec"), "extract")
        be = self.cfg["backend"]
        outs = {k: self.path("models", f"backend_{k}.bknd") for k in be["kinds"]}
        key = _key("backend", be, _file_digest(src))
        if self._fresh("backend-fit", key, list(outs.values())):
            log.info("backend-fit: up to date")
            return outs
        vecs = dvec.read_dvectors(src)
        x = np.array([v.values for v in vecs])
        labels = [v.speaker_id for v in vecs]
        n_cls = len(set(labels))
        for kind, path in outs.items():
            b = Backend.fit(kind, x, labels, lda_dim=min(be["lda_dim"], n_cls - 1),
                            length_norm=be["length_norm"])
            save_backend(b, path)
            log.info("backend-fit: %s", kind)
        self._stamp("backend-fit", key)
        return outs

    def _scores_path(self, kind, name):
        return self.path("results", "scores", f"{kind}_{name}.trials")

    def score(self, conditions=None):
        conditions = self.cfg.conditions() if conditions is None else conditions
        os.makedirs(self.path("results", "scores"), exist_ok=True)
        enroll_path = self._need(self.path("vectors", "enroll.dvec"), "extract")
        for frames in conditions:
            name = condition_name(frames)
            test_path = self._need(self.path("vectors", f"test_{name}.dvec"), "extract")
            for kind in self.cfg["backend"]["kinds"]:
                bpath = self._need(self.path("models", f"backend_{kind}.bknd"), "backend-fit")
                out = self._scores_path(kind, name)
                key = _key("score", _file_digest(enroll_path), _file_digest(test_path),
                           _file_digest(bpath))
                if self._fresh(f"score-{kind}-{name}", key, [out]):
                    continue
                enroll = {v.speaker_id: v.values for v in dvec.read_dvectors(enroll_path)}
                tests = dvec.read_dvectors(test_path)
                trials = evalkit.make_trials(sorted(enroll), [(v.utterance_id, v.speaker_id)
                                                              for v in tests])
                scored = evalkit.score_trials(trials, enroll,
                                              {v.utterance_id: v.values for v in tests},
                                              load_backend(bpath))
                evalkit.write_trials(out, scored)
                self._stamp(f"score-{kind}-{name}", key)
                log.info("score: %s %s: %d trials", kind, name, len(scored))

    def eval(self, conditions=None):
        """EER and DET files per condition and backend; returns the summaries."""
        conditions = self.cfg.conditions() if conditions is None else conditions
        os.makedirs(self.path("results", "eval"), exist_ok=True)
        os.makedirs(self.path("results", "det"), exist_ok=True)
        out = {}
        for frames in conditions:
            name = condition_name(frames)
            info = _read_json(self._need(self.path("vectors", f"test_{name}.json"), "extract"))
            summary = {"condition": name, "test_frames": frames, "n_test": info["used"],
                       "n_test_skipped": info["skipped"], "eer": {}}
            for kind in self.cfg["backend"]["kinds"]:
                trials = evalkit.read_trials(self._need(self._scores_path(kind, name), "score"))
                res = evalkit.compute_eer(trials)
                summary["eer"][kind] = res.to_dict()
                pts = evalkit.det_points(trials)
                evalkit.write_det_csv(self.path("results", "det", f"{kind}_{name}.csv"), pts)
                with open(self.path("results", "det", f"{kind}_{name}.svg"), "w",
                          encoding="utf-8") as f:
                    f.write(evalkit.det_svg(pts))
            _write_json(self.path("results", "eval", f"{name}.json"), summary)
            out[name] = summary
            log.info("eval: %s: %s (%d used, %d skipped)", name,
                     ", ".join(f"{BACKEND_LABELS[k]} {v['eer'] * 100:.2f}%"
                               for k, v in summary["eer"].items()),
                     info["used"], info["skipped"])
        return out

    def evaluate_conditions(self, conditions):
        """Extract, score and evaluate just the given test conditions."""
        for frames in conditions:
            self.extract_test(frames)
        self.score(conditions)
        return self.eval(conditions)

    def report(self):
        kinds = self.cfg["backend"]["kinds"]
        conds = [condition_name(c) for c in self.cfg.conditions()]
        evals = {c: _read_json(self._need(self.path("results", "eval", f"{c}.json"), "eval"))
                 for c in conds}
        table = {BACKEND_LABELS[k]: {c: evals[c]["eer"][k]["eer"] for c in conds} for k in kinds}
        train_log = self.path("models", "train.log.jsonl")
        history = []
        if os.path.exists(train_log):
            with open(train_log, encoding="utf-8") as f:
                history = [json.loads(line) for line in f if line.strip()]
        rep = {"seed": self.cfg.seed, "conditions": conds,
               "backends": [BACKEND_LABELS[k] for k in kinds], "eer": table,
               "details": evals, "train_history": history}
        os.makedirs(self.path("results"), exist_ok=True)
        _write_json(self.path("results", "report.json"), rep)
        text = render_table(rep)
        with open(self.path("results", "report.txt"), "w", encoding="utf-8") as f:
            f.write(text)
        return rep

    def run_all(self):
        self.synth()
        self.fbank()
        self.train()
        self.extract()
        self.backend_fit()
        self.score()
        self.eval()
        return self.report()


def render_table(rep):
    """Plain-text EER (%) table: one row per backend, one column per condition."""
    conds = rep["conditions"]
    head = "backend".ljust(8) + "".join(c.rjust(9) for c in conds)
    rows = [head, "-" * len(head)]
    for b in rep["backends"]:
        rows.append(b.ljust(8) + "".join(f"{rep['eer'][b][c] * 100:9.2f}" for c in conds))
    return "EER (%) by test length in frames\n" + "\n".join(rows) + "\n"


__all__ = ["Pipeline", "PipelineConfig", "condition_name", "parse_condition", "render_table",
           "stage_seed"]
