"""Command-line entry point: ``ctdnn-sv <subcommand> [options]``.

Every subcommand accepts ``--config`` (JSON), ``--seed``, ``--work-dir``,
``--force`` and ``--threads``. On failure a single JSON line
``{"error": <type>, "message": <text>}`` is written to stderr and the exit
status is nonzero.
"""
import argparse
import json
import logging
import sys

from .errors import CtdnnSvError, DependencyError
from .pipeline import Pipeline, PipelineConfig, parse_condition, render_table

EXIT_ERROR = 2

COMMANDS = ("synth", "fbank", "train", "extract", "backend-fit", "score", "eval", "report",
            "run-all")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (unknown keys are rejected)")
    common.add_argument("--seed", type=int, help="run seed (overrides the config's seed)")
    common.add_argument("--work-dir", help="work directory (overrides the config's work_dir)")
    common.add_argument("--force", action="store_true", help="re-run stages that are up to date")
    common.add_argument("--threads", type=int, default=1,
                        help="BLAS threads (default 1, required for bitwise reproducibility)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    p = argparse.ArgumentParser(prog="ctdnn-sv", description="CT-DNN d-vector speaker "
                                "verification on a synthetic or user corpus")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the synthetic corpus")
    sub.add_parser("fbank", parents=[common], help="compute Fbank features and the data split")
    t = sub.add_parser("train", parents=[common], help="train the CT-DNN")
    t.add_argument("--num-speakers", type=int, help="train on a seeded subset of speakers")
    t.add_argument("--epochs", type=int, help="override train.epochs")
    for name, hlp in (("extract", "extract d-vectors"), ("score", "score trial lists"),
                      ("eval", "compute EER and DET curves")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("--test-frames", nargs="+", metavar="N",
                       help="test conditions ('full' or frame counts) instead of the config's")
    sub.add_parser("backend-fit", parents=[common], help="fit cosine/LDA/PLDA backends")
    sub.add_parser("report", parents=[common], help="write the EER table to report.json")
    sub.add_parser("run-all", parents=[common], help="run every stage in order")
    return p


def load_config(args):
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig.from_dict({})
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def run(args):
    cfg = load_config(args)
    if getattr(args, "epochs", None) is not None:
        d = cfg.to_dict()
        d["train"]["epochs"] = args.epochs
        cfg = PipelineConfig.from_dict(d)
    pipe = Pipeline(cfg, work_dir=args.work_dir, force=args.force)
    conds = None
    if getattr(args, "test_frames", None):
        conds = [parse_condition(c) for c in args.test_frames]
    cmd = args.command
    if cmd == "synth":
        pipe.synth()
    elif cmd == "fbank":
        pipe.fbank()
    elif cmd == "train":
        pipe.train(num_speakers=args.num_speakers)
    elif cmd == "extract":
        pipe.extract(conds)
    elif cmd == "backend-fit":
        pipe.backend_fit()
    elif cmd == "score":
        pipe.score(conds)
    elif cmd == "eval":
        res = pipe.evaluate_conditions(conds) if conds else pipe.eval()
        print(json.dumps(res, sort_keys=True, indent=1))
    elif cmd == "report":
        print(render_table(pipe.report()), end="")
    elif cmd == "run-all":
        print(render_table(pipe.run_all()), end="")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print(json.dumps({"error": "UsageError", "message": "--threads must be >= 1"}),
              file=sys.stderr)
        return EXIT_ERROR
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            run(args)
    except (CtdnnSvError, OSError) as e:
        err = {"error": type(e).__name__, "message": str(e)}
        if isinstance(e, OSError) and not isinstance(e, DependencyError) and e.filename:
            err["file"] = e.filename
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
