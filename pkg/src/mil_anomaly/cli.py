"""Command-line entry point: ``mil-anomaly <command> ...``.

Exit status is 0 on success, 1 for invalid input (bad flags, malformed
corpus, bad config) and 2 for runtime failures (I/O, divergence).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import __version__
from .corpus import (
    DEFAULT_SEGMENTS,
    CorpusError,
    VideoRecord,
    concat_features,
    frame_labels,
    load_clip_features,
    load_manifest,
    pool_segments,
    summarize,
    write_clip_features,
    write_manifest,
)
from .evaluator import EvaluationError, evaluate, expand_scores_to_frames, export_series, predict_video
from .objective import LossConfig
from .optim import ADADELTA_DEFAULTS, ADAM_DEFAULTS, OptimizerError
from .scorer import DEFAULT_HIDDEN, ScorerError, load_checkpoint
from .synth import SynthSpec, gradcheck, generate
from .trainer import TrainConfig, TrainingError, resume, train

log = logging.getLogger("mil_anomaly")

VALIDATION_ERRORS = (CorpusError, ScorerError, OptimizerError, EvaluationError, ValueError, KeyError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def add_argument(self, *args, **kwargs):
        # the defaults formatter only annotates flags that have help text
        kwargs.setdefault("help", "(default: %(default)s)")
        return super().add_argument(*args, **kwargs)

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="single source of all randomness (default: %(default)s)")
    p.add_argument("--jobs", type=int, default=1, help="parallel video scoring threads (default: %(default)s)")
    p.add_argument("--log-level", default="INFO", help="logging level (default: %(default)s)")


def _add_segments(p):
    p.add_argument("--segments", type=int, default=DEFAULT_SEGMENTS,
                   help="segments per video bag (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="mil-anomaly", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="validate a corpus and print statistics", formatter_class=fmt)
    p.add_argument("--manifest", required=True)
    p.add_argument("--dim", type=int, default=None, help="expected feature width")
    _add_segments(p)
    _add_common(p)

    p = sub.add_parser("train", help="train a scorer", formatter_class=fmt)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", default=None, help="training checkpoint to continue from")
    p.add_argument("--iterations", type=int, default=100_000)
    p.add_argument("--pairs-per-step", type=int, default=1)
    p.add_argument("--optimizer", choices=["adam", "adadelta"], default="adam")
    p.add_argument("--lr", type=float, default=None,
                   help=f"learning rate (adam {ADAM_DEFAULTS['learning_rate']}, "
                        f"adadelta {ADADELTA_DEFAULTS['learning_rate']})")
    p.add_argument("--beta1", type=float, default=ADAM_DEFAULTS["beta1"], help="adam")
    p.add_argument("--beta2", type=float, default=ADAM_DEFAULTS["beta2"], help="adam")
    p.add_argument("--rho", type=float, default=ADADELTA_DEFAULTS["rho"], help="adadelta")
    p.add_argument("--epsilon", type=float, default=None,
                   help=f"(adam {ADAM_DEFAULTS['epsilon']:g}, adadelta {ADADELTA_DEFAULTS['epsilon']:g})")
    p.add_argument("--loss", choices=["original", "mean_normal"], default="original")
    p.add_argument("--lambda1", type=float, default=LossConfig.lambda1, help="smoothness weight")
    p.add_argument("--lambda2", type=float, default=LossConfig.lambda2, help="sparsity weight")
    p.add_argument("--lambda3", type=float, default=LossConfig.lambda3, help="weight-norm weight")
    p.add_argument("--dropout", type=float, default=0.6)
    p.add_argument("--hidden", type=int, nargs="+", default=list(DEFAULT_HIDDEN))
    p.add_argument("--checkpoint-every", type=int, default=0, help="0 writes only final.ckpt")
    _add_segments(p)
    _add_common(p)

    p = sub.add_parser("eval", help="frame-level AUC, false alarm rate and score series", formatter_class=fmt)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5, help="false-alarm score threshold")
    _add_segments(p)
    _add_common(p)

    p = sub.add_parser("predict", help="per-frame score series for one video", formatter_class=fmt)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--video-id", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    _add_segments(p)
    _add_common(p)

    p = sub.add_parser("gradcheck", help="backprop vs central differences", formatter_class=fmt)
    p.add_argument("--dim", type=int, default=5)
    p.add_argument("--configs", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    _add_common(p)

    p = sub.add_parser("synth", help="generate a synthetic corpus", formatter_class=fmt)
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=SynthSpec.dim)
    p.add_argument("--normal", type=int, default=SynthSpec.n_videos_normal)
    p.add_argument("--anomalous", type=int, default=SynthSpec.n_videos_anom)
    p.add_argument("--min-anomalous-segments", type=int, default=SynthSpec.anomalous_segments[0])
    p.add_argument("--max-anomalous-segments", type=int, default=SynthSpec.anomalous_segments[1])
    p.add_argument("--max-runs", type=int, default=SynthSpec.max_runs)
    p.add_argument("--separation", type=float, default=SynthSpec.separation, help="anomaly shift in noise sigmas")
    p.add_argument("--noise-sigma", type=float, default=SynthSpec.noise_sigma)
    p.add_argument("--noisy-normal-fraction", type=float, default=SynthSpec.noisy_normal_fraction)
    p.add_argument("--noisy-shift", type=float, default=SynthSpec.noisy_shift)
    p.add_argument("--tta-variants", type=int, default=SynthSpec.tta_variants)
    _add_segments(p)
    _add_common(p)

    p = sub.add_parser("concat", help="concatenate aligned feature corpora", formatter_class=fmt)
    p.add_argument("--manifests", nargs="+", required=True, help="manifests in concatenation order")
    p.add_argument("--out", required=True)
    _add_common(p)
    return parser


def _write_run_manifest(out_dir: str, args, config: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    doc = {
        "command": args.command,
        "tool_version": __version__,
        "seed": args.seed,
        "config": config,
        "argv": {k: v for k, v in sorted(vars(args).items()) if k not in ("log_level", "jobs")},
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _cmd_ingest(args) -> int:
    manifest = load_manifest(args.manifest, args.dim)
    for rec in manifest.records:
        for k in range(len(rec.feature_paths)):
            matrix = load_clip_features(manifest.resolve(rec.feature_paths[k]), manifest.dim)
            pool_segments(matrix, args.segments)
    print(json.dumps(summarize(manifest), indent=2, sort_keys=True))
    return 0


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        n_segments=args.segments,
        iterations=args.iterations,
        pairs_per_step=args.pairs_per_step,
        optimizer=args.optimizer,
        learning_rate=args.lr,
        beta1=args.beta1 if args.optimizer == "adam" else None,
        beta2=args.beta2 if args.optimizer == "adam" else None,
        rho=args.rho if args.optimizer == "adadelta" else None,
        epsilon=args.epsilon,
        loss=LossConfig(args.loss, args.lambda1, args.lambda2, args.lambda3),
        seed=args.seed,
        dropout_rate=args.dropout,
        checkpoint_every=args.checkpoint_every,
        hidden=tuple(args.hidden),
    )


def _cmd_train(args) -> int:
    cfg = _train_config(args)
    manifest = load_manifest(args.manifest, check_train=True)
    _write_run_manifest(args.out, args, cfg.resolved())
    if args.resume:
        resume(args.resume, manifest, cfg, out_dir=args.out)
    else:
        train(manifest, cfg, out_dir=args.out)
    log.info("wrote %s", os.path.join(args.out, "final.ckpt"))
    return 0


def _cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    params = load_checkpoint(args.checkpoint)
    _write_run_manifest(args.out, args, {"n_segments": args.segments, "threshold": args.threshold})
    report = evaluate(params, manifest, args.segments, args.threshold, jobs=args.jobs)
    export_series(report, args.out)
    print(json.dumps(report.summary(), sort_keys=True))
    return 0


def _cmd_predict(args) -> int:
    manifest = load_manifest(args.manifest)
    params = load_checkpoint(args.checkpoint)
    record = manifest.by_id(args.video_id)
    scores = predict_video(params, record, manifest, args.segments)
    frames = expand_scores_to_frames(scores, record.n_frames)
    labels = frame_labels(record)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    with open(args.out, "w") as fh:
        fh.write("frame,score,label\n")
        for f, (s, y) in enumerate(zip(frames, labels)):
            fh.write(f"{f},{float(s)!r},{int(y)}\n")
    return 0


def _cmd_gradcheck(args) -> int:
    err = gradcheck(dim=args.dim, seed=args.seed, n_configs=args.configs)
    ok = err < args.tolerance
    print(f"max relative error {err:.3e} over {args.configs} configurations: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 2


def _cmd_synth(args) -> int:
    spec = SynthSpec(
        dim=args.dim,
        n_videos_normal=args.normal,
        n_videos_anom=args.anomalous,
        n_segments=args.segments,
        anomalous_segments=(args.min_anomalous_segments, args.max_anomalous_segments),
        max_runs=args.max_runs,
        separation=args.separation,
        noise_sigma=args.noise_sigma,
        noisy_normal_fraction=args.noisy_normal_fraction,
        noisy_shift=args.noisy_shift,
        tta_variants=args.tta_variants,
        seed=args.seed,
    )
    _write_run_manifest(args.out, args, {k: getattr(spec, k) for k in spec.__dataclass_fields__})
    print(generate(spec, args.out))
    return 0


def _cmd_concat(args) -> int:
    manifests = [load_manifest(m) for m in args.manifests]
    _write_run_manifest(args.out, args, {"inputs": list(args.manifests)})
    feat_dir = os.path.join(args.out, "features")
    os.makedirs(feat_dir, exist_ok=True)
    records = []
    for rec in manifests[0].records:
        aligned = [m.by_id(rec.video_id) for m in manifests]
        n_variants = min(len(r.feature_paths) for r in aligned)
        paths = []
        for k in range(n_variants):
            mats = [load_clip_features(m.resolve(r.feature_paths[k]), m.dim) for m, r in zip(manifests, aligned)]
            rel = os.path.join("features", f"{rec.video_id}" + (f"_tta{k}" if k else "") + ".csv")
            write_clip_features(os.path.join(args.out, rel), concat_features(mats))
            paths.append(rel)
        records.append(VideoRecord(rec.video_id, rec.split, rec.label, rec.n_frames, rec.intervals, tuple(paths)))
    path = os.path.join(args.out, "manifest.csv")
    write_manifest(path, records)
    print(path)
    return 0


COMMANDS = {
    "ingest": _cmd_ingest,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "gradcheck": _cmd_gradcheck,
    "synth": _cmd_synth,
    "concat": _cmd_concat,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
