"""``msav`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

from . import dsp, ftz, gradcheck
from .config import ConfigError, RunConfig
from .data import SCENES, Manifest, ManifestError, SampleRecord, load_features, synth_dataset
from .model import CheckpointError, MultiSourceTransformer, load_model
from .training import evaluate_model, train

log = logging.getLogger("msav")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    """Bad invocation or invalid input that the user can fix; maps to exit code 2."""


def _configure_logging() -> None:
    level = os.environ.get("MSAV_LOG_LEVEL", "info").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- featurize -------------------------------------------------------------------


def parse_wav_name(path: Path) -> tuple[str, str]:
    """``<scene>-<fileid>.wav`` -> (scene, fileid)."""
    scene, sep, file_id = path.stem.partition("-")
    if not sep or not file_id:
        raise UsageError(f"{path.name}: expected a file name of the form <scene>-<fileid>.wav")
    if scene not in SCENES:
        raise UsageError(f"{path.name}: unknown scene {scene!r}; expected one of {SCENES}")
    return scene, file_id


def _clip_spectrograms(path: Path, mel: dsp.MelExtractorConfig) -> list:
    try:
        clip = dsp.read_wav(path)
    except Exception as exc:  # wave.Error, EOFError, OSError ...
        raise RuntimeError(f"cannot read {path}: {type(exc).__name__}: {exc}") from exc
    clip = dsp.resample_linear(dsp.peak_normalize(clip), mel.target_rate)
    return [dsp.log_mel(seg, mel) for seg in dsp.segment(clip)]


def cmd_featurize(args, run: RunConfig) -> int:
    wav_dir, out = Path(args.wav_dir), Path(args.out_dir)
    wavs = sorted(wav_dir.glob("*.wav"))
    if not wavs:
        raise UsageError(f"no .wav files in {wav_dir}")
    named = [(p, *parse_wav_name(p)) for p in wavs]
    stats_path = Path(args.stats_path) if args.stats_path else out / "stats.ftz"
    if args.stats == "in" and not stats_path.exists():
        raise UsageError(f"--stats in: statistics file {stats_path} does not exist")

    specs = {p: _clip_spectrograms(p, run.mel) for p, _, _ in named}
    if args.stats == "fit":
        stats = dsp.fit_bin_stats(s for clip_specs in specs.values() for s in clip_specs)
        stats_path.parent.mkdir(parents=True, exist_ok=True)
        stats.save(stats_path)
    # always standardize with the stored (float32) statistics so fit and in modes agree
    stats = dsp.BinStats.load(stats_path)

    (out / "features").mkdir(parents=True, exist_ok=True)
    pretrained = Path(args.pretrained_dir) if args.pretrained_dir else None
    records = []
    for path, scene, file_id in named:
        parent = f"{scene}-{file_id}"
        for k, spec in enumerate(specs[path]):
            rid = f"{parent}-{k}"
            rel = f"features/{rid}.spectral.ftz"
            ftz.save(out / rel, dsp.standardize(spec, stats))
            extra = {}
            for stream in ("paudio", "pvisual"):
                src = pretrained / f"{rid}.{stream}.ftz" if pretrained else None
                if src is not None and src.exists():
                    extra[f"{stream}_path"] = f"features/{rid}.{stream}.ftz"
                    shutil.copyfile(src, out / extra[f"{stream}_path"])
                else:
                    extra[f"{stream}_path"] = None
            records.append(SampleRecord(rid, parent, SCENES.index(scene), rel, n_frames=spec.shape[0], **extra))
    Manifest(records, args.split).save(out / "manifest.json")
    log.info("featurized %d files into %d records under %s", len(named), len(records), out)
    return EXIT_OK


# -- synth -------------------------------------------------------------------------


def cmd_synth(args, run: RunConfig) -> int:
    if args.classes < 1 or args.files_per_class < 1 or args.segments < 1:
        raise UsageError("--classes, --files-per-class and --segments must be >= 1")
    seed = run.seed if args.seed is None else args.seed
    manifest = synth_dataset(
        args.out, n_classes=args.classes, files_per_class=args.files_per_class,
        segments_per_file=args.segments, seed=seed, split=args.split,
    )
    log.info("wrote %d synthetic records to %s", len(manifest), args.out)
    return EXIT_OK


# -- train / eval --------------------------------------------------------------------


def cmd_train(args, run: RunConfig) -> int:
    train_path = args.train_manifest or run.train_manifest
    val_path = args.val_manifest or run.val_manifest
    out_dir = args.out_dir or run.out_dir
    if not (train_path and val_path and out_dir):
        raise UsageError("train needs --train-manifest, --val-manifest and --out-dir (or config paths)")
    if args.seed is not None:
        run.seed = run.train.seed = args.seed
    if args.epochs is not None:
        run.train.epochs = args.epochs
    train_feats = load_features(Manifest.load(train_path))
    val_feats = load_features(Manifest.load(val_path))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", run.to_dict())
    model = MultiSourceTransformer(run.model, seed=run.seed)
    result = train(train_feats, val_feats, model, run.train, run.mixup, out)
    print(json.dumps(result.report(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_eval(args, run: RunConfig) -> int:
    manifest = Manifest.load(args.manifest)
    if not manifest.records:
        raise UsageError(f"manifest {args.manifest} has no records")
    model = load_model(args.checkpoint)
    feats = load_features(manifest)
    report = evaluate_model(model, feats, run.train.eval_batch_size)
    out = Path(args.out) if args.out else Path(args.checkpoint) / "report.json"
    _write_json(out, report.to_dict())
    print(report.to_json())
    return EXIT_OK


# -- gradcheck ---------------------------------------------------------------------


def cmd_gradcheck(args, run: RunConfig) -> int:
    seed = run.seed if args.seed is None else args.seed
    if args.inject_fault:
        if args.inject_fault not in _known_ops():
            raise UsageError(f"--inject-fault: unknown op {args.inject_fault!r}")
        with gradcheck.inject_fault(args.inject_fault):
            results = gradcheck.run_suite(seed, args.seeds)
    else:
        results = gradcheck.run_suite(seed, args.seeds)
    print(gradcheck.format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def _known_ops() -> set[str]:
    from . import tensor

    return set(tensor.OPS)


# -- parser ------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="msav", description="Multi-source audiovisual scene classifier")
    parser.add_argument("--config", help="JSON run configuration (unknown keys are rejected)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("featurize", help="WAV files -> standardized log-mel FTZ features + manifest")
    p.add_argument("--wav-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stats", choices=("fit", "in"), default="fit")
    p.add_argument("--stats-path", help="bin statistics file (default: <out-dir>/stats.ftz)")
    p.add_argument("--pretrained-dir", help="directory of <id>.paudio.ftz / <id>.pvisual.ftz embeddings")
    p.add_argument("--split", choices=("train", "val"), default="train")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("synth", help="write a synthetic class-anchored dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--files-per-class", type=int, default=2)
    p.add_argument("--segments", type=int, default=10)
    p.add_argument("--seed", type=int)
    p.add_argument("--split", choices=("train", "val"), default="train")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train student + mean teacher")
    p.add_argument("--train-manifest")
    p.add_argument("--val-manifest")
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="report path (default: <checkpoint>/report.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=int, default=20, help="number of seeds per check")
    p.add_argument("--inject-fault", metavar="OP", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    # allow --config after the subcommand too
    for action in sub.choices.values():
        action.add_argument("--config", dest="sub_config", help=argparse.SUPPRESS)
    return parser


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run = RunConfig.load(getattr(args, "sub_config", None) or args.config)
        return args.func(args, run)
    except (UsageError, ConfigError, ManifestError, CheckpointError) as exc:
        print(f"msav {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("unhandled failure", exc_info=True)
        print(f"msav {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
