"""``liser`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data validation error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .audio import WavError
from .checkpoint import CheckpointError, load_checkpoint, write_atomic
from .config import ConfigError, build_run_config, read_config_file
from .data import (DataError, LabeledUtterance, _read_table, gen_synth, load_labeled_manifest,
                   load_unlabeled, write_synth)
from .report import build_report
from .train import (ABLATION_KINDS, ABLATION_CONFIGURATIONS, CONFIGURATIONS, FeatureCache,
                    TrainingDiverged, evaluate, run_ablation, run_protocol)

log = logging.getLogger("liser")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def versions() -> dict:
    out = {"liser": __version__, "python": platform.python_version(), "numpy": np.__version__,
           "backend": kernels.BACKEND}
    try:
        import numba

        out["numba"] = numba.__version__
    except ImportError:
        out["numba"] = None
    return out


def write_run_json(out_dir, command: str, config: dict, seed) -> Path:
    path = Path(out_dir) / "run.json"
    doc = {"command": command, "config": config, "seed": seed, "versions": versions()}
    write_atomic(path, json.dumps(doc, indent=2, sort_keys=True))
    return path


# ------------------------------------------------------------------ parsing

def _train_flags(p):
    p.add_argument("--config", help="key = value config file, or a previous run.json")
    p.add_argument("--configuration", choices=CONFIGURATIONS + ABLATION_CONFIGURATIONS)
    p.add_argument("--labeled", dest="labeled_manifest", help="labeled manifest (id,speaker,path,label)")
    p.add_argument("--unlabeled", dest="unlabeled_manifest", help="unlabeled manifest (id,path)")
    p.add_argument("--teachers", dest="teacher_file", help="teacher outputs (JSON lines)")
    p.add_argument("--out", dest="output_dir")
    p.add_argument("--features", dest="feature_cache", help="feature cache written by featurize")
    p.add_argument("--lambda-sd", type=float)
    p.add_argument("--lambda-vd", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--labeled-fraction", type=float)
    p.add_argument("--labeled-per-batch", dest="labeled_per_batch", type=int)
    p.add_argument("--folds", dest="n_folds", type=int)
    p.add_argument("--no-grid", dest="grid_search", action="store_const", const=False)
    p.add_argument("--threads", type=int)


OVERRIDE_KEYS = ("configuration", "labeled_manifest", "unlabeled_manifest", "teacher_file",
                 "output_dir", "lambda_sd", "lambda_vd", "max_epochs", "lr", "seed",
                 "labeled_fraction", "labeled_per_batch", "n_folds", "grid_search", "threads")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="liser", description="Distilled speech emotion recognition student.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("featurize", help="cache log-Mel eval windows for manifests")
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="cross-validated training of one configuration")
    _train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="also write report.json and run.json here")

    p = sub.add_parser("ablate", help="run an ablation study")
    _train_flags(p)
    p.add_argument("--kind", choices=ABLATION_KINDS)
    p.add_argument("--fractions", help="comma-separated labeled fractions")

    p = sub.add_parser("report", help="tables and plots from completed run dirs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out")
    p.add_argument("--format", choices=("text", "json"), default="text")

    p = sub.add_parser("gen-synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-labeled", type=int, default=100)
    p.add_argument("--n-unlabeled", type=int, default=200)
    p.add_argument("--speech-classes", type=int, default=4)
    p.add_argument("--video-classes", type=int, default=3)
    p.add_argument("--teacher-noise", type=float, default=0.3)
    p.add_argument("--speakers", type=int, default=10)
    p.add_argument("--seed", type=int)
    return parser


# ----------------------------------------------------------------- commands

def _resolve(args):
    raw = read_config_file(args.config) if args.config else {}
    overrides = {k: getattr(args, k) for k in OVERRIDE_KEYS}
    # keys that belong to a subcommand rather than the run configuration
    extra = {k: raw.pop(k) for k in ("feature_cache", "kind", "fractions") if k in raw}
    cache_path = args.feature_cache or extra.get("feature_cache")
    run = build_run_config(raw, overrides)
    if run.output_dir is None:
        raise ConfigError("no output directory (set output_dir or pass --out)")
    if run.threads is not None and run.threads < 1:
        raise ConfigError("threads must be >= 1")
    run.validate_paths()
    if cache_path and not Path(cache_path).is_file():
        raise DataError(f"missing input: feature_cache {cache_path} does not exist")
    return run, cache_path, extra


def _load_inputs(run):
    labeled, names = load_labeled_manifest(run.labeled_manifest)
    unlabeled = []
    n_video = run.video_classes or 7
    if run.train.uses_teachers:
        unlabeled = load_unlabeled(run.unlabeled_manifest, run.teacher_file, len(names), run.video_classes)
        n_video = unlabeled[0].video_teacher.shape[1] if unlabeled else n_video
    return labeled, names, unlabeled, n_video


def _threads(run) -> int:
    return run.threads or os.cpu_count() or 1


def cmd_train(args) -> int:
    run, cache_path, _ = _resolve(args)
    config = run.to_dict()
    if cache_path:
        config["feature_cache"] = str(cache_path)
    write_run_json(run.output_dir, "train", config, run.train.seed)
    labeled, names, unlabeled, n_video = _load_inputs(run)
    cache = FeatureCache.load(cache_path) if cache_path else None
    rep = run_protocol(run.train, labeled, unlabeled, names, n_video, run.output_dir,
                       run.grid_search, _threads(run), cache=cache)
    print(f"{run.train.configuration}: UAR {rep.mean_uar:.4f} WAR {rep.mean_war:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    run, cache_path, extra = _resolve(args)
    kind = args.kind or extra.get("kind")
    if kind not in ABLATION_KINDS:
        raise UsageError(f"--kind must be one of {', '.join(ABLATION_KINDS)}")
    fractions = extra.get("fractions")
    if args.fractions:
        try:
            fractions = [float(x) for x in args.fractions.split(",")]
        except ValueError:
            raise UsageError(f"bad --fractions {args.fractions!r}") from None
    fractions = tuple(fractions) if fractions else None
    config = run.to_dict()
    config.update(kind=kind, fractions=list(fractions) if fractions else None,
                  feature_cache=str(cache_path) if cache_path else None)
    write_run_json(run.output_dir, "ablate", config, run.train.seed)
    labeled, names, unlabeled, n_video = _load_inputs(run)
    cache = FeatureCache.load(cache_path) if cache_path else None
    kw = {"fractions": fractions} if fractions else {}
    summary = run_ablation(kind, run.train, labeled, unlabeled, names, n_video, run.output_dir,
                           run.grid_search, threads=_threads(run), cache=cache, **kw)
    for name, m in summary["mean"].items():
        print(f"{name}: UAR {m['uar']:.4f} WAR {m['war']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, header = load_checkpoint(args.checkpoint)
    items, _ = load_labeled_manifest(args.manifest, class_names=header["class_names"])
    rep = evaluate(params, items)
    doc = rep.to_dict()
    text = json.dumps(doc, indent=2)
    if args.out:
        write_atomic(Path(args.out) / "report.json", text)
        write_run_json(args.out, "eval", {"checkpoint": str(Path(args.checkpoint).resolve()),
                                          "manifest": str(Path(args.manifest).resolve())}, None)
    print(text)
    return EXIT_OK


def _manifest_items(path) -> list:
    path = Path(path)
    rows = _read_table(path)
    if not rows or not {"id", "path"} <= set(rows[0]):
        raise DataError(f"{path}: manifest must be non-empty with id and path columns")
    items = []
    for line, r in enumerate(rows, start=2):
        audio = (path.parent / r["path"].strip()).resolve()
        if not audio.is_file():
            raise DataError(f"{path}:{line}: missing audio file {audio}")
        items.append(LabeledUtterance(r["id"].strip(), r.get("speaker", "").strip(), audio, -1))
    return items


def cmd_featurize(args) -> int:
    items, seen = [], set()
    for m in args.manifest:
        for u in _manifest_items(m):
            if u.id in seen:
                raise DataError(f"{m}: id {u.id!r} appears in more than one manifest")
            seen.add(u.id)
            items.append(u)
    out = Path(args.out)
    write_run_json(out, "featurize", {"manifests": [str(Path(m).resolve()) for m in args.manifest]}, None)
    FeatureCache().save(out / "features.lisr", items)
    print(f"wrote {len(items)} utterances to {out / 'features.lisr'}")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        res = build_report(args.runs, args.out)
    except ValueError as e:
        raise DataError(str(e)) from None
    if args.format == "json":
        print(json.dumps({"rows": res["rows"], "skipped": res["skipped"]}, indent=2))
    else:
        sys.stdout.write(res["table"])
    if args.out:
        write_run_json(args.out, "report", {"runs": [str(Path(r).resolve()) for r in args.runs]}, None)
    return EXIT_OK


def cmd_gen_synth(args) -> int:
    seed = args.seed
    if seed is None:
        try:
            seed = int(os.environ.get("LISER_SEED") or 0)
        except ValueError:
            raise UsageError("LISER_SEED must be an integer") from None
    data = gen_synth(args.n_labeled, args.n_unlabeled, args.speech_classes, args.video_classes,
                     args.teacher_noise, seed, args.speakers)
    paths = write_synth(data, args.out)
    cfg = {k: getattr(args, k) for k in ("n_labeled", "n_unlabeled", "speech_classes",
                                         "video_classes", "teacher_noise", "speakers")}
    write_run_json(args.out, "gen-synth", cfg, seed)
    for k, v in paths.items():
        print(f"{k}: {v}")
    return EXIT_OK


COMMANDS = {"featurize": cmd_featurize, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "report": cmd_report, "gen-synth": cmd_gen_synth}


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, WavError, CheckpointError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
