"""Command-line interface.

Exit codes: 0 success, 2 usage or input error (bad flags, schema violations,
unreadable data, mismatched checkpoints), 3 numerical failure (non-finite
loss, failed gradient check).

Config precedence, lowest to highest: built-in defaults, ``--config`` JSON
file, command-line flags.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import jsonschema
from threadpoolctl import threadpool_limits

from . import __version__
from .geometry import InvalidArgumentError
from .pipeline import (
    SHAPES,
    Checkpoint,
    CheckpointError,
    ConfigError,
    FinetuneConfig,
    FormatError,
    InvalidDataError,
    NumericalError,
    TrainConfig,
    finetune,
    load_cloud,
    load_dataset,
    pretrain,
    reconstruct_and_export,
    synth_dataset,
    write_cloud,
    write_manifest,
)
from .pipeline.config import MODEL_KINDS

log = logging.getLogger("serp")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


# -- config schemas -------------------------------------------------------
_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}
_MODEL_CONFIG = {
    "type": "object",
    "properties": {
        "c": _POS_INT, "n": _POS_INT, "d": _POS_INT, "latent": _POS_INT,
        "encoder_depth": _POS_INT, "decoder_depth": _POS_INT, "heads": _POS_INT,
        "patch_widths": {"type": "array", "items": _POS_INT, "minItems": 1},
        "pos_hidden": _POS_INT,
        "global_dim": _POS_INT, "perpoint_dim": _POS_INT, "local_dim": _POS_INT,
        "fusion_widths": {"type": "array", "items": _POS_INT, "minItems": 4, "maxItems": 4},
        "recon_mode": {"enum": ["delta", "cdl2"]},
    },
    "additionalProperties": False,
}

PRETRAIN_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "serp pretrain config",
    "type": "object",
    "properties": {
        "model": {"enum": list(MODEL_KINDS)},
        "epochs": _POS_INT,
        "batch_size": _POS_INT,
        "lr_max": {"type": "number", "exclusiveMinimum": 0},
        "lr_min": {"type": "number", "minimum": 0},
        "weight_decay": {"type": "number", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "num_centers": _POS_INT,
        "patch_size": _POS_INT,
        "sigma": {"type": "number", "minimum": 0},
        "perturb_centers": {"enum": ["random", "fps"]},
        "alpha_cls": {"type": "number", "minimum": 0},
        "alpha_rec": {"type": "number", "minimum": 0},
        "vq_alpha": {"type": "number", "minimum": 0},
        "vq_beta": {"type": "number", "minimum": 0},
        "codebook_size": {"type": "integer", "minimum": 2},
        "model_config": _MODEL_CONFIG,
    },
    "additionalProperties": False,
}

FINETUNE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "serp finetune config",
    "type": "object",
    "properties": {
        "model": {"enum": list(MODEL_KINDS)},
        "epochs": _POS_INT,
        "batch_size": _POS_INT,
        "lr_max": {"type": "number", "exclusiveMinimum": 0},
        "lr_min": {"type": "number", "minimum": 0},
        "weight_decay": {"type": "number", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "head_hidden": _POS_INT,
        "codebook_size": {"type": "integer", "minimum": 2},
        "model_config": _MODEL_CONFIG,
    },
    "additionalProperties": False,
}

SCHEMAS = {"pretrain": PRETRAIN_SCHEMA, "finetune": FINETUNE_SCHEMA}


def _field_path(error):
    return "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in error.absolute_path)


def validate_config(data, schema):
    """Raise UsageError naming the offending field on the first schema violation."""
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise UsageError(f"config error at {_field_path(err)}: {err.message}")


def _load_config_file(path, schema):
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: line {exc.lineno}: {exc.msg}") from None
    validate_config(data, schema)
    return data


def _merge_flags(base, args, names):
    out = dict(base)
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            out[name] = value
    return out


# -- shared helpers -------------------------------------------------------
def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_run_manifest(out_dir, command, argv, config, started, outputs, extra=None):
    """One manifest per run: resolved config, content hashes and replayable argv."""
    out = Path(out_dir)
    config_blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "config_hash": hashlib.sha256(config_blob).hexdigest(),
        "outputs": {name: _sha256(out / name) for name in sorted(outputs)},
        "layout": sorted(outputs),
        "started": started,
        "finished": _now(),
        "version": __version__,
        "threads": os.environ.get("SERP_THREADS"),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _dataset_from_args(args, test_fraction=0.0):
    if args.data and args.synthetic:
        raise UsageError("use either --data or --synthetic, not both")
    if args.data:
        return load_dataset(args.data, points=args.points, seed=args.data_seed)
    recipe = [s for s in (args.synthetic or "sphere,cube,torus").split(",") if s]
    return synth_dataset(recipe, args.per_class, points=args.points, seed=args.data_seed,
                         test_fraction=test_fraction)


def _add_data_flags(p):
    p.add_argument("--data", help="manifest of point-cloud files (path [label [split]] per line)")
    p.add_argument("--synthetic", metavar="SHAPES",
                   help=f"comma-separated synthetic classes from {','.join(SHAPES)} (default when --data is absent)")
    p.add_argument("--per-class", type=int, default=64, help="synthetic clouds per class")
    p.add_argument("--points", type=int, default=1024, help="points per cloud after resampling")
    p.add_argument("--data-seed", type=int, default=0, help="seed for data generation and splits")


# -- commands -------------------------------------------------------------
_PRETRAIN_FLAGS = ["model", "epochs", "batch_size", "lr_max", "lr_min", "weight_decay", "seed",
                   "sigma", "perturb_centers", "codebook_size"]


def cmd_pretrain(args, argv):
    started = _now()
    file_cfg = _load_config_file(args.config, PRETRAIN_SCHEMA)
    if args.full_scale:
        model = args.model or file_cfg.get("model", "transformer")
        base = TrainConfig.full_scale(model).to_dict()
        base.update(file_cfg)
        file_cfg = base
    merged = _merge_flags(file_cfg, args, _PRETRAIN_FLAGS)
    validate_config(merged, PRETRAIN_SCHEMA)
    config = TrainConfig.from_dict(merged)
    dataset = _dataset_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = pretrain(dataset, config, out_dir=out, resume=args.resume)
    outputs = ["checkpoint.bin", "metrics.csv"]
    write_run_manifest(out, "pretrain", argv, config.to_dict(), started, outputs,
                       {"data": dataset.source, "fingerprint": config.fingerprint})
    last = [r for r in result.log if r["split"] == "val"][-1]
    print(f"pretrained {config.model} for {config.epochs} epochs; final val loss {last['loss_total']:.6g}")
    return EXIT_OK


_FINETUNE_FLAGS = ["model", "epochs", "batch_size", "lr_max", "lr_min", "weight_decay", "seed", "head_hidden"]


def cmd_finetune(args, argv):
    started = _now()
    file_cfg = _load_config_file(args.config, FINETUNE_SCHEMA)
    ckpt = None
    if args.checkpoint:
        ckpt = Checkpoint.load(args.checkpoint)
        # architecture comes from the checkpoint unless the config overrides it
        file_cfg.setdefault("model", ckpt.config["model"])
        file_cfg.setdefault("model_config", ckpt.config["model_config"])
        file_cfg.setdefault("codebook_size", ckpt.config.get("codebook_size", 1024))
    merged = _merge_flags(file_cfg, args, _FINETUNE_FLAGS)
    validate_config(merged, FINETUNE_SCHEMA)
    config = FinetuneConfig.from_dict(merged)
    dataset = _dataset_from_args(args, test_fraction=args.test_fraction)
    if not dataset.has_labels:
        raise UsageError("finetuning needs labels: the manifest has no label column")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = finetune(ckpt, dataset, config, out_dir=out)
    report = {
        "model": config.model,
        "init": "scratch" if ckpt is None else "pretrained",
        "checkpoint": None if ckpt is None else str(args.checkpoint),
        "accuracy": result.accuracy,
        "eval_split": result.eval_split,
        "baseline": None,
        "baseline_accuracy": None,
        "gain": None,
    }
    if args.baseline:
        try:
            base = json.loads(Path(args.baseline).read_text())
            report["baseline"] = str(args.baseline)
            report["baseline_accuracy"] = float(base["accuracy"])
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot read baseline report {args.baseline}: {exc}") from None
        report["gain"] = result.accuracy - report["baseline_accuracy"]
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    lines = [f"{'model':<12} {'init':<11} {'accuracy':>9} {'gain':>8}"]
    gain = "" if report["gain"] is None else f"{100 * report['gain']:+.2f}"
    lines.append(f"{config.model:<12} {report['init']:<11} {100 * result.accuracy:>9.2f} {gain:>8}")
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text)
    sys.stdout.write(text)
    write_run_manifest(out, "finetune", argv, config.to_dict(), started,
                       ["finetuned.bin", "metrics.csv", "report.json", "report.txt"],
                       {"data": dataset.source})
    return EXIT_OK


def cmd_reconstruct(args, argv):
    started = _now()
    ckpt = Checkpoint.load(args.checkpoint)
    cloud = load_cloud(args.input)
    metrics = reconstruct_and_export(ckpt, cloud, args.out, sigma=args.sigma, seed=args.seed)
    print(" ".join(f"{k}={v:.6g}" for k, v in metrics.items()))
    write_run_manifest(args.out, "reconstruct", argv,
                       {"checkpoint": str(args.checkpoint), "input": str(args.input),
                        "sigma": args.sigma, "seed": args.seed},
                       started, ["original.ply", "corrupted.ply", "reconstructed.ply", "metrics.txt"])
    return EXIT_OK


def cmd_gradcheck(args, argv):
    from . import gradsuite

    if args.list:
        for name, (_, kind) in gradsuite.REGISTRY.items():
            print(f"{name}\t{kind}")
        return EXIT_OK
    try:
        results = gradsuite.run_suite(args.only or None, seeds=range(args.seeds), tolerance=args.tolerance,
                                      model_tolerance=args.model_tolerance, dtype=args.dtype)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    failed = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status:4} {r.name:28} seed={r.seed} err={r.error:.3e} tol={r.tolerance:.0e} {r.seconds:.2f}s")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rows = [dict(name=r.name, kind=r.kind, seed=r.seed, error=r.error, tolerance=r.tolerance,
                     passed=r.passed) for r in results]
        (out / "gradcheck.json").write_text(json.dumps(rows, indent=2) + "\n")
        write_run_manifest(out, "gradcheck", argv,
                           {"tolerance": args.tolerance, "model_tolerance": args.model_tolerance,
                            "dtype": args.dtype, "seeds": args.seeds, "only": args.only},
                           _now(), ["gradcheck.json"])
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def cmd_gen_data(args, argv):
    started = _now()
    recipe = [s for s in args.classes.split(",") if s]
    dataset = synth_dataset(recipe, args.per_class, points=args.points, seed=args.seed,
                            val_fraction=args.val_fraction, test_fraction=args.test_fraction)
    out = Path(args.out)
    entries = []
    counters = {}
    for cloud, split in zip(dataset.clouds, dataset.split):
        name = recipe[cloud.label]
        i = counters.get(name, 0)
        counters[name] = i + 1
        rel = f"clouds/{name}_{i:04d}.{args.format}"
        write_cloud(out / rel, cloud, args.format)
        entries.append((rel, name, split))
    write_manifest(out / "manifest.txt", entries)
    print(f"wrote {len(entries)} clouds to {out / 'manifest.txt'}")
    write_run_manifest(out, "gen-data", argv,
                       {"classes": recipe, "per_class": args.per_class, "points": args.points,
                        "seed": args.seed, "format": args.format, "val_fraction": args.val_fraction,
                        "test_fraction": args.test_fraction},
                       started, ["manifest.txt"] + [e[0] for e in entries])
    return EXIT_OK


def cmd_schema(args, argv):
    print(json.dumps(SCHEMAS[args.which], indent=2))
    return EXIT_OK


def cmd_replay(args, argv):
    try:
        manifest = json.loads(Path(args.manifest).read_text())
        replay_argv = manifest["argv"]
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read run manifest {args.manifest}: {exc}") from None
    return main(replay_argv)


# -- parser ---------------------------------------------------------------
def build_parser():
    parser = argparse.ArgumentParser(prog="serp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"serp {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--config", help="JSON config file (see `serp schema pretrain`)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr-max", dest="lr_max", type=float)
    p.add_argument("--lr-min", dest="lr_min", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--perturb-centers", dest="perturb_centers", choices=["random", "fps"])
    p.add_argument("--codebook-size", dest="codebook_size", type=int)
    p.add_argument("--full-scale", action="store_true", help="start from full-scale defaults")
    p.add_argument("--resume", help="checkpoint written by an earlier run with the same config")
    _add_data_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised classification finetuning")
    init = p.add_mutually_exclusive_group(required=True)
    init.add_argument("--checkpoint", help="pretrained checkpoint")
    init.add_argument("--scratch", action="store_true", help="randomly initialised encoder")
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--config", help="JSON config file (see `serp schema finetune`)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr-max", dest="lr_max", type=float)
    p.add_argument("--lr-min", dest="lr_min", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--head-hidden", dest="head_hidden", type=int)
    p.add_argument("--test-fraction", type=float, default=0.2,
                   help="held-out test share for synthetic data")
    p.add_argument("--baseline", help="report.json of a run to compute the gain against")
    _add_data_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("reconstruct", help="corrupt a cloud and export the reconstruction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="point-cloud file (xyz, ply, off)")
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, help="noise level (default: the checkpoint's)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("gradcheck", help="finite-difference check of every registered op and loss")
    p.add_argument("--tolerance", type=float, help="max relative error for ops and components")
    p.add_argument("--model-tolerance", type=float, help="max relative error for full model losses")
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    p.add_argument("--seeds", type=int, default=1, help="number of random problems per check")
    p.add_argument("--only", nargs="+", metavar="NAME")
    p.add_argument("--list", action="store_true")
    p.add_argument("--out", help="directory for gradcheck.json and a run manifest")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="write a synthetic labeled dataset and manifest")
    p.add_argument("--classes", default="sphere,cube,torus")
    p.add_argument("--per-class", type=int, default=64)
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["ply", "xyz", "off"], default="ply")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--test-fraction", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("schema", help="print the JSON schema of a config file")
    p.add_argument("which", choices=sorted(SCHEMAS))
    p.set_defaults(func=cmd_schema)

    p = sub.add_parser("replay", help="re-run the command recorded in a run manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return parser


def _thread_limit():
    raw = os.environ.get("SERP_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"SERP_THREADS must be a positive integer, got {raw!r}") from None
    return threadpool_limits(limits=n)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args, argv)
    except NumericalError as exc:
        where = f" (batch dumped to {exc.dump_path})" if exc.dump_path else ""
        print(f"serp: numerical failure: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, FormatError, InvalidDataError, CheckpointError,
            InvalidArgumentError, FileNotFoundError) as exc:
        print(f"serp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
