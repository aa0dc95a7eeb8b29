"""Command-line entry point: generate-data, train, evaluate, traverse,
export-latents, selftest.

Every command writes a run manifest (resolved config, seed, package version,
timestamps) into its output directory. Exit codes: 0 success, 1 configuration
or usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys
import traceback
from pathlib import Path

from . import __version__
from .config import ConfigError, ExperimentConfig, validate_config

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _write_manifest(out_dir: Path, command: str, argv: list[str], cfg: ExperimentConfig | None, started: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": argv,
        "version": __version__,
        "seed": cfg.seed if cfg is not None else None,
        "config": (
            {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.values.items()} if cfg is not None else None
        ),
        "started": started,
        "finished": datetime.datetime.now().isoformat(timespec="seconds"),
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=1))


def _load_split(data_root, split, num_classes):
    from .data import load_dataset, split_samples
    from .training import to_arrays

    samples = split_samples(load_dataset(data_root, num_classes), split)
    if not samples:
        raise ConfigError([f"split {split!r} is empty under {data_root}"])
    return to_arrays(samples)


def _cmd_generate_data(args, argv) -> int:
    from .synthetic import generate

    cfg = validate_config(args.config)
    out = Path(args.out) if args.out else Path(cfg.data_root)
    started = datetime.datetime.now().isoformat(timespec="seconds")
    manifest = generate(cfg.generator_config(), out)
    _write_manifest(out, "generate-data", argv, cfg, started)
    print(f"dataset written to {out} ({manifest.name})")
    return EXIT_OK


def _cmd_train(args, argv) -> int:
    from .training import train_source_accessible, train_source_free_stage1, train_source_free_stage2

    if args.mode == "sf2" and not args.resume:
        raise ConfigError(["train --mode sf2 requires --resume <stage-1 checkpoint>"])
    cfg = validate_config(args.config, require_data=True)
    if args.deterministic:
        cfg.values["deterministic"] = True

    out_dir = Path(args.out) if args.out else Path(cfg.output_root) / args.mode
    started = datetime.datetime.now().isoformat(timespec="seconds")
    k = cfg.num_classes
    if args.mode == "sa":
        best = train_source_accessible(
            cfg,
            _load_split(cfg.data_root, "source_train", k),
            _load_split(cfg.data_root, "target_train", k),
            _load_split(cfg.data_root, "target_val", k),
            out_dir,
        )
    elif args.mode == "sf1":
        best = train_source_free_stage1(
            cfg,
            _load_split(cfg.data_root, "source_train", k),
            _load_split(cfg.data_root, "source_val", k),
            out_dir,
        )
    else:
        best = train_source_free_stage2(
            cfg,
            _load_split(cfg.data_root, "target_train", k),
            _load_split(cfg.data_root, "target_val", k),
            args.resume,
            out_dir,
        )
    _write_manifest(out_dir, f"train:{args.mode}", argv, cfg, started)
    print(f"best checkpoint: {best}")
    return EXIT_OK


def _cmd_evaluate(args, argv) -> int:
    from .data import load_dataset, split_samples
    from .evaluation import evaluate
    from .training import load_checkpoint

    model, _ = load_checkpoint(args.ckpt)
    samples = split_samples(load_dataset(args.data), args.split)
    if not samples:
        raise ConfigError([f"split {args.split!r} is empty under {args.data}"])
    started = datetime.datetime.now().isoformat(timespec="seconds")
    report = evaluate(model, samples, out_dir=args.out)
    _write_manifest(Path(args.out), "evaluate", argv, None, started)
    print(report.to_text())
    return EXIT_OK


def _cmd_traverse(args, argv) -> int:
    from .data import load_dataset, split_samples
    from .evaluation import traverse_inter_basis, traverse_inter_image
    from .training import load_checkpoint, to_arrays

    model, _ = load_checkpoint(args.ckpt)
    out_dir = Path(args.out)
    started = datetime.datetime.now().isoformat(timespec="seconds")
    if args.kind == "inter-image":
        if not args.data:
            raise ConfigError(["traverse inter-image requires --data"])
        split = to_arrays(split_samples(load_dataset(args.data), args.split))
        n = len(split)
        ia, ib = args.first % n, args.second % n
        traverse_inter_image(
            model, split.images[ia], split.images[ib], args.steps, out_dir, tag=f"{ia}_{ib}"
        )
    else:
        traverse_inter_basis(model, args.first, args.second, args.steps, out_dir)
    _write_manifest(out_dir, f"traverse:{args.kind}", argv, None, started)
    print(f"traversal written to {out_dir}")
    return EXIT_OK


def _cmd_export_latents(args, argv) -> int:
    from .data import load_dataset, split_samples
    from .evaluation import export_latents
    from .training import load_checkpoint

    model, _ = load_checkpoint(args.ckpt)
    samples = []
    for split in args.splits.split(","):
        samples.extend(split_samples(load_dataset(args.data), split.strip()))
    if not samples:
        raise ConfigError([f"no samples in splits {args.splits!r} under {args.data}"])
    started = datetime.datetime.now().isoformat(timespec="seconds")
    csv_path, plot_path, _ = export_latents(model, samples, args.out)
    _write_manifest(Path(args.out), "export-latents", argv, None, started)
    print(f"latents: {csv_path}\nplot: {plot_path}")
    return EXIT_OK


def _cmd_selftest(args, argv) -> int:
    from .selftest import run_selftest

    return EXIT_OK if run_selftest(verbose=True) else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atlasmix", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write the synthetic two-domain benchmark")
    p.add_argument("--config", default=None, help="flat YAML config (defaults apply if omitted)")
    p.add_argument("--out", default=None, help="dataset directory (default: config data_root)")
    p.set_defaults(fn=_cmd_generate_data)

    p = sub.add_parser("train", help="train in sa, sf1, or sf2 mode")
    p.add_argument("--mode", required=True, choices=["sa", "sf1", "sf2"])
    p.add_argument("--config", default=None)
    p.add_argument("--resume", default=None, help="stage-1 checkpoint (required for sf2)")
    p.add_argument("--out", default=None, help="run directory (default: output_root/<mode>)")
    p.add_argument("--deterministic", action="store_true", help="force seed-stable single-threaded execution")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("evaluate", help="metrics for a checkpoint on a labeled split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="target_test")
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("traverse", help="decode a geodesic path between weights")
    p.add_argument("kind", choices=["inter-image", "inter-basis"])
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None, help="dataset root (inter-image only)")
    p.add_argument("--split", default="target_test")
    p.add_argument("--first", type=int, default=0, help="sample index or 1-indexed basis id")
    p.add_argument("--second", type=int, default=1)
    p.add_argument("--steps", type=int, default=7)
    p.set_defaults(fn=_cmd_traverse)

    p = sub.add_parser("export-latents", help="per-image composition weights + PCA scatter")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--splits", default="source_train,target_train")
    p.set_defaults(fn=_cmd_export_latents)

    p = sub.add_parser("selftest", help="run the analytic oracle suite")
    p.set_defaults(fn=_cmd_selftest)
    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG
    try:
        return args.fn(args, argv)
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    except Exception:
        traceback.print_exc()
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run(sys.argv[1:]))
