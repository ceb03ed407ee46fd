"""Command-line entry point.

Commands: generate-data, pretrain, probe, finetune, export-embeddings,
ablate. Global flags: --config <path>, --seed <int>, --force,
--single-threaded; any --section.key=value overrides config-file values.

Exit codes: 0 success, 1 internal failure, 2 user/config error.
"""

from __future__ import annotations

import argparse
import sys
import time
import traceback
from pathlib import Path

import torch

from . import __version__
from .ablation import PROTOCOLS, VARIANTS, run_ablation, write_ablation_csv
from .config import ConfigError, RunConfig, load_config, snapshot
from .dataset import SPLIT_NAMES, build_protocol
from .evaluation import export_embeddings, finetune, linear_probe
from .trainer import ClipDataset, Trainer

EXIT_OK, EXIT_INTERNAL, EXIT_USER = 0, 1, 2

COMMANDS = ("generate-data", "pretrain", "probe", "finetune", "export-embeddings", "ablate")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="viewinv",
        description="Viewpoint-invariant self-supervised video representation learning",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", default=None, help="configuration file path")
    parser.add_argument("--seed", type=int, default=None, help="override data/train/eval seeds")
    parser.add_argument("--force", action="store_true", help="overwrite non-empty outputs")
    parser.add_argument("--single-threaded", action="store_true", help="bit-reproducible mode")
    return parser


def _run_dir(cfg: RunConfig) -> Path:
    t = cfg["train"]
    name = t["run_name"] or time.strftime("%Y%m%d-%H%M%S") + f"-seed{t['seed']}"
    return Path(t["run_root"]) / name


def _write_snapshot(cfg: RunConfig, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    text = f"# viewinv {__version__}\n" + snapshot(cfg)
    (run_dir / "config.ini").write_text(text, encoding="utf-8")


def _require_checkpoint(cfg: RunConfig) -> Path:
    raw = cfg["eval"]["checkpoint"]
    if not raw:
        raise ConfigError("eval.checkpoint must point at a training checkpoint")
    path = Path(raw)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return path


def _results_dir(cfg: RunConfig, checkpoint: Path) -> Path:
    raw = cfg["eval"]["out"]
    if raw:
        return Path(raw)
    return checkpoint.parent.parent / "results"


def cmd_generate_data(cfg: RunConfig, force: bool) -> int:
    data_cfg = cfg.data_config()
    root = Path(data_cfg.root)
    if root.exists() and any(root.iterdir()) and not force:
        raise ConfigError(f"output directory {root} is not empty (pass --force to overwrite)")
    manifests = build_protocol(data_cfg)
    for split in SPLIT_NAMES:
        print(f"{split}: {len(manifests[split])} clips")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig) -> int:
    data_cfg = cfg.data_config()
    run_dir = _run_dir(cfg)
    _write_snapshot(cfg, run_dir)
    try:
        data = ClipDataset(data_cfg.root, "pretrain")
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from exc
    trainer = Trainer(
        cfg.encoder_config(),
        cfg.train_config(),
        data,
        run_dir=run_dir,
        generator_overrides=cfg.generator_overrides(),
    )
    final = trainer.run_training()
    print(f"run directory: {run_dir}")
    print(f"final checkpoint: {final}")
    return EXIT_OK


def _cmd_eval(cfg: RunConfig, mode: str) -> int:
    checkpoint = _require_checkpoint(cfg)
    data_cfg = cfg.data_config()
    eval_cfg = cfg.eval_config()
    out_dir = _results_dir(cfg, checkpoint)
    out_dir.mkdir(parents=True, exist_ok=True)
    runner = linear_probe if mode == "linear" else finetune
    for protocol in PROTOCOLS:
        try:
            result = runner(checkpoint, data_cfg.root, "probe_train", protocol, eval_cfg, protocol)
        except FileNotFoundError as exc:
            raise ConfigError(str(exc)) from exc
        name = ("probe" if mode == "linear" else "finetune") + f"_{protocol}.json"
        (out_dir / name).write_text(result.to_json(), encoding="utf-8")
        print(f"{protocol}: top-1 {result.top1_accuracy:.4f} (n={result.n_test})")
    print(f"results written to {out_dir}")
    return EXIT_OK


def cmd_export(cfg: RunConfig) -> int:
    checkpoint = _require_checkpoint(cfg)
    data_cfg = cfg.data_config()
    split = cfg["eval"]["split"]
    out = cfg["eval"]["out"] or str(_results_dir(cfg, checkpoint) / f"embeddings_{split}.csv")
    try:
        path = export_embeddings(checkpoint, data_cfg.root, split, out)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from exc
    print(f"embeddings written to {path}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    data_cfg = cfg.data_config()
    run_dir = _run_dir(cfg)
    _write_snapshot(cfg, run_dir)
    seeds = tuple(cfg["train"]["ablate_seeds"])
    try:
        results = run_ablation(
            cfg.encoder_config(),
            cfg.train_config(),
            cfg.eval_config(),
            data_cfg.root,
            run_dir,
            seeds=seeds,
            generator_overrides=cfg.generator_overrides(),
        )
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from exc
    path = write_ablation_csv(run_dir / "ablation.csv", results)
    for variant in VARIANTS:
        cells = [results["median"][variant][p] for p in PROTOCOLS]
        rendered = ["  --" if c is None else f"{c:.4f}" for c in cells]
        print(f"{variant:>18}: " + "  ".join(rendered))
    for variant, reason in results["failures"].items():
        print(f"variant {variant} failed: {reason}", file=sys.stderr)
    print(f"report written to {path}")
    return EXIT_OK


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        for flag in extras:
            if not (flag.startswith("--") and "=" in flag and "." in flag):
                raise ConfigError(f"unrecognized argument {flag!r}")
        cfg = load_config(args.config, overrides=extras)
        if args.seed is not None:
            cfg["data"]["seed"] = args.seed
            cfg["train"]["seed"] = args.seed
            cfg["eval"]["seed"] = args.seed
        if args.single_threaded:
            cfg["train"]["single_threaded"] = True
            torch.set_num_threads(1)

        if args.command == "generate-data":
            return cmd_generate_data(cfg, args.force)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "probe":
            return _cmd_eval(cfg, "linear")
        if args.command == "finetune":
            return _cmd_eval(cfg, "finetune")
        if args.command == "export-embeddings":
            return cmd_export(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
