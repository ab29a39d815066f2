"""Command-line interface: synth, train, eval, report.

Exit codes: 0 success, 2 training divergence, 3 configuration or input
error. Every command writes a provenance JSON into its output directory so
a run can be reproduced from config plus seed alone.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

from . import __version__
from .config import RunConfig, load_run_config
from .data import (UnlabeledDataset, load_manifest, mix_datasets,
                   synth_generate)
from .errors import (CheckpointError, ConfigError, DivergenceError,
                     ManifestError, SingleClassError)
from .evaluation import build_report, gap_curve, score, write_scores_csv
from .training import (EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_OK, TrainConfig,
                       fit, load_checkpoint, resume)

log = logging.getLogger(__name__)


class CLIUsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; here that status is
    # reserved for divergence, so usage problems raise instead.
    def error(self, message):
        raise CLIUsageError(message)


def _write_provenance(out_dir: Path, command: str, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "provenance.json", "w", encoding="utf-8") as fh:
        json.dump({"command": command, "version": __version__, **payload},
                  fh, indent=2, default=str)


def cmd_synth(args) -> int:
    out_dir = Path(args.out)
    result = synth_generate(n_bonafide=args.bonafide, n_attacks=args.attacks,
                            seed=args.seed, out_dir=out_dir, side=args.side)
    _write_provenance(out_dir, "synth", {
        "seed": args.seed, "bonafide": args.bonafide, "attacks": args.attacks,
        "side": args.side})
    print(f"wrote {len(result.train_manifest)} train, "
          f"{len(result.test_manifest)} test, "
          f"{len(result.pool_manifest)} contamination-pool records to {out_dir}")
    return EXIT_OK


def _resolve_run_config(args) -> RunConfig:
    if args.config is not None:
        cfg = load_run_config(args.config)
    else:
        cfg = RunConfig(train=TrainConfig())
    train_overrides = {}
    if args.seed is not None:
        train_overrides["seed"] = args.seed
    if args.no_spl:
        train_overrides["spl_enabled"] = False
    for name in ("epochs", "warmup_epochs", "batch_size", "learning_rate"):
        value = getattr(args, name, None)
        if value is not None:
            train_overrides[name] = value
    if train_overrides:
        cfg.train = dataclasses.replace(cfg.train, **train_overrides)
    if args.train_manifest is not None:
        cfg.train_manifest = Path(args.train_manifest)
    if getattr(args, "contaminant_manifest", None) is not None:
        cfg.contaminant_manifest = Path(args.contaminant_manifest)
    if getattr(args, "contamination_ratio", None) is not None:
        cfg.contamination_ratio = args.contamination_ratio
    if getattr(args, "input_side", None) is not None:
        cfg.input_side = args.input_side
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    cfg = _resolve_run_config(args)
    if args.out is None and cfg.out_dir is None:
        raise ConfigError("missing required key: out (flag --out or [data] out_dir)")
    out_dir = Path(args.out) if args.out is not None else cfg.out_dir

    if args.resume is not None:
        payload = load_checkpoint(args.resume)
        stored = TrainConfig.from_dict(payload["config"])
        dataset = _training_dataset(cfg, stored.seed)
        _write_provenance(out_dir, "train", {
            "resumed_from": str(args.resume), "config": stored.to_dict()})
        result = resume(payload, dataset, out_dir=out_dir)
    else:
        if cfg.train_manifest is None:
            raise ConfigError("missing required key: train_manifest")
        dataset = _training_dataset(cfg, cfg.train.seed)
        _write_provenance(out_dir, "train", {
            "config": cfg.train.to_dict(),
            "arch": json.loads(cfg.arch().to_json()),
            "train_manifest": str(cfg.train_manifest),
            "contaminant_manifest": str(cfg.contaminant_manifest),
            "contamination_ratio": cfg.contamination_ratio})
        result = fit(dataset, cfg.train, cfg.arch(), out_dir=out_dir)
    print(f"trained {len(result.epoch_summaries)} epoch(s); "
          f"log: {result.log_path}; "
          f"checkpoints: {len(result.checkpoint_paths)}")
    return EXIT_OK


def _training_dataset(cfg: RunConfig, seed: int) -> UnlabeledDataset:
    if cfg.train_manifest is None:
        raise ConfigError("missing required key: train_manifest")
    manifest = load_manifest(cfg.train_manifest)
    ratio = cfg.contamination_ratio
    if ratio is not None and not math.isinf(ratio):
        if cfg.contaminant_manifest is None:
            raise ConfigError("missing required key: contaminant_manifest")
        contaminant = load_manifest(cfg.contaminant_manifest)
        manifest = mix_datasets(manifest, contaminant, ratio, seed)
    # Labels are stripped here; the trainer only ever sees ids and pixels.
    return UnlabeledDataset.from_manifest(manifest, cfg.input_side)


def _checkpoints_for_eval(args) -> list[Path]:
    if args.checkpoint is not None:
        return [Path(args.checkpoint)]
    if args.run is None:
        raise ConfigError("eval needs --checkpoint or --run")
    ckpt_dir = Path(args.run) / "checkpoints"
    paths = sorted(ckpt_dir.glob("epoch_*.pt"))
    if not paths:
        raise ConfigError(f"no checkpoints found under {ckpt_dir}")
    return paths


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config) if args.config is not None else None
    test_path = args.test if args.test is not None else \
        (cfg.test_manifest if cfg is not None else None)
    if test_path is None:
        raise ConfigError("missing required key: test_manifest "
                          "(flag --test or [data] test_manifest)")
    if args.out is not None:
        out_dir = Path(args.out)
    elif cfg is not None and cfg.out_dir is not None:
        out_dir = cfg.out_dir / "eval"
    else:
        raise ConfigError("missing required key: out (flag --out or [data] out_dir)")
    manifest = load_manifest(test_path)
    checkpoints = _checkpoints_for_eval(args)

    final = checkpoints[-1]
    payload = load_checkpoint(final)
    from .training import build_model_from_checkpoint
    model, _ = build_model_from_checkpoint(payload)
    scores = score(model, manifest)
    gap_rows = gap_curve(checkpoints if args.epochs == "all" else [final], manifest)
    report = build_report(scores, gap_rows)

    write_scores_csv(scores, out_dir / "scores.csv")
    report.write_json(out_dir / "report.json")
    _write_provenance(out_dir, "eval", {
        "test_manifest": str(test_path),
        "checkpoints": [str(p) for p in checkpoints],
        "epochs": args.epochs})
    if args.plots:
        _write_plots(report.to_dict(), out_dir)
    print(f"eer={report.eer:.4f} auc={report.auc:.4f} "
          f"(bona fide mean={gap_rows[-1]['bonafide_mean']:.5f}, "
          f"attack mean={gap_rows[-1]['attack_mean']:.5f}) -> {out_dir}")
    return EXIT_OK


def _write_plots(report: dict, out_dir: Path) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    fig, ax = plt.subplots(figsize=(5, 5))
    roc = report["roc"]
    ax.plot([p[0] for p in roc], [p[1] for p in roc], lw=1.5)
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="gray")
    ax.set_xlabel("APCER")
    ax.set_ylabel("1 - BPCER")
    ax.set_title(f"ROC (EER {report['eer']:.3f})")
    fig.tight_layout()
    roc_path = out_dir / "roc.png"
    fig.savefig(roc_path, dpi=120)
    plt.close(fig)
    written.append(roc_path)

    rows = report.get("gap_curve") or []
    if rows:
        fig, ax = plt.subplots(figsize=(6, 4))
        epochs = [r["epoch"] for r in rows]
        ax.plot(epochs, [r["bonafide_mean"] for r in rows], color="green",
                marker="o", label="bona fide")
        ax.plot(epochs, [r["attack_mean"] for r in rows], color="red",
                marker="o", label="attack")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean reconstruction error")
        ax.legend()
        fig.tight_layout()
        gap_path = out_dir / "gap_curve.png"
        fig.savefig(gap_path, dpi=120)
        plt.close(fig)
        written.append(gap_path)
    return written


def cmd_report(args) -> int:
    path = Path(args.report)
    if not path.is_file():
        raise ConfigError(f"report file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        report = json.load(fh)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = _write_plots(report, out_dir)
    _write_provenance(out_dir, "report", {"source": str(path)})
    print(f"wrote {', '.join(str(p) for p in written)}")
    return EXIT_OK


def build_parser() -> Parser:
    parser = Parser(prog="spad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=Parser)

    p_synth = sub.add_parser("synth", help="generate a toy dataset")
    p_synth.add_argument("--bonafide", type=int, required=True,
                         help="number of bona fide images")
    p_synth.add_argument("--attacks", type=int, required=True,
                         help="number of blend-attack images")
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument("--side", type=int, default=64, help="image side length")
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train the autoencoder")
    p_train.add_argument("--config", help="TOML config file")
    p_train.add_argument("--out", help="run output directory")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--train-manifest", dest="train_manifest")
    p_train.add_argument("--contaminant-manifest", dest="contaminant_manifest")
    p_train.add_argument("--contamination-ratio", dest="contamination_ratio",
                         type=float, help="primary:contaminant ratio (e.g. 35)")
    p_train.add_argument("--no-spl", dest="no_spl", action="store_true",
                         help="disable self-paced reweighting (baseline arm)")
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--warmup-epochs", dest="warmup_epochs", type=int)
    p_train.add_argument("--batch-size", dest="batch_size", type=int)
    p_train.add_argument("--learning-rate", dest="learning_rate", type=float)
    p_train.add_argument("--input-side", dest="input_side", type=int)
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="score and compute metrics")
    p_eval.add_argument("--config", help="TOML config file")
    p_eval.add_argument("--test", help="labeled test manifest")
    p_eval.add_argument("--run", help="training run directory (with checkpoints/)")
    p_eval.add_argument("--checkpoint", help="explicit checkpoint file")
    p_eval.add_argument("--out", help="output directory")
    p_eval.add_argument("--epochs", choices=("final", "all"), default="final",
                        help="gap curve over the final or all checkpoints")
    p_eval.add_argument("--plots", action="store_true",
                        help="also write ROC and gap-curve PNGs")
    p_eval.set_defaults(func=cmd_eval)

    p_report = sub.add_parser("report", help="plot a report JSON")
    p_report.add_argument("--report", required=True, help="report.json from eval")
    p_report.add_argument("--out", required=True, help="output directory")
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CLIUsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ConfigError, ManifestError, CheckpointError, SingleClassError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
