"""Training loop: warm-up, per-batch reweighting, SGD updates, checkpoints.

Each mini-batch performs one alternating step: forward losses, closed-form
sample weights, then a gradient step on the weighted objective with the
weights held fixed. Runs are fully reproducible from (config, seed): data
order is derived per epoch from the seed and parameters are initialised
with a dedicated generator.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import UnlabeledDataset
from .errors import CheckpointError, ConfigError, DivergenceError
from .model import CAE, CAEConfig, init_parameters, per_sample_mse, weighted_batch_objective
from .spl import STATS_BATCH, BatchReport, SPLState, spl_step, unit_report

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA_VERSION = 1
LOG_FILENAME = "training_log.jsonl"

EXIT_OK = 0
EXIT_DIVERGENCE = 2
EXIT_CONFIG = 3


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_gamma: float = 0.98
    batch_size: int = 64
    epochs: int = 25
    warmup_epochs: int = 5
    m: float = 4.0
    r: float = 5e-3
    seed: int = 0
    spl_enabled: bool = True
    spl_stats: str = STATS_BATCH

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(
                f"warmup_epochs ({self.warmup_epochs}) must be in [0, epochs)")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        for name in ("learning_rate", "lr_gamma", "r"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("momentum and weight_decay must be nonnegative")
        if self.m < 1:
            raise ConfigError(f"m must be >= 1, got {self.m}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainResult:
    model: CAE
    arch: CAEConfig
    reports: list[BatchReport]
    epoch_summaries: list[dict]
    checkpoint_paths: list[Path]
    log_path: Path | None
    spl_state: SPLState
    start_step: int = 0


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic shuffle for one epoch, derived from (seed, epoch)."""
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def batches_per_epoch(n: int, batch_size: int) -> int:
    """Number of processed batches; a trailing batch of 1 is dropped."""
    full, rem = divmod(n, batch_size)
    return full + (1 if rem >= 2 else 0)


def sgd_update(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor],
               momentum_buffers: Sequence[torch.Tensor], lr: float,
               momentum: float, weight_decay: float) -> None:
    """In-place SGD step: g += wd*p; buf = momentum*buf + g; p -= lr*buf."""
    if not (len(params) == len(grads) == len(momentum_buffers)):
        raise ValueError("params, grads and buffers must have equal length")
    with torch.no_grad():
        for p, g, buf in zip(params, grads, momentum_buffers):
            if p.shape != g.shape or p.shape != buf.shape:
                raise ValueError(
                    f"shape mismatch: param {tuple(p.shape)}, grad {tuple(g.shape)}, "
                    f"buffer {tuple(buf.shape)}")
            buf.mul_(momentum).add_(g + weight_decay * p)
            p.add_(buf, alpha=-lr)


def _assert_unlabeled(dataset) -> None:
    # Label firewall: the trainer refuses anything but the stripped dataset
    # type, and double-checks that no record smuggles in an eval label.
    if not isinstance(dataset, UnlabeledDataset):
        raise TypeError(
            "fit() consumes an UnlabeledDataset; build one with "
            "UnlabeledDataset.from_manifest() to strip evaluation labels")
    for sample in dataset.samples:
        if hasattr(sample, "eval_label") or hasattr(sample, "label"):
            raise TypeError(f"sample {sample.id!r} carries a label into training")


def save_checkpoint(path: str | Path, epoch: int, model: CAE,
                    momentum_buffers: Sequence[torch.Tensor],
                    spl_state: SPLState, config: TrainConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "epoch": epoch,
        "arch": model.config.to_json(),
        "model_state": model.state_dict(),
        "momentum_buffers": {name: buf for (name, _), buf
                             in zip(model.named_parameters(), momentum_buffers)},
        "spl_state": spl_state.to_dict(),
        "config": config.to_dict(),
        "seed": config.seed,
    }
    torch.save(payload, path)
    return path


_REQUIRED_CHECKPOINT_FIELDS = ("schema_version", "epoch", "arch", "model_state",
                               "momentum_buffers", "spl_state", "config", "seed")


def load_checkpoint(path: str | Path) -> dict:
    """Load and validate a checkpoint archive."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu")
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise CheckpointError(f"{path}: unexpected checkpoint payload")
    for key in _REQUIRED_CHECKPOINT_FIELDS:
        if key not in payload:
            raise CheckpointError(f"{path}: missing checkpoint field {key!r}")
    if payload["schema_version"] != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointError(
            f"{path}: schema version {payload['schema_version']} is not "
            f"supported (expected {CHECKPOINT_SCHEMA_VERSION})")
    return payload


def build_model_from_checkpoint(payload: dict) -> tuple[CAE, list[torch.Tensor]]:
    arch = CAEConfig.from_json(payload["arch"])
    model = CAE(arch)
    model.load_state_dict(payload["model_state"])
    buffers = [payload["momentum_buffers"][name].clone()
               for name, _ in model.named_parameters()]
    return model, buffers


def fit(dataset: UnlabeledDataset, config: TrainConfig, arch: CAEConfig,
        out_dir: str | Path | None = None) -> TrainResult:
    """Train a fresh autoencoder on unlabeled data.

    Emits one BatchReport per step and, when `out_dir` is given, a JSON-lines
    training log and one checkpoint per epoch.
    """
    config.validate()
    _assert_unlabeled(dataset)
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    model = init_parameters(CAE(arch), config.seed)
    buffers = [torch.zeros_like(p) for p in model.parameters()]
    spl_state = SPLState(m=config.m, r=config.r,
                         warmup_active=config.warmup_epochs > 0,
                         stats_mode=config.spl_stats)
    return _run_epochs(model, buffers, spl_state, dataset, config,
                       start_epoch=0, out_dir=out_dir)


def resume(checkpoint: str | Path | dict, dataset: UnlabeledDataset,
           config: TrainConfig | None = None,
           out_dir: str | Path | None = None) -> TrainResult:
    """Continue training from a checkpoint as if never interrupted.

    A config may be passed for validation; any field differing from the
    stored one is a conflict.
    """
    payload = checkpoint if isinstance(checkpoint, dict) else load_checkpoint(checkpoint)
    stored = TrainConfig.from_dict(payload["config"])
    if config is not None and config != stored:
        diffs = [name for name in stored.to_dict()
                 if getattr(config, name) != getattr(stored, name)]
        raise ConfigError(f"config conflicts with checkpoint in: {', '.join(diffs)}")
    config = stored
    _assert_unlabeled(dataset)
    model, buffers = build_model_from_checkpoint(payload)
    spl_state = SPLState.from_dict(payload["spl_state"])
    start_epoch = payload["epoch"] + 1
    if start_epoch >= config.epochs:
        return TrainResult(model=model, arch=model.config, reports=[],
                           epoch_summaries=[], checkpoint_paths=[],
                           log_path=None, spl_state=spl_state,
                           start_step=config.epochs * batches_per_epoch(
                               len(dataset), config.batch_size))
    return _run_epochs(model, buffers, spl_state, dataset, config,
                       start_epoch=start_epoch, out_dir=out_dir)


def _run_epochs(model: CAE, buffers: list[torch.Tensor], spl_state: SPLState,
                dataset: UnlabeledDataset, config: TrainConfig,
                start_epoch: int, out_dir: str | Path | None) -> TrainResult:
    n = len(dataset)
    per_epoch = batches_per_epoch(n, config.batch_size)
    if per_epoch == 0:
        raise ConfigError(f"dataset of {n} samples yields no usable batch")
    params = list(model.parameters())
    lr = config.learning_rate * config.lr_gamma ** start_epoch
    global_step = start_epoch * per_epoch

    log_path = None
    log_fh = None
    checkpoint_paths: list[Path] = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / LOG_FILENAME
        log_fh = open(log_path, "a" if start_epoch > 0 else "w", encoding="utf-8")

    reports: list[BatchReport] = []
    epoch_summaries: list[dict] = []
    try:
        for epoch in range(start_epoch, config.epochs):
            if epoch >= config.warmup_epochs and spl_state.warmup_active:
                spl_state = replace(spl_state, warmup_active=False)
            t0 = time.monotonic()
            order = epoch_order(n, config.seed, epoch)
            batch_means: list[float] = []
            for lo in range(0, n, config.batch_size):
                idx = order[lo:lo + config.batch_size]
                if len(idx) < 2:
                    continue
                images = dataset.load_batch(idx)
                losses = per_sample_mse(images, model(images))
                if not bool(torch.isfinite(losses).all()):
                    raise DivergenceError(
                        f"non-finite reconstruction loss at step {global_step}")
                loss_values = [float(v) for v in losses.detach()]
                if config.spl_enabled:
                    report, spl_state = spl_step(loss_values, spl_state)
                else:
                    report = unit_report(loss_values)
                objective = weighted_batch_objective(losses, report.weights)
                grads = torch.autograd.grad(objective, params)
                for (name, _), g in zip(model.named_parameters(), grads):
                    if not bool(torch.isfinite(g).all()):
                        raise DivergenceError(
                            f"non-finite gradient in '{name}' at step {global_step}")
                sgd_update(params, grads, buffers, lr, config.momentum,
                           config.weight_decay)
                reports.append(report)
                batch_means.append(float(np.mean(loss_values)))
                if log_fh is not None:
                    log_fh.write(report.log_line(global_step) + "\n")
                global_step += 1
            summary = {"epoch": epoch, "mean_loss": float(np.mean(batch_means)),
                       "lr": lr, "wall_time_s": time.monotonic() - t0}
            epoch_summaries.append(summary)
            if log_fh is not None:
                log_fh.write(json.dumps(summary) + "\n")
                log_fh.flush()
            if out_dir is not None:
                ckpt = save_checkpoint(
                    Path(out_dir) / "checkpoints" / f"epoch_{epoch:04d}.pt",
                    epoch, model, buffers, spl_state, config)
                checkpoint_paths.append(ckpt)
            lr *= config.lr_gamma
    finally:
        if log_fh is not None:
            log_fh.close()

    return TrainResult(model=model, arch=model.config, reports=reports,
                       epoch_summaries=epoch_summaries,
                       checkpoint_paths=checkpoint_paths, log_path=log_path,
                       spl_state=spl_state,
                       start_step=start_epoch * per_epoch)


def read_log(path: str | Path) -> tuple[list[dict], list[dict]]:
    """Split a training log into (batch lines, epoch summary lines)."""
    batches: list[dict] = []
    epochs: list[dict] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            entry = json.loads(line)
            (epochs if "epoch" in entry else batches).append(entry)
    return batches, epochs
