"""Experiment configuration: TOML file with [train], [model], [data] sections.

Command-line flags override file values. Unknown sections or keys are
rejected so a typo never silently falls back to a default.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .model import CAEConfig
from .training import TrainConfig

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_MODEL_KEYS = {"input_side", "in_channels", "widths", "strides"}
_DATA_KEYS = {"train_manifest", "contaminant_manifest", "contamination_ratio",
              "test_manifest", "out_dir"}


@dataclass
class RunConfig:
    train: TrainConfig
    input_side: int = 224
    in_channels: int = 3
    widths: tuple[int, ...] | None = None
    strides: tuple[int, ...] | None = None
    train_manifest: Path | None = None
    contaminant_manifest: Path | None = None
    contamination_ratio: float | None = None
    test_manifest: Path | None = None
    out_dir: Path | None = None

    def arch(self) -> CAEConfig:
        if self.widths is not None or self.strides is not None:
            if self.widths is None or self.strides is None:
                raise ConfigError("widths and strides must be given together")
            return CAEConfig(input_side=self.input_side,
                             in_channels=self.in_channels,
                             widths=tuple(self.widths),
                             strides=tuple(self.strides))
        return CAEConfig.for_input_side(self.input_side, self.in_channels)

    def validate(self) -> None:
        self.train.validate()
        if self.contamination_ratio is not None:
            if not self.contamination_ratio > 0:
                raise ConfigError("contamination_ratio must be positive")
            if (not math.isinf(self.contamination_ratio)
                    and self.contaminant_manifest is None):
                raise ConfigError(
                    "contamination_ratio set but contaminant_manifest missing")
        try:
            self.arch()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def _check_keys(section: str, table: dict, allowed: set[str]) -> None:
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(
            f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")


def load_run_config(path: str | Path) -> RunConfig:
    """Parse a TOML config file into a RunConfig."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    unknown = set(doc) - {"train", "model", "data"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")

    train_tbl = doc.get("train", {})
    model_tbl = doc.get("model", {})
    data_tbl = doc.get("data", {})
    _check_keys("train", train_tbl, _TRAIN_KEYS)
    _check_keys("model", model_tbl, _MODEL_KEYS)
    _check_keys("data", data_tbl, _DATA_KEYS)

    try:
        train = TrainConfig(**train_tbl)
    except TypeError as exc:
        raise ConfigError(f"bad [train] section: {exc}") from None

    base = path.parent

    def _path(key: str) -> Path | None:
        raw = data_tbl.get(key)
        if raw is None:
            return None
        p = Path(raw)
        return p if p.is_absolute() else base / p

    ratio = data_tbl.get("contamination_ratio")
    cfg = RunConfig(
        train=train,
        input_side=int(model_tbl.get("input_side", 224)),
        in_channels=int(model_tbl.get("in_channels", 3)),
        widths=tuple(model_tbl["widths"]) if "widths" in model_tbl else None,
        strides=tuple(model_tbl["strides"]) if "strides" in model_tbl else None,
        train_manifest=_path("train_manifest"),
        contaminant_manifest=_path("contaminant_manifest"),
        contamination_ratio=float(ratio) if ratio is not None else None,
        test_manifest=_path("test_manifest"),
        out_dir=_path("out_dir"),
    )
    return cfg
