"""Manifests, image preprocessing, contamination mixing, toy-data synthesis.

Manifest CSV schema: header exactly `id,path,label,source`; label is one of
`bonafide`, `attack`, or empty (unlabeled). Relative paths are resolved
against the manifest's directory.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import cv2
import numpy as np
import torch
from PIL import Image, ImageDraw

from .errors import ManifestError
from .model import images_to_tensor

log = logging.getLogger(__name__)

BONAFIDE = "bonafide"
ATTACK = "attack"
MANIFEST_HEADER = ["id", "path", "label", "source"]
MANIFEST_SCHEMA_VERSION = 1

# PIL modes with more than 8 bits per channel; rejected by preprocess.
_HIGH_DEPTH_MODES = {"I", "I;16", "I;16B", "I;16L", "I;16N", "F"}


@dataclass(frozen=True)
class SampleRecord:
    id: str
    path: Path
    eval_label: str | None = None
    source_tag: str = ""


class Manifest:
    """Ordered collection of sample records with unique ids."""

    def __init__(self, records: Sequence[SampleRecord],
                 schema_version: int = MANIFEST_SCHEMA_VERSION):
        self.records = list(records)
        self.schema_version = schema_version
        seen: set[str] = set()
        for rec in self.records:
            if rec.id in seen:
                raise ManifestError(f"duplicate sample id {rec.id!r}")
            seen.add(rec.id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[SampleRecord]:
        return iter(self.records)

    def labeled(self) -> bool:
        return all(r.eval_label is not None for r in self.records)


def load_manifest(path: str | Path) -> Manifest:
    """Parse a manifest CSV, validating schema, labels, ids and paths."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    records: list[SampleRecord] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ManifestError(
                f"bad manifest header {header!r}; expected {MANIFEST_HEADER!r}")
        for row_num, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ManifestError(f"row {row_num}: expected 4 columns, got {len(row)}")
            sid, raw_path, label, source = row
            if label not in (BONAFIDE, ATTACK, ""):
                raise ManifestError(
                    f"row {row_num}: invalid label {label!r}; "
                    f"allowed values are {{'{BONAFIDE}', '{ATTACK}', ''}}")
            img_path = Path(raw_path)
            if not img_path.is_absolute():
                img_path = base / img_path
            if not img_path.is_file():
                raise ManifestError(f"row {row_num}: image path does not exist: {img_path}")
            records.append(SampleRecord(id=sid, path=img_path,
                                        eval_label=label or None,
                                        source_tag=source))
    try:
        return Manifest(records)
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from None


def save_manifest(manifest: Manifest, path: str | Path) -> Path:
    """Write a manifest CSV; image paths are stored relative to the CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for rec in manifest:
            rel = os.path.relpath(rec.path, path.parent)
            writer.writerow([rec.id, rel, rec.eval_label or "", rec.source_tag])
    return path


def preprocess(path: str | Path, side: int = 224) -> np.ndarray:
    """Decode an 8-bit RGB image, resize bilinearly and scale to [0, 1].

    Returns a (side, side, 3) float32 array. Non-RGB images are converted;
    higher bit depths are rejected.
    """
    with Image.open(path) as img:
        if img.mode in _HIGH_DEPTH_MODES:
            raise ValueError(f"{path}: {img.mode} images (>8 bits) are not supported")
        rgb = img.convert("RGB")
        arr = np.asarray(rgb, dtype=np.float32) / 255.0
    if arr.shape[:2] != (side, side):
        arr = cv2.resize(arr, (side, side), interpolation=cv2.INTER_LINEAR)
    return np.ascontiguousarray(arr, dtype=np.float32)


def mix_datasets(primary: Manifest, contaminant: Manifest, ratio: float,
                 seed: int) -> Manifest:
    """Contaminate `primary` with floor(len(primary)/ratio) contaminant records.

    `ratio` is the primary:contaminant count ratio; math.inf disables
    contamination and returns the primary unchanged. The combined list is
    shuffled with the seed; source tags are preserved.
    """
    if not ratio > 0:
        raise ValueError(f"ratio must be positive, got {ratio}")
    if math.isinf(ratio):
        return Manifest(list(primary.records))
    needed = int(len(primary) / ratio)
    if needed > len(contaminant):
        raise ValueError(
            f"contaminant has {len(contaminant)} records but "
            f"{needed} are needed for ratio {ratio}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(contaminant), size=needed, replace=False)
    combined = list(primary.records) + [contaminant.records[i] for i in chosen]
    order = rng.permutation(len(combined))
    return Manifest([combined[i] for i in order])


def max_worker_threads() -> int:
    """Preprocessing parallelism, capped by the SPAD_THREADS env variable."""
    default = min(4, os.cpu_count() or 1)
    raw = os.environ.get("SPAD_THREADS")
    if raw is None:
        return default
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"SPAD_THREADS must be an integer, got {raw!r}")
    return max(1, value)


def load_images(paths: Sequence[Path], side: int) -> np.ndarray:
    """Preprocess many images concurrently, preserving input order."""
    if not paths:
        return np.empty((0, side, side, 3), dtype=np.float32)
    workers = min(max_worker_threads(), len(paths))
    if workers == 1:
        return np.stack([preprocess(p, side) for p in paths])
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return np.stack(list(pool.map(lambda p: preprocess(p, side), paths)))


# --------------------------------------------------------------------------
# Trainer-facing data. This type is the label firewall: it carries ids and
# pixels only, and there is deliberately no label accessor anywhere on it.
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class UnlabeledSample:
    id: str
    path: Path | None = None


class UnlabeledDataset:
    """Training dataset stripped of any evaluation labels."""

    def __init__(self, samples: Sequence[UnlabeledSample], side: int,
                 images: np.ndarray | None = None):
        if images is not None and len(images) != len(samples):
            raise ValueError("images and samples must have equal length")
        self.samples = list(samples)
        self.side = side
        self._images = images

    def __len__(self) -> int:
        return len(self.samples)

    @classmethod
    def from_manifest(cls, manifest: Manifest, side: int,
                      preload: bool = True) -> "UnlabeledDataset":
        samples = [UnlabeledSample(id=r.id, path=r.path) for r in manifest]
        images = None
        if preload:
            images = load_images([s.path for s in samples], side)
        return cls(samples, side, images)

    @classmethod
    def from_arrays(cls, images: np.ndarray,
                    ids: Sequence[str] | None = None) -> "UnlabeledDataset":
        arr = np.asarray(images, dtype=np.float32)
        if arr.ndim != 4:
            raise ValueError(f"expected (N, H, W, C) images, got shape {arr.shape}")
        if ids is None:
            ids = [f"mem_{i:06d}" for i in range(len(arr))]
        samples = [UnlabeledSample(id=str(i)) for i in ids]
        return cls(samples, side=arr.shape[1], images=arr)

    def load_batch(self, indices: Sequence[int]) -> torch.Tensor:
        if self._images is not None:
            batch = self._images[np.asarray(indices, dtype=np.intp)]
        else:
            batch = load_images([self.samples[i].path for i in indices], self.side)
        return images_to_tensor(batch)


# --------------------------------------------------------------------------
# Procedural toy data: sharply structured bona fide images and pixel-blend
# attacks built from pairs of distinct bona fides.
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthResult:
    train_manifest: Manifest
    test_manifest: Manifest
    pool_manifest: Manifest
    train_path: Path
    test_path: Path
    pool_path: Path
    provenance_path: Path


def render_bonafide(rng: np.random.Generator, side: int) -> np.ndarray:
    """One bona fide image: random palette, polygons, lines, textured patches."""
    background = rng.uniform(0.0, 1.0, size=3)
    pil = Image.fromarray(
        np.broadcast_to((background * 255).astype(np.uint8), (side, side, 3)).copy())
    draw = ImageDraw.Draw(pil)
    for _ in range(int(rng.integers(3, 8))):
        kind = int(rng.integers(0, 3))
        color = tuple(int(v) for v in rng.integers(0, 256, size=3))
        if kind == 0:
            n_pts = int(rng.integers(3, 7))
            pts = [tuple(int(v) for v in rng.integers(0, side, size=2))
                   for _ in range(n_pts)]
            draw.polygon(pts, fill=color)
        elif kind == 1:
            x0, y0, x1, y1 = (int(v) for v in rng.integers(0, side, size=4))
            draw.line([(x0, y0), (x1, y1)], fill=color, width=int(rng.integers(1, 4)))
        else:
            x0, y0 = (int(v) for v in rng.integers(0, max(1, side - 12), size=2))
            w, h = (int(v) for v in rng.integers(max(4, side // 10),
                                                 max(5, side // 3), size=2))
            draw.rectangle([x0, y0, min(side - 1, x0 + w), min(side - 1, y0 + h)],
                           fill=color)
            arr = np.array(pil)
            step = int(rng.integers(2, 5))
            ys = slice(y0, min(side, y0 + h))
            xs = slice(x0, min(side, x0 + w))
            patch = arr[ys, xs]
            yy, xx = np.mgrid[0:patch.shape[0], 0:patch.shape[1]]
            checker = ((yy // step + xx // step) % 2).astype(bool)
            patch[checker] = (patch[checker] * 0.4).astype(np.uint8)
            arr[ys, xs] = patch
            pil = Image.fromarray(arr)
            draw = ImageDraw.Draw(pil)
    return np.asarray(pil, dtype=np.uint8)


def blend_attack(a: np.ndarray, b: np.ndarray, alpha: float,
                 smooth_sigma: float = 0.0) -> np.ndarray:
    """Pixel-wise convex blend alpha*a + (1-alpha)*b of two uint8 images."""
    mixed = alpha * a.astype(np.float64) + (1.0 - alpha) * b.astype(np.float64)
    if smooth_sigma > 0:
        mixed = cv2.GaussianBlur(mixed, ksize=(0, 0), sigmaX=smooth_sigma)
    return np.rint(np.clip(mixed, 0.0, 255.0)).astype(np.uint8)


def synth_generate(n_bonafide: int, n_attacks: int, seed: int,
                   out_dir: str | Path, side: int = 64,
                   alpha_range: tuple[float, float] = (0.3, 0.7),
                   smooth_prob: float = 0.3, smooth_sigma: float = 0.6,
                   train_fraction: float = 0.8,
                   attack_test_fraction: float = 0.6) -> SynthResult:
    """Generate a toy dataset of bona fide images and blend attacks.

    Writes PNGs plus three manifest CSVs: `train.csv` (bona fide training
    split, labels stripped), `test.csv` (held-out bona fides and attacks,
    labeled) and `pool.csv` (attacks reserved for training contamination,
    disjoint from the test set). A provenance JSON records the generation
    parameters.
    """
    if n_bonafide < 2:
        raise ValueError("need at least 2 bona fide images")
    if n_attacks < 0:
        raise ValueError("n_attacks must be nonnegative")
    lo, hi = alpha_range
    if not (0.0 < lo <= hi < 1.0):
        raise ValueError(f"alpha_range must satisfy 0 < lo <= hi < 1, got {alpha_range}")

    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    bonafide: list[SampleRecord] = []
    for i in range(n_bonafide):
        arr = render_bonafide(rng, side)
        path = img_dir / f"bonafide_{i:05d}.png"
        Image.fromarray(arr).save(path)
        bonafide.append(SampleRecord(id=f"bf_{i:05d}", path=path,
                                     eval_label=BONAFIDE, source_tag="synth"))

    attacks: list[SampleRecord] = []
    for i in range(n_attacks):
        ia, ib = rng.choice(n_bonafide, size=2, replace=False)
        alpha = float(rng.uniform(lo, hi))
        a = np.asarray(Image.open(bonafide[ia].path), dtype=np.uint8)
        b = np.asarray(Image.open(bonafide[ib].path), dtype=np.uint8)
        sigma = smooth_sigma if rng.uniform() < smooth_prob else 0.0
        arr = blend_attack(a, b, alpha, sigma)
        path = img_dir / f"attack_{i:05d}.png"
        Image.fromarray(arr).save(path)
        attacks.append(SampleRecord(id=f"atk_{i:05d}", path=path,
                                    eval_label=ATTACK, source_tag="synth"))

    n_train = int(round(train_fraction * n_bonafide))
    n_train = min(max(n_train, 1), n_bonafide - 1) if n_bonafide > 1 else n_train
    bf_order = rng.permutation(n_bonafide)
    train_bf = [bonafide[i] for i in bf_order[:n_train]]
    test_bf = [bonafide[i] for i in bf_order[n_train:]]

    atk_order = rng.permutation(n_attacks)
    n_test_atk = int(round(attack_test_fraction * n_attacks))
    test_atk = [attacks[i] for i in atk_order[:n_test_atk]]
    pool_atk = [attacks[i] for i in atk_order[n_test_atk:]]

    train_manifest = Manifest([
        SampleRecord(id=r.id, path=r.path, eval_label=None, source_tag=r.source_tag)
        for r in train_bf])
    test_manifest = Manifest(test_bf + test_atk)
    pool_manifest = Manifest(pool_atk)

    train_path = save_manifest(train_manifest, out_dir / "train.csv")
    test_path = save_manifest(test_manifest, out_dir / "test.csv")
    pool_path = save_manifest(pool_manifest, out_dir / "pool.csv")

    provenance_path = out_dir / "provenance.json"
    with open(provenance_path, "w", encoding="utf-8") as fh:
        json.dump({
            "seed": seed, "n_bonafide": n_bonafide, "n_attacks": n_attacks,
            "side": side, "alpha_range": [lo, hi], "smooth_prob": smooth_prob,
            "smooth_sigma": smooth_sigma, "train_fraction": train_fraction,
            "attack_test_fraction": attack_test_fraction,
            "counts": {"train": len(train_manifest), "test": len(test_manifest),
                       "pool": len(pool_manifest)},
        }, fh, indent=2)

    return SynthResult(train_manifest, test_manifest, pool_manifest,
                       train_path, test_path, pool_path, provenance_path)
