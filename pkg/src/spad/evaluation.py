"""Scoring and biometric error metrics.

A sample's anomaly score is its raw reconstruction MSE. Polarity: attacks
reconstruct more easily than bona fides, so LOW scores indicate attacks and
high scores are bona-fide-like. All thresholded decisions use the rule
"attack iff score < t"; ties (score == t) fall on the bona fide side.

APCER(t) is the fraction of attacks classified bona fide (score >= t),
BPCER(t) the fraction of bona fides classified attack (score < t).
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import ATTACK, BONAFIDE, Manifest, max_worker_threads, preprocess
from .errors import ManifestError, SingleClassError
from .model import CAE, images_to_tensor, per_sample_mse
from .training import build_model_from_checkpoint, load_checkpoint

log = logging.getLogger(__name__)

POLARITY = "higher_score_more_bonafide"

SCORE_CSV_HEADER = ["id", "score", "label"]


@dataclass(frozen=True)
class ScoreEntry:
    id: str
    score: float
    label: str


@dataclass
class ScoreSet:
    """Per-sample scores with held-out labels, for evaluation only."""

    entries: list[ScoreEntry]
    skipped_count: int = 0
    polarity: str = POLARITY

    def __post_init__(self):
        for e in self.entries:
            if not np.isfinite(e.score):
                raise ValueError(f"non-finite score for id {e.id!r}")
            if e.label not in (BONAFIDE, ATTACK):
                raise ValueError(f"entry {e.id!r} has invalid label {e.label!r}")

    def __len__(self) -> int:
        return len(self.entries)

    def bonafide_scores(self) -> np.ndarray:
        return np.array([e.score for e in self.entries if e.label == BONAFIDE])

    def attack_scores(self) -> np.ndarray:
        return np.array([e.score for e in self.entries if e.label == ATTACK])


def score(model: CAE, manifest: Manifest, batch_size: int = 64) -> ScoreSet:
    """Reconstruction-MSE scores for every labeled sample in the manifest.

    Unreadable images are skipped with a warning and counted in the result.
    """
    seen: set[str] = set()
    for rec in manifest:
        if rec.id in seen:
            raise ManifestError(f"duplicate sample id {rec.id!r}")
        seen.add(rec.id)
        if rec.eval_label is None:
            raise ManifestError(f"sample {rec.id!r} has no label; scoring needs "
                                "a labeled manifest")
    side = model.config.input_side
    model.eval()
    entries: list[ScoreEntry] = []
    skipped = 0
    records = list(manifest)

    def _load(rec):
        try:
            return preprocess(rec.path, side)
        except Exception as exc:
            return exc

    workers = max(1, min(max_worker_threads(), len(records)))
    for lo in range(0, len(records), batch_size):
        chunk = records[lo:lo + batch_size]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            loaded = list(pool.map(_load, chunk))
        images, kept = [], []
        for rec, arr in zip(chunk, loaded):
            if isinstance(arr, Exception):
                log.warning("skipping unreadable sample %s: %s", rec.id, arr)
                skipped += 1
                continue
            images.append(arr)
            kept.append(rec)
        if not kept:
            continue
        with torch.no_grad():
            x = images_to_tensor(np.stack(images))
            mse = per_sample_mse(x, model(x))
        for rec, value in zip(kept, mse.tolist()):
            entries.append(ScoreEntry(id=rec.id, score=float(value),
                                      label=rec.eval_label))
    if skipped:
        log.warning("skipped %d unreadable samples", skipped)
    return ScoreSet(entries=entries, skipped_count=skipped)


def write_scores_csv(scores: ScoreSet, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORE_CSV_HEADER)
        for e in scores.entries:
            writer.writerow([e.id, repr(e.score), e.label])
    return path


def read_scores_csv(path: str | Path) -> ScoreSet:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SCORE_CSV_HEADER:
            raise ValueError(f"bad score file header {header!r}")
        entries = [ScoreEntry(id=r[0], score=float(r[1]), label=r[2])
                   for r in reader if r]
    return ScoreSet(entries=entries)


def _class_scores(scores: ScoreSet) -> tuple[np.ndarray, np.ndarray]:
    bf = scores.bonafide_scores()
    atk = scores.attack_scores()
    if bf.size == 0 or atk.size == 0:
        raise SingleClassError(
            f"need both classes, got {bf.size} bona fide / {atk.size} attack")
    return np.sort(bf), np.sort(atk)


def _candidate_thresholds(bf_sorted: np.ndarray, atk_sorted: np.ndarray) -> np.ndarray:
    """One threshold per distinct classification outcome.

    With k distinct scores there are k + 1 outcomes. The lowest candidate
    classifies everything bona fide; each midpoint between consecutive
    distinct scores moves one score value to the attack side; the highest
    candidate classifies everything attack. Midpoints that round down to
    the lower score are nudged up so the intended partition is preserved.
    """
    uniq = np.unique(np.concatenate([bf_sorted, atk_sorted]))
    mids = (uniq[:-1] + uniq[1:]) / 2.0
    mids = np.where(mids > uniq[:-1], mids, np.nextafter(uniq[:-1], uniq[1:]))
    top = np.nextafter(uniq[-1], np.inf)
    return np.concatenate([[uniq[0]], mids, [top]])


def _rates_at(bf_sorted: np.ndarray, atk_sorted: np.ndarray,
              thresholds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # attack iff score < t: APCER counts attacks >= t, BPCER bona fides < t.
    apcer = (atk_sorted.size - np.searchsorted(atk_sorted, thresholds, side="left")
             ) / atk_sorted.size
    bpcer = np.searchsorted(bf_sorted, thresholds, side="left") / bf_sorted.size
    return apcer, bpcer


def compute_eer(scores: ScoreSet) -> tuple[float, float]:
    """Equal error rate and its threshold.

    Sweeps every distinct classification outcome and returns
    (APCER + BPCER) / 2 at the first threshold minimising |APCER - BPCER|.
    """
    bf, atk = _class_scores(scores)
    thresholds = _candidate_thresholds(bf, atk)
    apcer, bpcer = _rates_at(bf, atk, thresholds)
    idx = int(np.argmin(np.abs(apcer - bpcer)))
    return float((apcer[idx] + bpcer[idx]) / 2.0), float(thresholds[idx])


def apcer_bpcer_at(scores: ScoreSet, threshold: float) -> tuple[float, float]:
    """Exact APCER and BPCER fractions at a fixed threshold."""
    bf, atk = _class_scores(scores)
    apcer, bpcer = _rates_at(bf, atk, np.array([threshold], dtype=np.float64))
    return float(apcer[0]), float(bpcer[0])


def roc_points(scores: ScoreSet) -> list[tuple[float, float]]:
    """ROC curve as (APCER, 1 - BPCER) points ordered by ascending threshold.

    Includes the trivial endpoints (1, 1) and (0, 0).
    """
    bf, atk = _class_scores(scores)
    thresholds = _candidate_thresholds(bf, atk)
    apcer, bpcer = _rates_at(bf, atk, thresholds)
    return [(float(a), float(1.0 - b)) for a, b in zip(apcer, bpcer)]


def roc_auc(points: Sequence[tuple[float, float]]) -> float:
    """Area under the (APCER, 1 - BPCER) curve via the trapezoid rule."""
    total = 0.0
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        total += (x0 - x1) * (y0 + y1) / 2.0
    return total


def operating_points(scores: ScoreSet,
                     targets: Sequence[float] = (0.05, 0.10, 0.20)
                     ) -> tuple[dict[str, float], dict[str, float]]:
    """Tabulate BPCER at fixed APCER targets and vice versa."""
    bf, atk = _class_scores(scores)
    thresholds = _candidate_thresholds(bf, atk)
    apcer, bpcer = _rates_at(bf, atk, thresholds)
    bpcer_at: dict[str, float] = {}
    apcer_at: dict[str, float] = {}
    for target in targets:
        ok = apcer <= target
        bpcer_at[f"{target:g}"] = float(bpcer[ok].min()) if ok.any() else 1.0
        ok = bpcer <= target
        apcer_at[f"{target:g}"] = float(apcer[ok].min()) if ok.any() else 1.0
    return apcer_at, bpcer_at


def gap_curve(checkpoint_paths: Sequence[str | Path],
              manifest: Manifest, batch_size: int = 64) -> list[dict]:
    """Mean bona fide and attack reconstruction error per epoch checkpoint."""
    if not checkpoint_paths:
        raise ValueError("need at least one checkpoint")
    rows: list[dict] = []
    for path in checkpoint_paths:
        payload = load_checkpoint(path)
        model, _ = build_model_from_checkpoint(payload)
        s = score(model, manifest, batch_size=batch_size)
        bf = s.bonafide_scores()
        atk = s.attack_scores()
        if bf.size == 0 or atk.size == 0:
            raise SingleClassError("gap curve needs both classes in the manifest")
        rows.append({"epoch": int(payload["epoch"]),
                     "bonafide_mean": float(bf.mean()),
                     "attack_mean": float(atk.mean()),
                     "gap": float(bf.mean() - atk.mean())})
    return rows


@dataclass
class EvalReport:
    eer: float
    eer_threshold: float
    auc: float
    n_bonafide: int
    n_attack: int
    skipped: int
    roc: list[tuple[float, float]]
    apcer_at: dict[str, float]
    bpcer_at: dict[str, float]
    gap_curve: list[dict] = field(default_factory=list)
    polarity: str = POLARITY

    def to_dict(self) -> dict:
        return {"eer": self.eer, "eer_threshold": self.eer_threshold,
                "auc": self.auc, "n_bonafide": self.n_bonafide,
                "n_attack": self.n_attack, "skipped": self.skipped,
                "polarity": self.polarity,
                "apcer_at": self.apcer_at, "bpcer_at": self.bpcer_at,
                "roc": [list(p) for p in self.roc],
                "gap_curve": self.gap_curve}

    def write_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
        return path


def build_report(scores: ScoreSet, gap_rows: Sequence[dict] = ()) -> EvalReport:
    eer, thr = compute_eer(scores)
    points = roc_points(scores)
    apcer_at, bpcer_at = operating_points(scores)
    return EvalReport(eer=eer, eer_threshold=thr, auc=roc_auc(points),
                      n_bonafide=int(scores.bonafide_scores().size),
                      n_attack=int(scores.attack_scores().size),
                      skipped=scores.skipped_count,
                      roc=points, apcer_at=apcer_at, bpcer_at=bpcer_at,
                      gap_curve=list(gap_rows))
