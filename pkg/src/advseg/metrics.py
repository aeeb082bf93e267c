"""Hard Dice per ROI, sample-averaged mean Dice, presence accuracy, CSV rows."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .labels import ROI_IDS, ROI_NAMES

CSV_COLUMNS = (
    ["config", "fold", "seed", "split"]
    + [f"dice_{n}" for n in ROI_NAMES]
    + ["dice_mean", "acc_presence_mean"]
)


class UndefinedMetricError(ValueError):
    pass


def dice_per_class(pred: np.ndarray, truth: np.ndarray, classes: Sequence[int] = ROI_IDS) -> np.ndarray:
    """Hard Dice for each class; NaN (Undefined) where both sets are empty."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    out = np.full(len(classes), np.nan)
    for i, k in enumerate(classes):
        p = pred == k
        t = truth == k
        denom = int(p.sum()) + int(t.sum())
        if denom:
            out[i] = 2.0 * int((p & t).sum()) / denom
    return out


def sample_mean(dice: np.ndarray) -> float:
    defined = dice[~np.isnan(dice)]
    if defined.size == 0:
        raise UndefinedMetricError("no defined class in sample")
    return float(defined.mean())


def mean_dice(per_sample: Iterable[np.ndarray]) -> float:
    """Mean over samples of each sample's mean over defined classes."""
    means = []
    for d in per_sample:
        try:
            means.append(sample_mean(np.asarray(d, dtype=float)))
        except UndefinedMetricError:
            continue
    if not means:
        raise UndefinedMetricError("every class is undefined in every sample")
    return float(np.mean(means))


def presence_accuracy(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    return (pred == truth).mean(axis=0)


@dataclass
class EvalReport:
    per_sample_dice: list[np.ndarray] = field(default_factory=list)
    presence_pred: list[np.ndarray] = field(default_factory=list)
    presence_truth: list[np.ndarray] = field(default_factory=list)

    def add(self, pred_labels, truth_labels, pred_presence=None, truth_presence=None) -> None:
        self.per_sample_dice.append(dice_per_class(pred_labels, truth_labels))
        if pred_presence is not None:
            self.presence_pred.append(np.asarray(pred_presence, dtype=bool))
            self.presence_truth.append(np.asarray(truth_presence, dtype=bool))

    @property
    def n_samples(self) -> int:
        return len(self.per_sample_dice)

    def class_dice(self) -> np.ndarray:
        """Per-ROI Dice averaged over the samples where it is defined."""
        out = np.full(len(ROI_IDS), np.nan)
        if not self.per_sample_dice:
            return out
        arr = np.array(self.per_sample_dice)
        for i in range(len(ROI_IDS)):
            col = arr[:, i][~np.isnan(arr[:, i])]
            if col.size:
                out[i] = col.mean()
        return out

    def mean_dice(self) -> float:
        return mean_dice(self.per_sample_dice)

    def presence_accuracy(self) -> np.ndarray | None:
        if not self.presence_pred:
            return None
        return presence_accuracy(np.array(self.presence_pred), np.array(self.presence_truth))

    def row(self, config: str, fold, seed, split: str) -> dict:
        row = {"config": config, "fold": fold, "seed": seed, "split": split}
        for name, v in zip(ROI_NAMES, self.class_dice()):
            row[f"dice_{name}"] = _fmt(v)
        try:
            row["dice_mean"] = _fmt(self.mean_dice())
        except UndefinedMetricError:
            row["dice_mean"] = "NA"
        acc = self.presence_accuracy()
        row["acc_presence_mean"] = "NA" if acc is None else _fmt(float(acc.mean()))
        return row


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "NA"
    return f"{float(v):.6f}"


def append_rows(path, rows: Sequence[dict]) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        if new:
            writer.writeheader()
        writer.writerows(rows)


def read_rows(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
