"""Dice scoring and subject-/slice-wise aggregation."""

from __future__ import annotations

import csv
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidDataError

SUBJECT = "subject-wise"
SLICE = "slice-wise"


def _overlap(pred, gt) -> tuple[int, int, int]:
    p, g = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise InvalidDataError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return int(np.count_nonzero(p & g)), int(np.count_nonzero(p)), int(np.count_nonzero(g))


def _dice(inter: int, npred: int, ngt: int) -> float:
    # two empty masks agree perfectly
    return 1.0 if npred + ngt == 0 else 2.0 * inter / (npred + ngt)


def dice_score(pred, gt) -> float:
    return _dice(*_overlap(pred, gt))


@dataclass
class ScoreRow:
    subject_id: str
    slice_index: int
    dice: float
    inter: int
    n_pred: int
    n_gt: int


@dataclass
class ScoreTable:
    rows: list[ScoreRow] = field(default_factory=list)

    def add(self, subject_id: str, slice_index: int, pred, gt) -> ScoreRow:
        inter, npred, ngt = _overlap(pred, gt)
        row = ScoreRow(subject_id, slice_index, _dice(inter, npred, ngt), inter, npred, ngt)
        self.rows.append(row)
        return row

    def by_subject(self) -> "OrderedDict[str, list[ScoreRow]]":
        out: OrderedDict[str, list[ScoreRow]] = OrderedDict()
        for r in self.rows:
            out.setdefault(r.subject_id, []).append(r)
        return out

    def subject_dice(self) -> "OrderedDict[str, float]":
        """Dice of each subject with pred/gt pixels pooled over its slices."""
        return OrderedDict(
            (sid, _dice(sum(r.inter for r in rs), sum(r.n_pred for r in rs), sum(r.n_gt for r in rs)))
            for sid, rs in self.by_subject().items()
        )

    def write_csv(self, path: Path | str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["subject_id", "n_slices", "dice"])
            groups = self.by_subject()
            for sid, d in self.subject_dice().items():
                w.writerow([sid, len(groups[sid]), repr(d)])

    def write_slice_csv(self, path: Path | str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["subject_id", "slice_index", "dice"])
            for r in self.rows:
                w.writerow([r.subject_id, r.slice_index, repr(r.dice)])


def aggregate(scores: ScoreTable, level: str = SUBJECT) -> tuple[float, float]:
    """Mean and population std of per-subject (pooled) or per-slice Dice."""
    if not scores.rows:
        raise InvalidDataError("cannot aggregate an empty score table")
    if level == SUBJECT:
        values = list(scores.subject_dice().values())
    elif level == SLICE:
        values = [r.dice for r in scores.rows]
    else:
        raise ValueError(f"unknown level {level!r}")
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


def write_summary(path: Path | str, scores: ScoreTable, level: str) -> dict:
    mean, std = aggregate(scores, level)
    n = len(scores.by_subject()) if level == SUBJECT else len(scores.rows)
    doc = {"level": level, "mean": mean, "std": std, "n": n}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
    return doc
