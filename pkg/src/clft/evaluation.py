"""Void-aware confusion counting, per-class metrics, weather-stratified tables and timing."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .geometry import CLASS_NAMES, VOID

SUBSET_TAGS = ("light-dry", "light-wet", "dark-dry", "dark-wet")
ALL_WEATHER = "all-weather"
CLASSES = (0, 1, 2)
REPORTED = (1, 2)   # background is tracked but not reported


@dataclass
class ConfusionState:
    tp: np.ndarray = field(default_factory=lambda: np.zeros(3, np.int64))
    fp: np.ndarray = field(default_factory=lambda: np.zeros(3, np.int64))
    fn: np.ndarray = field(default_factory=lambda: np.zeros(3, np.int64))
    void_excluded: int = 0

    def merge(self, other: ConfusionState) -> ConfusionState:
        return ConfusionState(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                              self.void_excluded + other.void_excluded)

    __add__ = merge

    def __eq__(self, other) -> bool:
        return (isinstance(other, ConfusionState)
                and np.array_equal(self.tp, other.tp) and np.array_equal(self.fp, other.fp)
                and np.array_equal(self.fn, other.fn) and self.void_excluded == other.void_excluded)

    def to_dict(self) -> dict:
        return {"tp": self.tp.tolist(), "fp": self.fp.tolist(), "fn": self.fn.tolist(),
                "void_excluded": int(self.void_excluded)}

    @classmethod
    def from_counts(cls, tp, fp, fn, void_excluded: int = 0) -> ConfusionState:
        return cls(np.asarray(tp, np.int64), np.asarray(fp, np.int64),
                   np.asarray(fn, np.int64), int(void_excluded))


def accumulate(state: ConfusionState, pred: np.ndarray, gt: np.ndarray) -> ConfusionState:
    """Add one prediction/ground-truth pair; void ground-truth pixels are skipped."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    valid = gt != VOID
    p = pred[valid].astype(np.int64)
    g = gt[valid].astype(np.int64)
    if np.any((p < 0) | (p > 2)):
        raise ValueError("predictions must be class codes 0, 1 or 2")
    conf = np.bincount(g * 3 + p, minlength=9).reshape(3, 3)
    tp = np.diag(conf)
    return ConfusionState(state.tp + tp, state.fp + conf.sum(axis=0) - tp,
                          state.fn + conf.sum(axis=1) - tp,
                          state.void_excluded + int((~valid).sum()))


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def metrics(state: ConfusionState) -> dict[str, dict[str, float | None]]:
    """IoU, precision and recall per class name; empty denominators give None."""
    out = {}
    for c in CLASSES:
        tp, fp, fn = int(state.tp[c]), int(state.fp[c]), int(state.fn[c])
        out[CLASS_NAMES[c]] = {"iou": _ratio(tp, tp + fp + fn),
                               "precision": _ratio(tp, tp + fp),
                               "recall": _ratio(tp, tp + fn)}
    return out


def mean_defined(values) -> float | None:
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


def mean_iou(state: ConfusionState, classes=REPORTED) -> float | None:
    m = metrics(state)
    return mean_defined(m[CLASS_NAMES[c]]["iou"] for c in classes)


@dataclass
class Report:
    """subset -> modality -> class -> {iou, precision, recall}"""

    table: dict
    counts: dict

    def to_json(self) -> str:
        return json.dumps({"metrics": self.table, "counts": self.counts}, indent=2)

    def to_text(self) -> str:
        modalities = list(next(iter(self.table.values())).keys())
        header = ["subset"] + [f"{m} {CLASS_NAMES[c]}" for m in modalities for c in REPORTED]
        rows = []
        for subset, by_mod in self.table.items():
            row = [subset]
            for m in modalities:
                for c in REPORTED:
                    iou = by_mod[m][CLASS_NAMES[c]]["iou"]
                    row.append("undef" if iou is None else f"{100 * iou:.2f}")
            rows.append(row)
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        fmt = lambda r: " | ".join(cell.rjust(wd) for cell, wd in zip(r, widths))
        lines = [fmt(header), "-+-".join("-" * wd for wd in widths)]
        lines += [fmt(r) for r in rows]
        return "\n".join(lines) + "\n"


def stratified_report(results: Mapping[str, Mapping[str, ConfusionState] | ConfusionState],
                      modality: str = "C+L") -> Report:
    """Per-subset rows plus an all-weather row built from summed raw counts.

    ``results`` maps a subset tag to either one ConfusionState (labelled with
    ``modality``) or a modality -> ConfusionState mapping.
    """
    if not results:
        raise ValueError("at least one subset is required")
    norm: dict[str, dict[str, ConfusionState]] = {}
    for tag, value in results.items():
        if tag not in SUBSET_TAGS:
            raise ValueError(f"unknown subset tag {tag!r}")
        norm[tag] = {modality: value} if isinstance(value, ConfusionState) else dict(value)
    ordered = [t for t in SUBSET_TAGS if t in norm]
    modalities = list(norm[ordered[0]].keys())
    totals = {m: ConfusionState() for m in modalities}
    for tag in ordered:
        for m in modalities:
            totals[m] = totals[m].merge(norm[tag][m])
    table, counts = {}, {}
    for tag, by_mod in [(t, norm[t]) for t in ordered] + [(ALL_WEATHER, totals)]:
        table[tag] = {m: {CLASS_NAMES[c]: metrics(s)[CLASS_NAMES[c]] for c in REPORTED}
                      for m, s in by_mod.items()}
        counts[tag] = {m: s.to_dict() for m, s in by_mod.items()}
    return Report(table, counts)


def time_inference(forward: Callable[[], object], warmup: int = 50, measured: int = 200) -> dict:
    """Mean and standard deviation (ms) of ``measured`` calls after ``warmup`` unrecorded ones."""
    if warmup < 1 or measured < 1:
        raise ValueError("warmup and measured must both be >= 1")
    for _ in range(warmup):
        forward()
    samples = np.empty(measured)
    for i in range(measured):
        t0 = time.perf_counter()
        forward()
        samples[i] = (time.perf_counter() - t0) * 1e3
    return {"mean_ms": float(samples.mean()), "std_ms": float(samples.std()),
            "min_ms": float(samples.min()), "max_ms": float(samples.max()),
            "warmup": warmup, "measured": measured}
