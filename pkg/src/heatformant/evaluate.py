"""Evaluation protocols: frame-wise tracking MAE per broad phone class,
vowel-segment estimation error, CV/VC transition windows, and per-group
vowel means for F1/F2 plots.

All metrics are accumulated as (sum, count) pairs, so per-utterance results
combine by plain addition and the outcome does not depend on utterance order.
"""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .quantizer import FormantTrack

BROAD_CLASSES = ("vowel", "semivowel", "nasal", "fricative", "affricate", "stop", "silence")
CONSONANT_CLASSES = frozenset({"semivowel", "nasal", "fricative", "affricate", "stop"})
TRACKED_CLASSES = tuple(c for c in BROAD_CLASSES if c != "silence")
TRANSITION_WINDOW = 3  # frames on each side of a boundary
FORMANT_NAMES = ("F1", "F2", "F3")


@dataclass(frozen=True)
class PhoneSegmentation:
    """Half-open frame intervals ``(start, end, broad_class)``, sorted and disjoint."""

    intervals: tuple[tuple[int, int, str], ...]

    def __post_init__(self):
        ivs = tuple((int(s), int(e), str(c)) for s, e, c in self.intervals)
        prev_end = 0
        for s, e, c in ivs:
            if c not in BROAD_CLASSES:
                raise ValueError(f"unknown broad class {c!r}")
            if s < prev_end or e <= s:
                raise ValueError("intervals must be non-empty, sorted and non-overlapping")
            prev_end = e
        object.__setattr__(self, "intervals", ivs)

    def check_bounds(self, num_frames: int) -> None:
        if self.intervals and self.intervals[-1][1] > num_frames:
            raise ValueError(f"segmentation extends past frame {num_frames}")

    def frame_classes(self, num_frames: int) -> list[str | None]:
        labels: list[str | None] = [None] * num_frames
        for s, e, c in self.intervals:
            for t in range(s, min(e, num_frames)):
                labels[t] = c
        return labels

    @classmethod
    def from_frame_labels(cls, labels: Sequence[str | None]) -> "PhoneSegmentation":
        intervals = []
        start = 0
        for t in range(1, len(labels) + 1):
            if t == len(labels) or labels[t] != labels[start]:
                if labels[start] is not None:
                    intervals.append((start, t, labels[start]))
                start = t
        return cls(tuple(intervals))


@dataclass
class Cell:
    total: float = 0.0
    count: int = 0

    def add(self, errors: np.ndarray) -> None:
        self.total += float(np.sum(errors))
        self.count += int(np.size(errors))

    def __iadd__(self, other: "Cell"):
        self.total += other.total
        self.count += other.count
        return self

    @property
    def mae(self) -> float | None:
        """Mean absolute error, or None when the cell saw no data."""
        return self.total / self.count if self.count else None


def _cells(rows, k) -> dict:
    return {r: [Cell() for _ in range(k)] for r in rows}


def _check_pair(pred: FormantTrack, gold: FormantTrack) -> None:
    if pred.num_frames != gold.num_frames:
        raise ValueError(f"frame count mismatch: prediction {pred.num_frames}, gold {gold.num_frames}")
    if pred.num_formants < gold.num_formants:
        raise ValueError("prediction has fewer formants than the annotation")


@dataclass
class TrackingResult:
    cells: dict = field(default_factory=dict)  # class -> [Cell] * K
    missing: int = 0  # gold-valid frames without a valid prediction

    def __iadd__(self, other: "TrackingResult"):
        for cls, row in other.cells.items():
            mine = self.cells.setdefault(cls, [Cell() for _ in row])
            for a, b in zip(mine, row):
                a += b
        self.missing += other.missing
        return self

    def table(self) -> dict[str, list[float | None]]:
        return {c: [cell.mae for cell in row] for c, row in self.cells.items()}


def tracking_mae(pred: FormantTrack, gold: FormantTrack, seg: PhoneSegmentation) -> TrackingResult:
    """Frame MAE per broad class and formant over gold-valid spoken frames."""
    _check_pair(pred, gold)
    seg.check_bounds(gold.num_frames)
    K = gold.num_formants
    result = TrackingResult(_cells(TRACKED_CLASSES, K))
    labels = seg.frame_classes(gold.num_frames)
    for t, cls in enumerate(labels):
        if cls is None or cls == "silence":
            continue
        for k in range(K):
            if not gold.valid[t, k]:
                continue
            if not pred.valid[t, k]:
                result.missing += 1
                continue
            result.cells[cls][k].add(abs(pred.values[t, k] - gold.values[t, k]))
    return result


@dataclass
class EstimationResult:
    cells: list = field(default_factory=lambda: [Cell() for _ in range(3)])

    def __iadd__(self, other: "EstimationResult"):
        for a, b in zip(self.cells, other.cells):
            a += b
        return self

    @property
    def errors(self) -> list[float | None]:
        return [c.mae for c in self.cells]


def estimation_error(pred: FormantTrack, gold_point: Sequence[float | None], interval: tuple[int, int]) -> EstimationResult:
    """|mean prediction over the vowel interval - annotated value| per formant.

    `gold_point` holds one value per formant; None or NaN marks a formant the
    corpus leaves unannotated, which is skipped.
    """
    start, end = int(interval[0]), int(interval[1])
    if end <= start:
        raise ValueError("empty interval")
    if start < 0 or end > pred.num_frames:
        raise ValueError(f"interval [{start}, {end}) outside the {pred.num_frames}-frame track")
    result = EstimationResult([Cell() for _ in range(len(gold_point))])
    for k, g in enumerate(gold_point):
        if g is None or not np.isfinite(g):
            continue
        ok = pred.valid[start:end, k]
        if not ok.any():
            continue
        mean = float(np.mean(pred.values[start:end, k][ok]))
        result.cells[k].add(abs(mean - g))
    return result


def hillenbrand_gold(points: dict[str, Sequence[float | None]]) -> Sequence[float | None]:
    """Single gold value from multi-point annotations: the 50% point."""
    return points["50"]


@dataclass
class TransitionResult:
    cells: dict = field(default_factory=dict)  # "CV"/"VC" -> [Cell] * K
    windows: dict = field(default_factory=lambda: {"CV": 0, "VC": 0})
    skipped: int = 0

    def __iadd__(self, other: "TransitionResult"):
        for key, row in other.cells.items():
            mine = self.cells.setdefault(key, [Cell() for _ in row])
            for a, b in zip(mine, row):
                a += b
        for key, n in other.windows.items():
            self.windows[key] = self.windows.get(key, 0) + n
        self.skipped += other.skipped
        return self

    def table(self) -> dict[str, list[float | None]]:
        return {c: [cell.mae for cell in row] for c, row in self.cells.items()}


def transition_windows(seg: PhoneSegmentation, num_frames: int, width: int = TRANSITION_WINDOW):
    """Yield ``(kind, frames)`` for every consonant/vowel boundary plus the skip count.

    The window is the `width` last frames of the left interval and the
    `width` first frames of the right one; boundaries too close to an
    utterance edge are skipped.
    """
    windows, skipped = [], 0
    ivs = seg.intervals
    for (s0, e0, c0), (s1, e1, c1) in zip(ivs, ivs[1:]):
        if e0 != s1:
            continue
        if c0 in CONSONANT_CLASSES and c1 == "vowel":
            kind = "CV"
        elif c0 == "vowel" and c1 in CONSONANT_CLASSES:
            kind = "VC"
        else:
            continue
        if s1 - width < 0 or s1 + width > num_frames:
            skipped += 1
            continue
        windows.append((kind, range(s1 - width, s1 + width)))
    return windows, skipped


def transition_mae(pred: FormantTrack, gold: FormantTrack, seg: PhoneSegmentation) -> TransitionResult:
    _check_pair(pred, gold)
    seg.check_bounds(gold.num_frames)
    K = gold.num_formants
    result = TransitionResult(_cells(("CV", "VC"), K))
    windows, result.skipped = transition_windows(seg, gold.num_frames)
    for kind, frames in windows:
        result.windows[kind] += 1
        for t in frames:
            for k in range(K):
                if gold.valid[t, k] and pred.valid[t, k]:
                    result.cells[kind][k].add(abs(pred.values[t, k] - gold.values[t, k]))
    return result


# ---------------------------------------------------------------------------
# vowel polygons


def vowel_polygon(items: Iterable[tuple[FormantTrack, str, str]]) -> list[tuple[str, str, float, float, int]]:
    """Mean (F1, F2) per (group, vowel).

    `items` yields ``(track, vowel, group)``; each utterance contributes the
    mean of its valid frames, and utterances are averaged with equal weight.
    Groups with no usable utterance produce no row.
    """
    acc: dict[tuple[str, str], list] = defaultdict(list)
    for track, vowel, group in items:
        ok = track.valid[:, 0] & track.valid[:, 1]
        if not ok.any():
            continue
        acc[(group, vowel)].append(track.values[ok, :2].mean(axis=0))
    rows = []
    for (group, vowel) in sorted(acc):
        means = np.mean(acc[(group, vowel)], axis=0)
        rows.append((group, vowel, float(means[0]), float(means[1]), len(acc[(group, vowel)])))
    return rows


def write_polygon_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "vowel", "mean_f1", "mean_f2", "count"])
        for g, v, f1, f2, n in rows:
            w.writerow([g, v, f"{f1:.3f}", f"{f2:.3f}", n])


# ---------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    tracking: TrackingResult = field(default_factory=TrackingResult)
    estimation: EstimationResult = field(default_factory=EstimationResult)
    transition: TransitionResult = field(default_factory=TransitionResult)
    num_utterances: int = 0

    def rows(self):
        """(table, row, formant, mae_hz or None, count) tuples in a fixed order."""
        out = []
        for cls in TRACKED_CLASSES:
            for k, cell in enumerate(self.tracking.cells.get(cls, [Cell()] * 3)):
                out.append(("tracking", cls, FORMANT_NAMES[k], cell.mae, cell.count))
        for k, cell in enumerate(self.estimation.cells):
            out.append(("estimation", "vowel", FORMANT_NAMES[k], cell.mae, cell.count))
        for kind in ("CV", "VC"):
            for k, cell in enumerate(self.transition.cells.get(kind, [Cell()] * 3)):
                out.append(("transition", kind, FORMANT_NAMES[k], cell.mae, cell.count))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["table", "row", "formant", "mae_hz", "count"])
        for table, row, formant, mae, n in self.rows():
            w.writerow([table, row, formant, "" if mae is None else f"{mae:.3f}", n])
        return buf.getvalue()

    def to_text(self) -> str:
        def fmt(mae):
            return f"{mae:8.1f}" if mae is not None else f"{'-':>8}"

        lines = []
        by_table = defaultdict(lambda: defaultdict(dict))
        for table, row, formant, mae, n in self.rows():
            by_table[table][row][formant] = (mae, n)
        titles = {
            "tracking": "Tracking MAE (Hz) by broad phone class",
            "estimation": "Vowel estimation error (Hz)",
            "transition": "Transition-window MAE (Hz), 3 frames each side",
        }
        for table in ("tracking", "estimation", "transition"):
            lines.append(titles[table])
            lines.append(f"{'':12}" + "".join(f"{f:>8}" for f in FORMANT_NAMES) + f"{'frames':>10}")
            for row, cells in by_table[table].items():
                counts = "/".join(str(cells[f][1]) for f in FORMANT_NAMES)
                lines.append(f"{row:12}" + "".join(fmt(cells[f][0]) for f in FORMANT_NAMES) + f"{counts:>10}")
            lines.append("")
        lines.append(f"utterances: {self.num_utterances}  missing predictions: {self.tracking.missing}  "
                     f"skipped transitions: {self.transition.skipped}")
        return "\n".join(lines) + "\n"


def evaluate_utterance(pred: FormantTrack, gold: FormantTrack, seg: PhoneSegmentation | None = None,
                       vowel_interval: tuple[int, int] | None = None,
                       gold_point: Sequence[float | None] | None = None) -> EvalReport:
    """All applicable metrics for one utterance; combine reports with ``merge``."""
    report = EvalReport(num_utterances=1)
    K = gold.num_formants
    report.estimation = EstimationResult([Cell() for _ in range(K)])
    if seg is not None:
        report.tracking = tracking_mae(pred, gold, seg)
        report.transition = transition_mae(pred, gold, seg)
    if vowel_interval is not None:
        if gold_point is None:
            # Frame-annotated corpora: the gold value is the mean annotation
            # over the vowel interval.
            s, e = vowel_interval
            gold_point = [
                float(np.mean(gold.values[s:e, k][gold.valid[s:e, k]])) if gold.valid[s:e, k].any() else None
                for k in range(K)
            ]
        report.estimation = estimation_error(pred, gold_point, vowel_interval)
    return report


def merge(reports: Iterable[EvalReport]) -> EvalReport:
    total = EvalReport()
    for r in reports:
        total.tracking += r.tracking
        total.estimation += r.estimation
        total.transition += r.transition
        total.num_utterances += r.num_utterances
    return total
