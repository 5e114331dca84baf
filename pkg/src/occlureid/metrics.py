"""Confusion-count bookkeeping and the evaluation metric suite.

Counts are kept one-vs-rest per occlusion class. Two of the published
formulas deviate from the textbook definitions (the Jaccard index carries
the full four-term denominator, and the correlation coefficient squares
the (TP+FP) factor); both the literal and the standard variants are
computed side by side, with the standard ones shown in reports.

Any metric whose denominator is zero is reported as None and rendered as
a long-dash placeholder in tables, never as 0 or NaN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Dict, Iterable, List, Optional, Sequence

from .data import CLASS_FOLDERS, OcclusionClass

UNDEFINED_CELL = "—"

CSV_HEADER = "Occlusion type,Accuracy,JSI,MCC"

METRIC_FIELDS = (
    "sensitivity", "specificity", "accuracy",
    "jsi_paper", "jsi_standard", "mcc_paper", "mcc_standard",
)


@dataclass(frozen=True)
class ConfusionCounts:
    """One-vs-rest tallies for a single class."""

    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"ConfusionCounts.{f.name} must be >= 0")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def merged(self, other: "ConfusionCounts") -> "ConfusionCounts":
        """Counts over the union of two disjoint sample sets."""
        return ConfusionCounts(
            tp=self.tp + other.tp, tn=self.tn + other.tn,
            fp=self.fp + other.fp, fn=self.fn + other.fn,
        )


@dataclass(frozen=True)
class MetricReport:
    """Derived metrics for one class (or a macro average).

    None marks a metric whose denominator was zero for these counts.
    """

    sensitivity: Optional[float]
    specificity: Optional[float]
    accuracy: Optional[float]
    jsi_paper: Optional[float]
    jsi_standard: Optional[float]
    mcc_paper: Optional[float]
    mcc_standard: Optional[float]
    count: int


def tally(
    predictions: Sequence[OcclusionClass], truths: Sequence[OcclusionClass]
) -> Dict[OcclusionClass, ConfusionCounts]:
    """One-vs-rest confusion counts per class.

    For every class, each sample lands in exactly one of the four cells,
    so per-class totals all equal the sample count.
    """
    if len(predictions) != len(truths):
        raise ValueError(f"length mismatch: {len(predictions)} predictions vs {len(truths)} truths")
    if not predictions:
        raise ValueError("cannot tally an empty sample set")
    out: Dict[OcclusionClass, ConfusionCounts] = {}
    for cls in OcclusionClass:
        tp = fp = fn = tn = 0
        for p, t in zip(predictions, truths):
            if p == cls and t == cls:
                tp += 1
            elif p == cls:
                fp += 1
            elif t == cls:
                fn += 1
            else:
                tn += 1
        out[cls] = ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)
    return out


def _ratio(num: float, den: float) -> Optional[float]:
    return num / den if den > 0 else None


def metrics(c: ConfusionCounts) -> MetricReport:
    """All metric variants for one set of counts."""
    if c.total < 1:
        raise ValueError("metrics require at least one sample")
    mcc_num = c.tp * c.tn - c.fp * c.fn
    den_paper = (c.tp + c.fp) * (c.tp + c.fp) * (c.tn + c.fp) * (c.tn + c.fn)
    den_standard = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    return MetricReport(
        sensitivity=_ratio(c.tp, c.tp + c.fn),
        specificity=_ratio(c.tn, c.fp + c.tn),
        accuracy=_ratio(c.tp + c.tn, c.total),
        jsi_paper=_ratio(c.tp, c.total),
        jsi_standard=_ratio(c.tp, c.tp + c.fp + c.fn),
        mcc_paper=mcc_num / math.sqrt(den_paper) if den_paper > 0 else None,
        mcc_standard=mcc_num / math.sqrt(den_standard) if den_standard > 0 else None,
        count=c.total,
    )


def macro_report(reports: Iterable[MetricReport]) -> MetricReport:
    """Unweighted mean of each metric over the classes where it is defined."""
    rows = list(reports)
    if not rows:
        raise ValueError("macro_report needs at least one class report")
    values: Dict[str, Optional[float]] = {}
    for name in METRIC_FIELDS:
        defined = [getattr(r, name) for r in rows if getattr(r, name) is not None]
        values[name] = sum(defined) / len(defined) if defined else None
    return MetricReport(count=rows[0].count, **values)


def _cell(value: Optional[float]) -> str:
    return UNDEFINED_CELL if value is None else f"{100.0 * value:.2f}"


def report_table(per_class: Dict[OcclusionClass, MetricReport], fmt: str = "text") -> str:
    """Render the per-class table (standard JSI/MCC variants), plus a macro row.

    Values are percentages with two decimals; CSV and text renderings are
    byte-stable for identical inputs.
    """
    if fmt not in ("text", "csv"):
        raise ValueError(f"unknown report format {fmt!r}; expected 'text' or 'csv'")
    missing = [cls.name for cls in OcclusionClass if cls not in per_class]
    if missing:
        raise ValueError(f"report_table: missing classes {missing}")
    rows: List[List[str]] = []
    for cls in OcclusionClass:
        r = per_class[cls]
        rows.append([CLASS_FOLDERS[cls], _cell(r.accuracy), _cell(r.jsi_standard), _cell(r.mcc_standard)])
    mac = macro_report(per_class[cls] for cls in OcclusionClass)
    rows.append(["Macro", _cell(mac.accuracy), _cell(mac.jsi_standard), _cell(mac.mcc_standard)])

    if fmt == "csv":
        return "\n".join([CSV_HEADER] + [",".join(row) for row in rows]) + "\n"
    header = CSV_HEADER.split(",")
    widths = [max(len(header[i]), *(len(row[i]) for row in rows)) for i in range(4)]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(header)).rstrip()]
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
    return "\n".join(lines) + "\n"
