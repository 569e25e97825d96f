"""Accuracy, AUROC and average confidence, plus the per-condition report."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

CONDITIONS = ("Clean", "PGD-White", "PGD-Black", "Patch-Natural", "Patch-White", "Patch-Black")
CSV_HEADER = ["condition", "n", "accuracy", "auroc", "avg_confidence"]


def _rows(predictions) -> np.ndarray:
    p = np.asarray(predictions, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError(f"need a nonempty [N, K] probability array, got shape {p.shape}")
    return p


def _labels(labels, n: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ValueError(f"{y.shape} labels for {n} predictions")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    return y.astype(np.int64)


def accuracy(predictions, labels) -> float:
    """Fraction of rows whose argmax (ties go to class 0) equals the label."""
    p = _rows(predictions)
    y = _labels(labels, len(p))
    return float(np.mean(p.argmax(axis=1) == y))


def average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with tied scores sharing the mean of their positions."""
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(len(s))
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg), ties counted as one half."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = _labels(labels, len(s))
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC is undefined unless both classes are present")
    u = average_ranks(s)[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mean_confidence(predictions) -> float:
    """Mean probability of the predicted class."""
    return float(np.mean(_rows(predictions).max(axis=1)))


def evaluate(probs, labels) -> dict:
    p = _rows(probs)
    y = _labels(labels, len(p))
    return {
        "n": len(y),
        "accuracy": accuracy(p, y),
        "auroc": auroc(p[:, 1], y),
        "avg_confidence": mean_confidence(p),
    }


# ---------------------------------------------------------------------------
# Report


@dataclass(frozen=True)
class Row:
    condition: str
    n: int
    accuracy: float
    auroc: float
    avg_confidence: float

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError(f"{self.condition}: n must be positive")
        for name in ("accuracy", "auroc", "avg_confidence"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{self.condition}: {name}={v} outside [0, 1]")


@dataclass
class EvaluationReport:
    rows: list[Row]
    metadata: dict = field(default_factory=dict)

    def row(self, condition: str) -> Row:
        for r in self.rows:
            if r.condition == condition:
                return r
        raise KeyError(condition)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r.condition, r.n, repr(r.accuracy), repr(r.auroc), repr(r.avg_confidence)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, metadata: dict | None = None) -> "EvaluationReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"report header must be {','.join(CSV_HEADER)}, got {header}")
        rows = [Row(c, int(n), float(a), float(u), float(m)) for c, n, a, u, m in reader]
        return cls(rows, metadata or {})

    def render(self) -> str:
        head = ("Input Images", "n", "Accuracy", "AUROC", "Avg. Conf.")
        body = [
            (r.condition, str(r.n), f"{100 * r.accuracy:.1f}%", f"{r.auroc:.3f}", f"{100 * r.avg_confidence:.1f}%")
            for r in self.rows
        ]
        widths = [max(len(row[i]) for row in [head, *body]) for i in range(len(head))]
        lines = []
        for k, row in enumerate([head, *body]):
            cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
            lines.append("  ".join(cells).rstrip())
            if k == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def build_report(metrics: dict[str, dict], metadata: dict | None = None,
                 conditions: tuple[str, ...] = CONDITIONS) -> EvaluationReport:
    """Arrange per-condition metric dicts in table order; absent conditions only warn."""
    if "Clean" not in metrics:
        raise ValueError("the Clean condition is required")
    unknown = set(metrics) - set(conditions)
    if unknown:
        raise ValueError(f"unknown conditions {sorted(unknown)}")
    rows = []
    for cond in conditions:
        if cond not in metrics:
            log.warning("condition %s missing from report", cond)
            continue
        m = metrics[cond]
        rows.append(Row(cond, int(m["n"]), float(m["accuracy"]), float(m["auroc"]), float(m["avg_confidence"])))
    return EvaluationReport(rows, dict(metadata or {}))
