"""AUROC computation and report assembly.

AUROC here is the probability that an in-distribution sample scores higher
than an out-distribution sample, ties counted half — the Mann-Whitney U
statistic normalized by n_in * n_out, computed exactly with midranks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .scores import ScoreVector


@dataclass(frozen=True)
class AurocResult:
    auroc: float
    n_in: int
    n_out: int
    score_kind: str


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their rank range.

    All outputs are exact multiples of 0.5, so rank sums are exact in
    float64 for any realistic sample size.
    """
    n = len(values)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(n, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(in_scores: ScoreVector, out_scores: ScoreVector) -> AurocResult:
    """Tie-aware AUROC between in-distribution and out-distribution scores.

    Equals P(S_in > S_out) + 0.5 * P(S_in = S_out) exactly; matches a
    pairwise counting oracle bit-for-bit on tied integer scores.
    """
    s_in = np.asarray(in_scores.scores, dtype=np.float64)
    s_out = np.asarray(out_scores.scores, dtype=np.float64)
    if len(s_in) == 0 or len(s_out) == 0:
        raise ValueError("both score vectors must be non-empty")
    if not (np.isfinite(s_in).all() and np.isfinite(s_out).all()):
        raise ValueError("scores must be finite")

    n_in, n_out = len(s_in), len(s_out)
    ranks = _midranks(np.concatenate([s_in, s_out]))
    u = ranks[:n_in].sum() - n_in * (n_in + 1) / 2.0
    value = u / (n_in * n_out)
    return AurocResult(auroc=float(value), n_in=n_in, n_out=n_out,
                       score_kind=in_scores.kind)


def knn_accuracy(predictions: np.ndarray, labels) -> float:
    """Fraction of predictions matching the reference labels."""
    predictions = np.asarray(predictions)
    truth = np.asarray(getattr(labels, "labels", labels))
    if predictions.shape != truth.shape:
        raise ValueError(
            f"length mismatch: {predictions.shape} predictions vs {truth.shape} labels"
        )
    return float((predictions == truth).mean())


@dataclass(frozen=True)
class ReportRow:
    in_dataset: str
    out_dataset: str
    score_kind: str
    auroc: float
    runtime_ms: float


@dataclass
class EvalReport:
    """Rows of (in, out, score, AUROC, runtime) with two emission formats."""

    rows: list[ReportRow] = field(default_factory=list)

    def add(self, in_dataset: str, out_dataset: str, score_kind: str,
            auroc_value: float, runtime_ms: float) -> None:
        self.rows.append(ReportRow(in_dataset, out_dataset, score_kind,
                                   auroc_value, runtime_ms))

    def to_text(self) -> str:
        headers = ("in", "out", "score", "auroc(%)", "runtime(ms)")
        cells = [
            (r.in_dataset, r.out_dataset, r.score_kind,
             f"{100.0 * r.auroc:.1f}", f"{r.runtime_ms:.0f}")
            for r in self.rows
        ]
        widths = [
            max(len(headers[c]), *(len(row[c]) for row in cells)) if cells else len(headers[c])
            for c in range(len(headers))
        ]
        lines = [
            "  ".join(h.ljust(w) for h, w in zip(headers, widths)),
            "  ".join("-" * w for w in widths),
        ]
        lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({
            "rows": [
                {
                    "in": r.in_dataset,
                    "out": r.out_dataset,
                    "score": r.score_kind,
                    "auroc": r.auroc,
                    "runtime_ms": r.runtime_ms,
                }
                for r in self.rows
            ]
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        data = json.loads(text)
        report = cls()
        for r in data["rows"]:
            report.add(r["in"], r["out"], r["score"], r["auroc"], r["runtime_ms"])
        return report
