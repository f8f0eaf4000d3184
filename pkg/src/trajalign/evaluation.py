"""Task metrics and the ablation report."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DegenerateTruth, MissingCell, NotOnSimplex, ShapeMismatch, SingleClassTruth

SIMPLEX_TOL = 1e-6


def regression_metrics(pred, truth) -> tuple[float, float, float]:
    """(MAE, RMSE, R²)."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(truth, dtype=np.float64).ravel()
    if len(p) != len(y) or len(y) < 2:
        raise ShapeMismatch(f"need equal lengths >= 2, got {len(p)} and {len(y)}")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        raise DegenerateTruth("R² is undefined when every truth value is identical")
    err = p - y
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err**2)))
    r2 = 1.0 - float(np.sum(err**2)) / ss_tot
    return mae, rmse, r2


def average_precision(scores: np.ndarray, positive: np.ndarray) -> float:
    """Step-wise area under the precision-recall curve; tied scores form one threshold."""
    order = np.argsort(-scores, kind="stable")
    s, pos = scores[order], positive[order].astype(np.float64)
    tp = np.cumsum(pos)
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]  # final index of each distinct score
    tp_at = tp[last]
    precision = tp_at / (last + 1)
    recall_gain = np.diff(np.r_[0.0, tp_at]) / tp[-1]
    return float(np.sum(recall_gain * precision))


def classification_metrics(scores, truth) -> tuple[float, float]:
    """(macro F1 over argmax predictions, macro one-vs-rest average precision).

    Both macro averages run over every class column of ``scores``; classes
    absent from the truth contribute to F1 (as 0 if predicted, skipped if
    neither predicted nor present) and are skipped for AUPRC.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(truth).astype(np.int64).ravel()
    if s.ndim != 2 or len(s) != len(y):
        raise ShapeMismatch(f"scores {s.shape} do not match {len(y)} labels")
    present = np.unique(y)
    if len(present) < 2:
        raise SingleClassTruth("classification metrics need at least two classes in the truth")
    pred = s.argmax(axis=1)
    f1s = []
    for c in range(s.shape[1]):
        tp = np.sum((pred == c) & (y == c))
        fp = np.sum((pred == c) & (y != c))
        fn = np.sum((pred != c) & (y == c))
        if tp + fp + fn == 0:
            continue
        f1s.append(2 * tp / (2 * tp + fp + fn))
    aps = [average_precision(s[:, c], y == c) for c in present if c < s.shape[1]]
    return float(np.mean(f1s)), float(np.mean(aps))


def check_simplex(x: np.ndarray, name: str, tol: float = SIMPLEX_TOL) -> None:
    if np.any(x < -tol) or np.any(np.abs(x.sum(axis=-1) - 1.0) > tol):
        raise NotOnSimplex(f"{name} rows must be non-negative and sum to 1")


def distribution_metrics(pred, truth) -> tuple[float, float]:
    """(mean L1 distance, mean cosine similarity)."""
    p = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    y = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    if p.shape != y.shape:
        raise ShapeMismatch(f"prediction shape {p.shape} != truth shape {y.shape}")
    check_simplex(p, "prediction")
    check_simplex(y, "truth")
    l1 = np.abs(p - y).sum(axis=1)
    cos = (p * y).sum(axis=1) / (np.linalg.norm(p, axis=1) * np.linalg.norm(y, axis=1))
    return float(l1.mean()), float(cos.mean())


METRIC_NAMES = {
    "regression": ("MAE", "RMSE", "R2"),
    "classification": ("F1", "AUPRC"),
    "distribution": ("L1", "Cosine"),
}


@dataclass
class MetricReport:
    task: str
    metrics: dict[str, float]
    n: int
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("a report needs at least one sample")
        bad = [k for k, v in self.metrics.items() if not math.isfinite(v)]
        if bad:
            raise ValueError(f"non-finite metrics: {bad}")

    def to_json(self) -> str:
        return json.dumps({"task": self.task, "metrics": self.metrics, "n": self.n, "config": self.config}, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MetricReport":
        rec = json.loads(line)
        return cls(rec["task"], rec["metrics"], rec["n"], rec.get("config", {}))


def evaluate(task: str, task_type: str, pred, truth, config: Mapping | None = None) -> MetricReport:
    if task_type == "regression":
        values = regression_metrics(pred, truth)
    elif task_type == "classification":
        values = classification_metrics(pred, truth)
    elif task_type == "distribution":
        values = distribution_metrics(pred, truth)
    else:
        raise ValueError(f"unknown task type {task_type!r}")
    return MetricReport(task, dict(zip(METRIC_NAMES[task_type], values)), len(np.asarray(truth)), dict(config or {}))


CELL_KEYS = ("alignment_mode", "modality_mode", "time_mode")


def cell_of(report: MetricReport) -> tuple[str, str, str]:
    return tuple(str(report.config.get(k)) for k in CELL_KEYS)


@dataclass
class AblationRow:
    cell: tuple[str, str, str]
    mean: dict[str, float]
    std: dict[str, float]
    seeds: list[int]


def ablation_report(reports: Iterable[MetricReport], cells: Sequence[tuple[str, str, str]]) -> list[AblationRow]:
    """Mean and population standard deviation over seeds, one row per requested cell."""
    grouped: dict[tuple, list[MetricReport]] = {}
    for r in reports:
        grouped.setdefault(cell_of(r), []).append(r)
    rows = []
    for cell in cells:
        runs = grouped.get(tuple(cell))
        if not runs:
            raise MissingCell(f"no completed run for cell {cell}")
        names = list(runs[0].metrics)
        values = {m: np.array([r.metrics[m] for r in runs]) for m in names}
        rows.append(
            AblationRow(
                tuple(cell),
                {m: float(v.mean()) for m, v in values.items()},
                {m: float(v.std()) for m, v in values.items()},
                sorted(int(r.config.get("seed", 0)) for r in runs),
            )
        )
    return rows


def format_table(rows: Sequence[AblationRow]) -> str:
    """Aligned text table of ``mean ± std`` per metric."""
    if not rows:
        return ""
    metrics = list(rows[0].mean)
    header = ["alignment", "modality", "time"] + metrics + ["seeds"]
    body = [
        list(r.cell) + [f"{r.mean[m]:.4f} ± {r.std[m]:.4f}" for m in metrics] + [",".join(map(str, r.seeds))]
        for r in rows
    ]
    widths = [max(len(str(line[i])) for line in [header] + body) for i in range(len(header))]
    fmt = lambda line: "  ".join(str(v).ljust(w) for v, w in zip(line, widths)).rstrip()
    return "\n".join([fmt(header), fmt(["-" * w for w in widths])] + [fmt(b) for b in body]) + "\n"


def rows_to_jsonl(rows: Sequence[AblationRow]) -> str:
    return "".join(
        json.dumps(dict(zip(CELL_KEYS, r.cell), mean=r.mean, std=r.std, seeds=r.seeds), sort_keys=True) + "\n"
        for r in rows
    )
