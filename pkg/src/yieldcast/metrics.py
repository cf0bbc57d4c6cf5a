"""Forecast accuracy metrics and model comparison tables.

Metrics are computed on the yield (Mg/Ha) scale at group level:
prediction R-squared, mean squared prediction error, and mean absolute
prediction error. The absolute-error column is labeled MAPE in the
rendered tables to match the convention of the comparison reports, but it
is a plain mean absolute error in Mg/Ha, not a percentage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class MetricReport:
    """Accuracy summary for one model run.

    ``r2`` is stored as a fraction (may be negative); tables render it as a
    percentage. ``labels`` carries presentation metadata such as
    aggregation method, model name, group count, and epsilon policy.
    """

    r2: float
    mspe: float
    mape: float
    predicted_average: float
    n: int
    labels: dict[str, str] = field(default_factory=dict)


def compute_metrics(observed: np.ndarray, predicted: np.ndarray,
                    labels: dict[str, str] | None = None) -> MetricReport:
    """Prediction R-squared, MSPE, and mean absolute error per group.

    R2 = 1 - sum((y - yhat)^2) / sum((y - ybar)^2); constant observations
    make the denominator zero and are rejected.
    """
    y = np.asarray(observed, dtype=float)
    yhat = np.asarray(predicted, dtype=float)
    if y.shape != yhat.shape or y.ndim != 1:
        raise ValidationError(f"observed {y.shape} and predicted {yhat.shape} must match")
    if y.size < 2:
        raise ValidationError("need at least 2 groups to score")
    if not (np.isfinite(y).all() and np.isfinite(yhat).all()):
        raise ValidationError("metrics inputs must be finite")
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0:
        raise ValidationError("constant observations: prediction R-squared undefined")
    err = y - yhat
    return MetricReport(
        r2=1.0 - float(np.sum(err**2)) / sst,
        mspe=float(np.mean(err**2)),
        mape=float(np.mean(np.abs(err))),
        predicted_average=float(np.mean(yhat)),
        n=int(y.size),
        labels=dict(labels or {}),
    )


def _fmt_r2(r2: float) -> str:
    return format(round(r2 * 100, 3), "g")


def _row_key(report: MetricReport) -> tuple:
    groups = report.labels.get("groups", "")
    try:
        groups_key = int(groups)
    except ValueError:
        groups_key = 0
    return (groups_key, report.labels.get("aggregation", ""))


def comparison_table(reports: list[MetricReport]) -> str:
    """Render reports as an aligned text table.

    Rows are sorted by (group count, aggregation method). An epsilon column
    is included when any report carries an epsilon label; flags (such as
    isolated-cluster warnings) are appended after the numbers.
    """
    if not reports:
        raise ValidationError("no reports to tabulate")
    with_eps = any("epsilon" in r.labels for r in reports)
    header = ["Aggregation", "Model", "#Groups"]
    if with_eps:
        header.append("Epsilon")
    header += ["R2(%)", "MSPE", "MAPE", "Predicted Average"]
    rows = [header]
    for r in sorted(reports, key=_row_key):
        row = [
            r.labels.get("aggregation", "-"),
            r.labels.get("model", "-"),
            r.labels.get("groups", "-"),
        ]
        if with_eps:
            row.append(r.labels.get("epsilon", "-"))
        row += [_fmt_r2(r.r2), f"{r.mspe:.3f}", f"{r.mape:.3f}",
                f"{r.predicted_average:.3f}"]
        if r.labels.get("flag"):
            row[-1] += f"  [{r.labels['flag']}]"
        rows.append(row)
    widths = [max(len(row[c]) for row in rows) for c in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)
