"""Metrics, non-neural baselines, and report rendering.

Metrics are computed in original ILI-percent units after inverse scaling.
A report row covers one (state, method) pair with per-horizon Pearson and
RMSE plus an aggregate, where the aggregation mode is one of:

* ``mean``   — mean of the per-horizon metrics (default),
* ``pooled`` — metric over all (window, horizon) pairs pooled together,
* ``h1``     — the horizon-1 metrics alone.
"""

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from fluseq.errors import ConfigError, DataError, UndefinedCorrelationError

AGGREGATIONS = ("mean", "pooled", "h1")
METHODS = ("seasonal_naive", "ar_ls", "simple_lstm", "seq2seq", "seq2seq_attention")
NEURAL_METHODS = ("simple_lstm", "seq2seq", "seq2seq_attention")


def pearson(a, b):
    """Sample Pearson correlation.

    Computed as cov / sqrt(var_a * var_b) with a single square root, so
    exactly (anti-)linear integer data yields exactly +/-1.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError(f"pearson: shapes {a.shape} and {b.shape} differ")
    if a.size < 2:
        raise DataError("pearson needs at least two points")
    da = a - a.mean()
    db = b - b.mean()
    denom_sq = float(np.dot(da, da)) * float(np.dot(db, db))
    if denom_sq == 0.0:
        raise UndefinedCorrelationError(
            "correlation undefined: an argument has zero variance"
        )
    return float(np.dot(da, db)) / float(np.sqrt(denom_sq))


def rmse(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DataError(f"rmse: shapes {a.shape} and {b.shape} differ")
    if a.size < 1:
        raise DataError("rmse needs at least one point")
    diff = a - b
    return float(np.sqrt(np.mean(diff * diff)))


@dataclass
class EvalReport:
    """Per-horizon and aggregate metrics for one (state, method) pair."""

    state: str
    method: str
    pearson_by_horizon: list
    rmse_by_horizon: list
    aggregate_pearson: float
    aggregate_rmse: float
    aggregation: str

    def to_dict(self):
        return {
            "state": self.state,
            "method": self.method,
            "pearson_by_horizon": list(self.pearson_by_horizon),
            "rmse_by_horizon": list(self.rmse_by_horizon),
            "aggregate_pearson": self.aggregate_pearson,
            "aggregate_rmse": self.aggregate_rmse,
            "aggregation": self.aggregation,
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(**payload)


def per_horizon_evaluate(predictions, truth, state="", method="", aggregation="mean"):
    """Metrics per forecast horizon over a set of windows.

    predictions/truth: (windows, horizons) arrays in original units.
    """
    if aggregation not in AGGREGATIONS:
        raise ConfigError(f"unknown aggregation {aggregation!r}; use {AGGREGATIONS}")
    predictions = np.asarray(predictions, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if predictions.shape != truth.shape or predictions.ndim != 2:
        raise DataError(
            f"predictions {predictions.shape} and truth {truth.shape} must be "
            "matching (windows, horizons) arrays"
        )
    if predictions.shape[0] == 0:
        raise DataError("empty test set")
    horizons = predictions.shape[1]
    p_by_h = []
    r_by_h = []
    for h in range(horizons):
        try:
            p_by_h.append(pearson(predictions[:, h], truth[:, h]))
        except UndefinedCorrelationError as exc:
            raise UndefinedCorrelationError(f"horizon {h + 1}: {exc}") from exc
        r_by_h.append(rmse(predictions[:, h], truth[:, h]))
    if aggregation == "mean":
        agg_p = float(np.mean(p_by_h))
        agg_r = float(np.mean(r_by_h))
    elif aggregation == "pooled":
        agg_p = pearson(predictions.reshape(-1), truth.reshape(-1))
        agg_r = rmse(predictions.reshape(-1), truth.reshape(-1))
    else:
        agg_p = p_by_h[0]
        agg_r = r_by_h[0]
    return EvalReport(
        state=state,
        method=method,
        pearson_by_horizon=p_by_h,
        rmse_by_horizon=r_by_h,
        aggregate_pearson=agg_p,
        aggregate_rmse=agg_r,
        aggregation=aggregation,
    )


def seasonal_naive_forecast(history, horizon=4, period=52):
    """Predict week t+h as the observed value one period earlier."""
    history = np.asarray(history, dtype=float)
    if history.size < period:
        raise DataError(
            f"seasonal naive needs {period} weeks of history, got {history.size}"
        )
    if horizon > period:
        raise DataError(f"horizon {horizon} exceeds the period {period}")
    start = history.size - period
    return history[start : start + horizon].copy()


@dataclass
class ArLsFit:
    """Least-squares autoregression: intercept plus `order` lag weights."""

    intercept: float
    lag_weights: np.ndarray  # lag_weights[0] multiplies the most recent value

    @property
    def order(self):
        return len(self.lag_weights)


def ar_ls_fit(history, order=10, ridge=1e-6):
    """Fit an AR(order) model by ordinary least squares.

    Falls back to ridge-regularized lag weights (intercept unpenalized)
    when the design matrix is rank deficient.
    """
    history = np.asarray(history, dtype=float)
    n = history.size
    if n < 2 * order + 1:
        raise DataError(f"AR({order}) needs at least {2 * order + 1} points, got {n}")
    rows = n - order
    design = np.ones((rows, order + 1))
    for lag in range(1, order + 1):
        design[:, lag] = history[order - lag : n - lag]
    target = history[order:]
    solution, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
    if rank < order + 1:
        penalty = np.eye(order + 1) * ridge
        penalty[0, 0] = 0.0
        gram = design.T @ design + penalty
        solution = np.linalg.solve(gram, design.T @ target)
    return ArLsFit(intercept=float(solution[0]), lag_weights=solution[1:].copy())


def ar_ls_forecast(fit, history, horizon=4):
    """Multi-step forecast by recursive substitution."""
    history = np.asarray(history, dtype=float)
    if history.size < fit.order:
        raise DataError(
            f"AR forecast needs {fit.order} trailing values, got {history.size}"
        )
    buffer = list(history[-fit.order :])
    out = []
    for _ in range(horizon):
        recent = buffer[::-1][: fit.order]
        value = fit.intercept + float(np.dot(fit.lag_weights, recent))
        out.append(value)
        buffer.append(value)
    return np.array(out)


def rolling_forecasts(full_history, first_cut, n_windows, horizon, forecast_fn):
    """Apply forecast_fn to expanding histories; window m sees
    full_history[:first_cut + m]."""
    preds = np.empty((n_windows, horizon))
    for m in range(n_windows):
        preds[m] = forecast_fn(full_history[: first_cut + m])
    return preds


def truth_matrix(full_history, first_cut, n_windows, horizon):
    out = np.empty((n_windows, horizon))
    for m in range(n_windows):
        out[m] = full_history[first_cut + m : first_cut + m + horizon]
    return out


# --- report files -----------------------------------------------------------


def reports_to_csv(reports, fh):
    """methods x horizons rows: state, method, horizon, pearson, rmse."""
    writer = csv.writer(fh)
    writer.writerow(["state", "method", "horizon", "pearson", "rmse"])
    for report in reports:
        for h, (p, r) in enumerate(
            zip(report.pearson_by_horizon, report.rmse_by_horizon), start=1
        ):
            writer.writerow([report.state, report.method, h, repr(p), repr(r)])


def reports_to_json(reports):
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)


def reports_from_json(text):
    return [EvalReport.from_dict(d) for d in json.loads(text)]


def _markdown_table(states, methods, cell, best):
    lines = ["| State | " + " | ".join(methods) + " |"]
    lines.append("|" + "---|" * (len(methods) + 1))
    for state in states:
        values = [cell(state, m) for m in methods]
        rendered = []
        finite = [v for v in values if v is not None]
        target = best(finite) if finite else None
        for v in values:
            if v is None:
                rendered.append("")
            else:
                text = f"{v:.3f}" if best is max else f"{v:.2f}"
                rendered.append(f"**{text}**" if v == target else text)
        lines.append(f"| {state} | " + " | ".join(rendered) + " |")
    return "\n".join(lines)


def render_markdown(reports, methods=None, states=None):
    """States x methods tables (Pearson then RMSE), best value per row in
    bold: highest correlation, lowest error.  An Average row closes each
    table when more than one state is present."""
    by_key = {(r.state, r.method): r for r in reports}
    if states is None:
        states = sorted({r.state for r in reports})
    if methods is None:
        methods = [m for m in METHODS if any(r.method == m for r in reports)]
    rows = list(states)
    if len(states) > 1:
        rows.append("Average")

    def lookup(attr):
        def cell(state, method):
            if state == "Average":
                vals = [
                    getattr(by_key[(s, method)], attr)
                    for s in states
                    if (s, method) in by_key
                ]
                return float(np.mean(vals)) if vals else None
            report = by_key.get((state, method))
            return None if report is None else getattr(report, attr)

        return cell

    parts = [
        "## Pearson correlation (aggregate per state)",
        _markdown_table(rows, methods, lookup("aggregate_pearson"), max),
        "",
        "## RMSE (aggregate per state)",
        _markdown_table(rows, methods, lookup("aggregate_rmse"), min),
    ]
    return "\n".join(parts) + "\n"


def reports_csv_text(reports):
    buf = io.StringIO()
    reports_to_csv(reports, buf)
    return buf.getvalue()
