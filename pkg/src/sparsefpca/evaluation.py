"""Forecast scoring: MSE, R^2, near/far and early/late subgroups, residual-on-biomarker update."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from sparsefpca.errors import DataError

NEAR_MONTHS = 6.0
EARLY_MONTHS = 24.0
# visit times pass through rescaling, so boundary comparisons allow rounding slack
BOUNDARY_TOL = 1e-9


@dataclass(frozen=True)
class ForecastResult:
    subject_id: str
    t_last: float
    truth: float
    prediction: float
    gap: float
    near: bool
    early: bool

    @property
    def error(self) -> float:
        return self.truth - self.prediction

    @property
    def squared_error(self) -> float:
        return self.error**2


def make_forecast_result(subject_id, t_last, truth, prediction, gap,
                         near_months=NEAR_MONTHS, early_months=EARLY_MONTHS) -> ForecastResult:
    if not gap > 0:
        raise DataError(f"subject {subject_id}: gap to previous visit must be positive")
    return ForecastResult(
        subject_id=str(subject_id),
        t_last=float(t_last),
        truth=float(truth),
        prediction=float(prediction),
        gap=float(gap),
        near=bool(gap <= near_months + BOUNDARY_TOL),
        early=bool(t_last <= early_months + BOUNDARY_TOL),
    )


def write_forecast_csv(results: Sequence[ForecastResult], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject", "t_last", "truth", "prediction", "error", "gap", "near_far", "early_late"])
        for r in results:
            writer.writerow([
                r.subject_id, repr(r.t_last), repr(r.truth), repr(r.prediction), repr(r.error), repr(r.gap),
                "near" if r.near else "far", "early" if r.early else "late",
            ])


def read_forecast_csv(path) -> list[ForecastResult]:
    with open(path, newline="") as fh:
        return [
            ForecastResult(
                row["subject"], float(row["t_last"]), float(row["truth"]), float(row["prediction"]),
                float(row["gap"]), row["near_far"] == "near", row["early_late"] == "early",
            )
            for row in csv.DictReader(fh)
        ]


def mse(pairs) -> float:
    """Mean squared difference over ``(truth, prediction)`` pairs."""
    arr = np.asarray(list(pairs) if not isinstance(pairs, np.ndarray) else pairs, dtype=float)
    if arr.size == 0:
        raise DataError("mse of an empty sequence")
    arr = arr.reshape(-1, 2)
    return float(np.mean((arr[:, 0] - arr[:, 1]) ** 2))


def r_squared(mse_model: float, mse_null: float) -> float:
    """Relative MSE reduction over the null model; negative when the model is worse."""
    if not mse_null > 0:
        raise DataError("null-model MSE must be positive")
    if mse_model < 0:
        raise DataError("MSE cannot be negative")
    return 1.0 - mse_model / mse_null


def null_predictions(results: Sequence[ForecastResult], leave_one_out: bool = False) -> np.ndarray:
    """Cohort average of the observed last values, optionally excluding each subject's own value."""
    truths = np.array([r.truth for r in results])
    n = truths.size
    if not leave_one_out:
        return np.full(n, truths.mean())
    if n < 2:
        raise DataError("leave-one-out null needs at least two subjects")
    return (truths.sum() - truths) / (n - 1)


@dataclass
class EvalReport:
    n: int
    mse_null: float
    mse_model: float
    r2: Optional[float]
    subgroups: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)
    null_leave_one_out: bool = False
    near_months: float = NEAR_MONTHS
    early_months: float = EARLY_MONTHS

    def to_dict(self) -> dict:
        return asdict(self)


def subgroup_report(results: Sequence[ForecastResult], null_leave_one_out: bool = False) -> EvalReport:
    if not results:
        raise DataError("no forecast results to evaluate")
    truths = np.array([r.truth for r in results])
    preds = np.array([r.prediction for r in results])
    null = null_predictions(results, null_leave_one_out)
    mse_model = float(np.mean((truths - preds) ** 2))
    mse_null = float(np.mean((truths - null) ** 2))
    groups = {}
    for name, mask in (
        ("near", [r.near for r in results]),
        ("far", [not r.near for r in results]),
        ("early", [r.early for r in results]),
        ("late", [not r.early for r in results]),
    ):
        mask = np.asarray(mask, bool)
        count = int(mask.sum())
        groups[name] = {
            "count": count,
            "mse": float(np.mean((truths[mask] - preds[mask]) ** 2)) if count else None,
        }
    return EvalReport(
        n=len(results),
        mse_null=mse_null,
        mse_model=mse_model,
        r2=r_squared(mse_model, mse_null) if mse_null > 0 else None,
        subgroups=groups,
        residuals={r.subject_id: r.error for r in results},
        null_leave_one_out=null_leave_one_out,
    )


@dataclass
class ResidualUpdate:
    biomarker: str
    transform: str
    n: int
    n_excluded: int
    intercept: float
    slope: float
    p_value: float
    updated: dict
    mse_original: float
    mse_updated: float
    mse_cv: float
    r2: Optional[float]

    def to_dict(self) -> dict:
        return asdict(self)


def _ols(z, r):
    zc = z - z.mean()
    slope = float(zc @ (r - r.mean()) / (zc @ zc))
    return float(r.mean() - slope * z.mean()), slope


def residual_update(
    results: Sequence[ForecastResult],
    biomarker_values: dict,
    biomarker: str = "",
    transform: str = "identity",
) -> ResidualUpdate:
    """Regress forecast residuals on the biomarker at the forecast visit and update the forecasts.

    ``biomarker_values`` maps subject id to the raw biomarker value (or None).
    """
    if transform not in ("identity", "log"):
        raise DataError(f"unknown transform {transform!r}")
    kept = [r for r in results if biomarker_values.get(r.subject_id) is not None]
    n_excluded = len(results) - len(kept)
    if len(kept) < 3:
        raise DataError("residual update needs at least three subjects with the biomarker")
    z = np.array([biomarker_values[r.subject_id] for r in kept], dtype=float)
    if transform == "log":
        if np.any(z <= 0):
            raise DataError(f"{biomarker}: non-positive value under log transform")
        z = np.log(z)
    if np.ptp(z) == 0:
        raise DataError(f"{biomarker}: all values identical, slope undefined")
    resid = np.array([r.error for r in kept])
    if np.all(resid == 0):
        intercept, slope, p_value = 0.0, 0.0, 1.0
    else:
        fit = stats.linregress(z, resid)
        intercept, slope = float(fit.intercept), float(fit.slope)
        p_value = float(fit.pvalue) if math.isfinite(fit.pvalue) else 1.0
    preds = np.array([r.prediction for r in kept])
    truths = np.array([r.truth for r in kept])
    updated = preds + intercept + slope * z
    cv_preds = np.empty_like(preds)
    for i in range(len(kept)):
        mask = np.arange(len(kept)) != i
        if np.ptp(z[mask]) == 0:
            a, b = float(resid[mask].mean()), 0.0
        else:
            a, b = _ols(z[mask], resid[mask])
        cv_preds[i] = preds[i] + a + b * z[i]
    mse_orig = float(np.mean((truths - preds) ** 2))
    mse_upd = float(np.mean((truths - updated) ** 2))
    return ResidualUpdate(
        biomarker=biomarker,
        transform=transform,
        n=len(kept),
        n_excluded=n_excluded,
        intercept=intercept,
        slope=slope,
        p_value=min(max(p_value, 0.0), 1.0),
        updated={r.subject_id: float(u) for r, u in zip(kept, updated)},
        mse_original=mse_orig,
        mse_updated=mse_upd,
        mse_cv=float(np.mean((truths - cv_preds) ** 2)),
        r2=r_squared(mse_upd, mse_orig) if mse_orig > 0 else None,
    )
