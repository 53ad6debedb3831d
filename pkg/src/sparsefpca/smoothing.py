"""Local linear kernel smoothing of the pooled mean curve."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from sparsefpca.errors import DataError, NumericalError

MAX_WIDENINGS = 3


def epanechnikov(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    return np.maximum(0.75 * (1.0 - u * u), 0.0)


def gaussian(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    return np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi)


KERNELS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "epanechnikov": epanechnikov,
    "gaussian": gaussian,
}


def default_grid(n: int = 101) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


def default_bandwidths() -> np.ndarray:
    return np.geomspace(0.05, 0.5, 10)


@dataclass(frozen=True)
class MeanEstimate:
    grid: np.ndarray
    values: np.ndarray
    bandwidth: float
    kernel: str = "epanechnikov"

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if grid[0] < 0.0 or grid[-1] > 1.0:
            raise ValueError("grid must lie within [0, 1]")
        if values.shape != grid.shape or not np.all(np.isfinite(values)):
            raise ValueError("values must be finite and match the grid")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    def __call__(self, t):
        """Linear interpolation of the grid values."""
        return np.interp(t, self.grid, self.values)

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.tolist(),
            "values": self.values.tolist(),
            "bandwidth": float(self.bandwidth),
            "kernel": self.kernel,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MeanEstimate":
        return cls(np.asarray(d["grid"]), np.asarray(d["values"]), float(d["bandwidth"]), d["kernel"])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "value"])
            for t, v in zip(self.grid, self.values):
                writer.writerow([repr(float(t)), repr(float(v))])


def _intercepts(w, d, y):
    """Intercepts of weighted line fits, one per row of the weight matrix ``w``; NaN where degenerate."""
    wd = w * d
    s0 = w.sum(axis=1)
    s1 = wd.sum(axis=1)
    s2 = np.einsum("ij,ij->i", wd, d)
    r0 = w @ y
    r1 = wd @ y
    det = s0 * s2 - s1 * s1
    # relative test: a window with a single distinct t has det == 0 up to rounding
    ok = (s0 > 0) & (det > 1e-12 * np.maximum(s0 * s2, np.finfo(float).tiny))
    out = np.full(s0.shape, np.nan)
    out[ok] = (s2[ok] * r0[ok] - s1[ok] * r1[ok]) / det[ok]
    # only one distinct design point in the window: the constant fit is still defined
    single = (s0 > 0) & ~ok & (s2 <= 1e-24 * np.maximum(s0, 1.0))
    out[single] = r0[single] / s0[single]
    return out


def _local_linear_once(t, y, t0, h, kernel):
    d = t[None, :] - t0[:, None]
    return _intercepts(kernel(d / h), d, y)


def local_linear(t, y, t0, bandwidth: float, kernel: str = "epanechnikov") -> np.ndarray:
    """Evaluate the local linear smoother directly at ``t0``.

    Points whose window is degenerate are retried with the bandwidth doubled,
    at most ``MAX_WIDENINGS`` times.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    t0 = np.atleast_1d(np.asarray(t0, dtype=float))
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    kern = KERNELS[kernel]
    out = _local_linear_once(t, y, t0, bandwidth, kern)
    h = bandwidth
    for _ in range(MAX_WIDENINGS):
        bad = np.isnan(out)
        if not bad.any():
            break
        h *= 2.0
        out[bad] = _local_linear_once(t, y, t0[bad], h, kern)
    if np.isnan(out).any():
        where = t0[np.isnan(out)][0]
        raise NumericalError(f"local linear fit degenerate at t0={where:.6g} even after widening")
    return out


def fit_local_linear(
    points: Iterable[tuple[float, float]] | np.ndarray,
    bandwidth: float,
    grid: Optional[Sequence[float]] = None,
    kernel: str = "epanechnikov",
) -> MeanEstimate:
    pts = np.asarray(list(points) if not isinstance(points, np.ndarray) else points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DataError("points must be (t, y) pairs")
    t, y = pts[:, 0], pts[:, 1]
    if np.unique(t).size < 2:
        raise DataError("need at least two distinct time points")
    grid = default_grid() if grid is None else np.asarray(grid, dtype=float)
    values = local_linear(t, y, grid, bandwidth, kernel)
    return MeanEstimate(grid, values, float(bandwidth), kernel)


def bandwidth_cv_scores(
    subjects: Sequence[tuple[np.ndarray, np.ndarray]],
    candidates: Sequence[float],
    kernel: str = "epanechnikov",
    chunk: int = 64,
) -> np.ndarray:
    """Leave-one-subject-out squared prediction error for each candidate; inf where degenerate.

    Every point is predicted from all other subjects' points by zeroing the
    kernel weights within its own subject; windows that are degenerate
    after that fall back to the widening rule of ``local_linear``.
    """
    t_all = np.concatenate([np.asarray(s[0], float) for s in subjects])
    y_all = np.concatenate([np.asarray(s[1], float) for s in subjects])
    owner = np.concatenate([np.full(len(s[0]), i) for i, s in enumerate(subjects)])
    order = np.argsort(t_all, kind="stable")
    t_all, y_all, owner = t_all[order], y_all[order], owner[order]
    kern = KERNELS[kernel]
    compact = kernel == "epanechnikov"
    totals = np.zeros(len(candidates))
    for c, h in enumerate(candidates):
        for lo in range(0, t_all.size, chunk):
            rows = slice(lo, lo + chunk)
            # rows are sorted, so only a band of columns can carry weight
            if compact:
                a = np.searchsorted(t_all, t_all[rows][0] - h, side="left")
                b = np.searchsorted(t_all, t_all[rows][-1] + h, side="right")
            else:
                a, b = 0, t_all.size
            cols = slice(a, b)
            d = t_all[None, cols] - t_all[rows, None]
            w = kern(d / h)
            w[owner[rows, None] == owner[None, cols]] = 0.0
            pred = _intercepts(w, d, y_all[cols])
            for i in np.flatnonzero(np.isnan(pred)):
                keep = owner != owner[lo + i]
                try:
                    pred[i] = local_linear(t_all[keep], y_all[keep], t_all[lo + i], h, kernel)[0]
                except NumericalError:
                    pred[i] = np.inf
            totals[c] += float(np.sum((y_all[rows] - pred) ** 2))
    return np.where(np.isfinite(totals), totals, np.inf)


def select_bandwidth(
    subjects: Sequence[tuple[np.ndarray, np.ndarray]],
    candidates: Optional[Sequence[float]] = None,
    kernel: str = "epanechnikov",
) -> float:
    """Candidate with the smallest leave-one-subject-out error; ties go to the larger bandwidth."""
    cands = default_bandwidths() if candidates is None else np.asarray(candidates, dtype=float)
    if cands.size == 0 or np.any(cands <= 0):
        raise ValueError("candidates must be positive")
    if cands.size == 1:
        return float(cands[0])
    if len(subjects) < 2:
        raise DataError("bandwidth selection needs at least two subjects")
    scores = bandwidth_cv_scores(subjects, cands, kernel)
    if not np.isfinite(scores).any():
        raise NumericalError("every bandwidth candidate gave a degenerate fit")
    best = np.min(scores)
    # errors at rounding level relative to the data's size count as ties
    scale = sum(float(np.sum(np.asarray(s[1], float) ** 2)) for s in subjects)
    tol = max(1e-9 * best, 1e-20 * scale)
    tied = np.flatnonzero(scores <= best + tol)
    return float(np.max(cands[tied]))
