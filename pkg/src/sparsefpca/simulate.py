"""Synthetic sparse visit data generated from a known Karhunen-Loeve truth or a random-slope mixed model."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from scipy.special import eval_legendre

from sparsefpca.data import Dataset, Observation, SubjectRecord
from sparsefpca.errors import ConfigError, DataError

MAX_REDRAWS = 1000
# Study-like biomarker scales: mean of the raw value and log-scale spread.
DEFAULT_BIOMARKERS = {"TIMP": (234.0, 0.25), "P3NP": (7.0, 0.4), "HA": (49.0, 0.7), "NT": (130.0, 0.9)}


def _mean_fn(kind: str, params: Sequence[float]):
    if kind == "linear":
        start, end = params
        return lambda t: start + (end - start) * np.asarray(t, float)
    if kind == "constant":
        (c,) = params
        return lambda t: np.full(np.shape(t), float(c))
    if kind == "quadratic":
        a, b, c = params
        return lambda t: a + b * np.asarray(t, float) + c * np.asarray(t, float) ** 2
    raise ConfigError(f"unknown mean form {kind!r}")


def fourier_eigenfunctions(t, n: int) -> np.ndarray:
    """sqrt(2) sin / cos pairs of increasing frequency, shape ``(len(t), n)``."""
    t = np.atleast_1d(np.asarray(t, float))
    cols = []
    for l in range(n):
        freq = 2.0 * np.pi * (l // 2 + 1)
        cols.append(np.sqrt(2.0) * (np.sin(freq * t) if l % 2 == 0 else np.cos(freq * t)))
    return np.column_stack(cols)


def legendre_eigenfunctions(t, n: int) -> np.ndarray:
    """Orthonormal shifted Legendre polynomials of degree 1..n on [0, 1]."""
    t = np.atleast_1d(np.asarray(t, float))
    return np.column_stack([np.sqrt(2 * k + 1) * eval_legendre(k, 2 * t - 1) for k in range(1, n + 1)])


EIGENFUNCTIONS = {"fourier": fourier_eigenfunctions, "legendre": legendre_eigenfunctions}


@dataclass(frozen=True)
class SimTruth:
    mean_kind: str = "linear"
    mean_params: tuple = (102.0, 90.0)
    eigen_kind: str = "fourier"
    eigenvalues: tuple = (400.0, 100.0)
    noise_var: float = 25.0
    n_subjects: int = 200
    # visit design on the rescaled axis: baseline at 0, then a grid every ``visit_step``
    visit_step: float = 0.1
    attendance: Union[float, tuple] = 0.35
    jitter: float = 1.0 / 60.0
    min_visits: int = 2
    max_visits: int = 8
    horizon: float = 60.0
    seed: int = 0

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, float)
        if lam.ndim != 1 or np.any(lam < 0) or np.any(np.diff(lam) > 0):
            raise ConfigError("eigenvalues must be non-negative and descending")
        if self.noise_var < 0:
            raise ConfigError("noise variance must be non-negative")
        p = np.atleast_1d(np.asarray(self.attendance, float))
        if np.any(p <= 0) or np.any(p > 1):
            raise ConfigError("attendance probability must lie in (0, 1]")
        if p.size not in (1, self.grid().size - 1):
            raise ConfigError("attendance must be a scalar or one value per follow-up visit")
        if self.jitter < 0 or self.jitter >= self.visit_step / 2:
            raise ConfigError("jitter must be below half the visit spacing")
        if self.n_subjects < 1:
            raise ConfigError("need at least one subject")
        _mean_fn(self.mean_kind, self.mean_params)
        if self.eigen_kind not in EIGENFUNCTIONS:
            raise ConfigError(f"unknown eigenfunction family {self.eigen_kind!r}")
        if lam.size:
            x, w = np.polynomial.legendre.leggauss(64)
            nodes, weights = 0.5 * (x + 1), 0.5 * w
            phi = self.eigenfunctions(nodes)
            gram = (phi * weights[:, None]).T @ phi
            if np.max(np.abs(gram - np.eye(lam.size))) > 1e-8:
                raise ConfigError("eigenfunctions are not orthonormal")

    @property
    def rank(self) -> int:
        return len(self.eigenvalues)

    def grid(self) -> np.ndarray:
        n = int(round(1.0 / self.visit_step))
        return np.linspace(0.0, n * self.visit_step, n + 1)

    def mean(self, t):
        return _mean_fn(self.mean_kind, self.mean_params)(t)

    def eigenfunctions(self, t) -> np.ndarray:
        return EIGENFUNCTIONS[self.eigen_kind](t, self.rank)

    def covariance(self, s, t) -> np.ndarray:
        lam = np.asarray(self.eigenvalues, float)
        return (self.eigenfunctions(s) * lam) @ self.eigenfunctions(t).T

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_params"] = list(self.mean_params)
        d["eigenvalues"] = list(self.eigenvalues)
        if isinstance(self.attendance, tuple):
            d["attendance"] = list(self.attendance)
        return d


def subject_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Independent generator per (seed, subject, stream) so output does not depend on evaluation order."""
    return np.random.default_rng([seed, index, stream])


def draw_visits(truth: SimTruth, rng: np.random.Generator) -> np.ndarray:
    grid = truth.grid()
    p = np.broadcast_to(np.asarray(truth.attendance, float), (grid.size - 1,))
    for _ in range(MAX_REDRAWS):
        attended = rng.random(grid.size - 1) < p
        n = 1 + int(attended.sum())
        if truth.min_visits <= n <= truth.max_visits:
            follow = grid[1:][attended]
            follow = follow + rng.uniform(-truth.jitter, truth.jitter, follow.size)
            return np.concatenate([[0.0], np.clip(follow, 0.0, 1.0)])
    raise DataError("visit redraw failed; attendance too small for the minimum visit count")


def sample_curves(truth: SimTruth, times, scores: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Noisy observations of the curves with the given scores at ``times`` (rescaled axis).

    A 2-D ``scores`` (one row per curve) gives one row of observations per curve.
    """
    times = np.asarray(times, float)
    signal = truth.mean(times) + np.asarray(scores, float) @ truth.eigenfunctions(times).T
    noise = np.sqrt(truth.noise_var) * rng.standard_normal(signal.shape)
    return signal + noise


def _study(truths: Mapping[str, SimTruth], biomarkers: Mapping[str, tuple], seed: int):
    names = list(truths)
    design = truths[names[0]]
    subjects, scores = [], {name: [] for name in names}
    lam = {name: np.sqrt(np.asarray(tr.eigenvalues, float)) for name, tr in truths.items()}
    for i in range(design.n_subjects):
        rng = subject_rng(seed, i)
        times = draw_visits(design, rng)
        values = {}
        for name in names:
            xi = lam[name] * rng.standard_normal(truths[name].rank)
            scores[name].append(xi)
            values[name] = sample_curves(truths[name], times, xi, rng)
        markers = {}
        for b, (mean, sd) in biomarkers.items():
            level = rng.standard_normal()
            e = 0.6 * level + 0.8 * rng.standard_normal(times.size)
            markers[b] = mean * np.exp(sd * e - 0.5 * sd * sd)
        obs = tuple(
            Observation(
                float(t * design.horizon),
                {name: float(values[name][j]) for name in names},
                {b: float(markers[b][j]) for b in biomarkers},
            )
            for j, t in enumerate(times)
        )
        subjects.append(SubjectRecord(f"S{i + 1:04d}", obs))
    ds = Dataset(tuple(subjects), horizon=design.horizon)
    return ds, {name: np.array(s).reshape(design.n_subjects, truths[name].rank) for name, s in scores.items()}


def generate(truth: SimTruth, outcome: str = "FVC", biomarkers: Optional[Mapping[str, tuple]] = None):
    """Draw ``truth.n_subjects`` sparse noisy curves; returns the dataset (months) and the true scores."""
    ds, scores = _study({outcome: truth}, {} if biomarkers is None else biomarkers, truth.seed)
    return ds, scores[outcome]


def study_truths(n_subjects: int = 200, seed: int = 0, **overrides) -> dict[str, SimTruth]:
    """Default three-outcome truth with baseline means on the study's scale."""
    means = {"FVC": (102.0, 90.0), "TLC": (93.0, 84.0), "DLCO": (65.0, 55.0)}
    scale = {"FVC": 1.0, "TLC": 0.6, "DLCO": 0.5}
    out = {}
    for name, mp in means.items():
        lam = tuple(scale[name] * v for v in (400.0, 100.0))
        out[name] = SimTruth(mean_params=mp, eigenvalues=lam, n_subjects=n_subjects, seed=seed, **overrides)
    return out


def generate_study(truths: Mapping[str, SimTruth], biomarkers: Mapping[str, tuple] = DEFAULT_BIOMARKERS, seed: int = 0):
    """Several outcomes (and biomarkers) observed on one shared visit schedule."""
    return _study(truths, biomarkers, seed)


@dataclass(frozen=True)
class LmmTruth:
    beta: tuple = (100.0, -0.5, -2.0)
    re_cov: tuple = ((100.0, -1.0), (-1.0, 0.25))
    noise_var: float = 25.0
    n_subjects: int = 200
    visit_months: tuple = (0.0, 6.0, 12.0)
    attendance: tuple = (1.0, 0.6, 0.6)
    biomarker: str = "TIMP"
    outcome: str = "FVC"
    log_mean: float = 5.4
    log_sd: float = 0.5
    seed: int = 0

    def __post_init__(self):
        cov = np.asarray(self.re_cov, float)
        if cov.shape != (2, 2) or not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov).min() < -1e-12:
            raise ConfigError("random-effects covariance must be 2x2 PSD")
        if self.n_subjects < 2:
            raise ConfigError("need at least two subjects")
        if self.noise_var < 0:
            raise ConfigError("noise variance must be non-negative")
        p = np.asarray(self.attendance, float)
        if p.shape != (len(self.visit_months),) or np.any(p <= 0) or np.any(p > 1):
            raise ConfigError("one attendance probability in (0, 1] per visit")


def generate_lmm(truth: LmmTruth, return_effects: bool = False):
    """Data from the random intercept and slope model; biomarker is log-normal, stored on its raw scale."""
    cov = np.asarray(truth.re_cov, float)
    w, v = np.linalg.eigh(cov)
    root = v * np.sqrt(np.clip(w, 0, None))
    months = np.asarray(truth.visit_months, float)
    b0, b1, b2 = truth.beta
    subjects, effects = [], []
    for i in range(truth.n_subjects):
        rng = subject_rng(truth.seed, i)
        for _ in range(MAX_REDRAWS):
            attended = rng.random(months.size) < np.asarray(truth.attendance)
            if attended.sum() >= 2:
                break
        else:
            raise DataError("visit redraw failed")
        t = months[attended]
        gamma = root @ rng.standard_normal(2)
        x = truth.log_mean + truth.log_sd * rng.standard_normal(t.size)
        e = np.sqrt(truth.noise_var) * rng.standard_normal(t.size)
        y = b0 + b1 * t + b2 * x + gamma[0] + gamma[1] * t + e
        effects.append(gamma)
        obs = tuple(
            Observation(float(tj), {truth.outcome: float(yj)}, {truth.biomarker: float(np.exp(xj))})
            for tj, yj, xj in zip(t, y, x)
        )
        subjects.append(SubjectRecord(f"S{i + 1:04d}", obs))
    ds = Dataset(tuple(subjects))
    return (ds, np.array(effects)) if return_effects else ds
