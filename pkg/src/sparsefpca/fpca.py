"""Reduced-rank functional PCA for sparse curves.

The covariance kernel is C(s, t) = sum_l lambda_l phi_l(s) phi_l(t) with each
phi_l expanded in an orthonormalized cubic B-spline basis. Eigenvalues,
eigenfunction coefficients and the noise variance are fitted by maximizing
the Gaussian marginal likelihood of the mean-centred observations; scores are
conditional expectations given a subject's observations.
"""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from sparsefpca.basis import SplineBasis, orthonormal_basis
from sparsefpca.data import Dataset, SubjectRecord
from sparsefpca.errors import DataError, NumericalError
from sparsefpca.evaluation import EARLY_MONTHS, NEAR_MONTHS, make_forecast_result
from sparsefpca.smoothing import MeanEstimate, default_grid, fit_local_linear, local_linear, select_bandwidth

LOG_2PI = float(np.log(2.0 * np.pi))
MAX_ITER = 500
REL_TOL = 1e-8
COLLAPSE_RATIO = 1e-10
DEFAULT_L_GRID = (1, 2, 3)
DEFAULT_M_GRID = (5, 8, 11, 14)


@dataclass(frozen=True)
class FpcaModel:
    mean: MeanEstimate
    basis: SplineBasis
    coefficients: np.ndarray
    eigenvalues: np.ndarray
    noise_var: float
    fit_log: dict = field(default_factory=dict)
    outcome: str = ""

    def __post_init__(self):
        B = np.atleast_2d(np.asarray(self.coefficients, float))
        lam = np.atleast_1d(np.asarray(self.eigenvalues, float))
        if not self.basis.is_orthonormal:
            raise ValueError("model basis must be orthonormalized")
        if B.shape != (self.basis.n_basis, lam.size):
            raise ValueError("coefficients must be M x L")
        if lam.size > self.basis.n_basis:
            raise ValueError("rank cannot exceed the basis size")
        if np.any(lam < 0) or not self.noise_var > 0:
            raise ValueError("eigenvalues must be non-negative and the noise variance positive")
        object.__setattr__(self, "coefficients", B)
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "noise_var", float(self.noise_var))

    @property
    def rank(self) -> int:
        return self.eigenvalues.size

    def eigenfunctions(self, t) -> np.ndarray:
        """``(len(t), L)`` matrix of eigenfunction values."""
        return self.basis.design(_check_unit(t)) @ self.coefficients

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome,
            "rank": self.rank,
            "basis": self.basis.to_dict(),
            "coefficients": self.coefficients.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "noise_var": self.noise_var,
            "mean": self.mean.to_dict(),
            "fit_log": self.fit_log,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FpcaModel":
        return cls(
            mean=MeanEstimate.from_dict(d["mean"]),
            basis=SplineBasis.from_dict(d["basis"]),
            coefficients=np.asarray(d["coefficients"], float).reshape(d["basis"]["n_basis"], d["rank"]),
            eigenvalues=np.asarray(d["eigenvalues"], float),
            noise_var=float(d["noise_var"]),
            fit_log=d.get("fit_log", {}),
            outcome=d.get("outcome", ""),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FpcaModel":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class SubjectScores:
    subject_id: str
    scores: np.ndarray
    cond_cov: np.ndarray


@dataclass
class ModelSelectionResult:
    rank: int
    n_basis: int
    scores: dict
    folds: list = field(default_factory=list)
    bandwidth: Optional[float] = None

    @property
    def chosen(self) -> tuple[int, int]:
        return self.rank, self.n_basis

    def table(self) -> list[dict]:
        return [{"L": L, "M": M, "cv_score": s} for (L, M), s in sorted(self.scores.items())]


def _check_unit(t) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, float))
    if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise DataError("times must lie in [0, 1]; rescale the data first")
    return t


def _require_rescaled(ds: Dataset) -> None:
    if not ds.is_rescaled:
        raise DataError("FPCA works on the rescaled time axis; call rescale_time first")


# --- single-model quantities ---------------------------------------------


def eigenfunction_at(model: FpcaModel, l: int, t: float) -> float:
    """Value of the ``l``-th (1-based) eigenfunction at ``t``."""
    if not 1 <= l <= model.rank:
        raise IndexError(f"eigenfunction index {l} out of range 1..{model.rank}")
    return float(model.basis.design(_check_unit(t))[0] @ model.coefficients[:, l - 1])


def marginal_covariance(model: FpcaModel, times) -> np.ndarray:
    phi = model.eigenfunctions(times)
    cov = (phi * model.eigenvalues) @ phi.T
    cov = 0.5 * (cov + cov.T)
    cov[np.diag_indices_from(cov)] += model.noise_var
    return cov


def _cholesky_with_jitter(cov: np.ndarray, who: str):
    jitter = 1e-10 * np.trace(cov) / cov.shape[0]
    work = cov
    for attempt in range(4):
        try:
            return cho_factor(work, lower=True)
        except np.linalg.LinAlgError:
            if attempt == 3:
                break
            work = work + jitter * np.eye(cov.shape[0])
    raise NumericalError(f"covariance of subject {who} is not positive definite")


def subject_nll(model: FpcaModel, times, values) -> float:
    """Gaussian negative log-likelihood of one subject's observations."""
    times = np.asarray(times, float)
    r = np.asarray(values, float) - model.mean(times)
    factor = _cholesky_with_jitter(marginal_covariance(model, times), "?")
    logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
    return 0.5 * (logdet + r @ cho_solve(factor, r) + r.size * LOG_2PI)


def negative_log_likelihood(model: FpcaModel, ds: Dataset, outcome: str) -> float:
    """Sum over subjects of the Gaussian negative log-likelihood, one Cholesky per subject."""
    total = 0.0
    for sid, t, y in ds.series(outcome):
        r = y - model.mean(t)
        factor = _cholesky_with_jitter(marginal_covariance(model, t), sid)
        logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
        total += 0.5 * (logdet + r @ cho_solve(factor, r) + r.size * LOG_2PI)
    return float(total)


# --- batched likelihood for the optimizer ---------------------------------


@dataclass
class _Design:
    """Observations of one outcome laid out for a fixed basis."""

    ids: list
    owner: np.ndarray
    t: np.ndarray
    y: np.ndarray
    phi: np.ndarray
    gram: np.ndarray  # per-subject phi^T phi, (n, M, M)
    counts: np.ndarray

    @classmethod
    def build(cls, series, basis: SplineBasis) -> "_Design":
        ids = [sid for sid, _, _ in series]
        owner = np.concatenate([np.full(t.size, i) for i, (_, t, _) in enumerate(series)])
        t = np.concatenate([t for _, t, _ in series])
        y = np.concatenate([y for _, _, y in series])
        phi = basis.design(_check_unit(t))
        gram = np.zeros((len(ids), basis.n_basis, basis.n_basis))
        np.add.at(gram, owner, phi[:, :, None] * phi[:, None, :])
        return cls(ids, owner, t, y, phi, gram, np.bincount(owner, minlength=len(ids)))

    def stats(self, resid: np.ndarray, subset: Optional[np.ndarray] = None):
        n = len(self.ids)
        q = np.zeros((n, self.phi.shape[1]))
        np.add.at(q, self.owner, self.phi * resid[:, None])
        rr = np.bincount(self.owner, weights=resid * resid, minlength=n)
        if subset is None:
            return self.gram, q, rr, self.counts
        return self.gram[subset], q[subset], rr[subset], self.counts[subset]


def _batched_nll(C, s, gram, q, rr, counts, with_grad=True):
    """Woodbury form of the per-subject marginal likelihood with covariance Phi C C^T Phi^T + s I."""
    L = C.shape[1]
    PC = gram @ C  # (n, M, L)
    K = np.matmul(C.T, PC) + s * np.eye(L)
    chol = np.linalg.cholesky(K)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    v = q @ C  # (n, L)
    Kinv = np.linalg.inv(K)
    a = np.matmul(Kinv, v[:, :, None])[:, :, 0]
    va = (v * a).sum(axis=1)
    quad = rr - va
    per = 0.5 * ((counts - L) * np.log(s) + logdet + quad / s + counts * LOG_2PI)
    if not with_grad:
        return per
    PCa = np.matmul(PC, a[:, :, None])[:, :, 0]  # (n, M)
    gC = np.matmul(PC, Kinv).sum(axis=0) - (q.T @ a - PCa.T @ a) / s
    trace = np.trace(Kinv, axis1=1, axis2=2)
    gs = 0.5 * np.sum((counts - L) / s + trace - quad / s**2 + (a * a).sum(axis=1) / s)
    return per.sum(), gC, gs


def _within_pairs(owner: np.ndarray):
    """Index pairs (j, k), j < k, of observations belonging to the same subject."""
    first, second = [], []
    for sid in np.unique(owner):
        idx = np.flatnonzero(owner == sid)
        j, k = np.triu_indices(idx.size, 1)
        first.append(idx[j])
        second.append(idx[k])
    if not first:
        return np.empty(0, int), np.empty(0, int)
    return np.concatenate(first), np.concatenate(second)


def _moment_init(design: _Design, resid: np.ndarray, L: int, ridge: float = 1e-6):
    """Starting covariance from within-subject cross products, which carry no noise term."""
    M = design.phi.shape[1]
    iu = np.triu_indices(M)
    first, second = _within_pairs(design.owner)
    if first.size:
        outer = design.phi[first][:, :, None] * design.phi[second][:, None, :]
        sym = outer + outer.transpose(0, 2, 1)
        sym[:, np.arange(M), np.arange(M)] *= 0.5
        rows = sym[:, iu[0], iu[1]]
        targets = resid[first] * resid[second]
    else:
        rows = []
    var = float(np.mean(resid**2))
    if len(rows) == 0:
        A = np.eye(M) * 0.5 * var
    else:
        XtX = rows.T @ rows
        coef = np.linalg.solve(XtX + ridge * np.trace(XtX) / XtX.shape[0] * np.eye(XtX.shape[0]), rows.T @ targets)
        A = np.zeros((M, M))
        A[iu] = coef
        A = A + A.T - np.diag(np.diag(A))
    w, V = np.linalg.eigh(A)
    w, V = w[::-1][:L], V[:, ::-1][:, :L]
    floor = max(1e-3 * max(w[0], 0.0), 1e-3 * var)
    w = np.maximum(w, floor)
    C = V * np.sqrt(w)
    fitted = np.einsum("om,ml,ol->o", design.phi, C, design.phi @ C) if L else 0.0
    s = max(float(np.mean(resid**2 - fitted)), 1e-4 * var)
    return C, s


def canonicalize(coefficients: np.ndarray, eigen, basis: SplineBasis):
    """Rotate so the coefficient columns are orthonormal and eigenvalues descend; fix signs.

    ``eigen`` is either the eigenvalue vector or a full L x L covariance of
    the scores. Each eigenfunction is flipped to have a non-negative
    integral (ties: non-negative value at 0).
    """
    B = np.atleast_2d(np.asarray(coefficients, float))
    S = np.asarray(eigen, float)
    S = np.diag(S) if S.ndim == 1 else 0.5 * (S + S.T)
    Q, R = np.linalg.qr(B)
    w, V = np.linalg.eigh(R @ S @ R.T)
    order = np.argsort(-w, kind="stable")
    lam, B = w[order], Q @ V[:, order]
    integrals = basis.integrals() @ B
    at_zero = basis.design([0.0])[0] @ B
    for l in range(B.shape[1]):
        tie = abs(integrals[l]) < 1e-12 * max(1.0, np.abs(B[:, l]).sum())
        if integrals[l] < 0 and not tie or tie and at_zero[l] < 0:
            B[:, l] = -B[:, l]
    return B, np.maximum(lam, 0.0)


def _from_factor(C, s, scale2, mean, basis, fit_log, outcome):
    B, lam = canonicalize(C, np.ones(C.shape[1]), basis)
    lam = lam * scale2
    if lam.size and lam[0] > 0:
        collapsed = lam < COLLAPSE_RATIO * lam[0]
        if collapsed.any():
            eff = int((~collapsed).sum())
            fit_log["effective_rank"] = eff
            warnings.warn(f"rank collapse: effective rank {eff} of {lam.size}", RuntimeWarning, stacklevel=3)
            lam = np.maximum(lam, COLLAPSE_RATIO * lam[0])
    return FpcaModel(mean, basis, B, lam, s * scale2, fit_log, outcome)


def fit_mean(ds: Dataset, outcome: str, bandwidth: Optional[float] = None,
             candidates: Optional[Sequence[float]] = None, grid=None) -> MeanEstimate:
    """Pooled local linear mean; bandwidth by leave-one-subject-out CV unless given."""
    series = ds.series(outcome)
    if not series:
        raise DataError(f"no observations of {outcome}")
    if bandwidth is None:
        bandwidth = select_bandwidth([(t, y) for _, t, y in series], candidates)
    pts = np.column_stack([np.concatenate([t for _, t, _ in series]), np.concatenate([y for _, _, y in series])])
    return fit_local_linear(pts, bandwidth, default_grid() if grid is None else grid)


def _optimize(design, resid, L, init, scale, max_iter, tol):
    """Quasi-Newton on (C, log s) in standardized units; returns C, s, log dict."""
    gram, q, rr, counts = design.stats(resid / scale)
    M = design.phi.shape[1]
    C0, s0 = init
    x0 = np.concatenate([np.asarray(C0, float).ravel(), [np.log(s0)]])

    def fun(x):
        C = x[:-1].reshape(M, L)
        s = float(np.exp(x[-1]))
        f, gC, gs = _batched_nll(C, s, gram, q, rr, counts)
        return f, np.concatenate([gC.ravel(), [gs * s]])

    f0 = fun(x0)[0]
    history = [float(f0)]

    def callback(intermediate_result):
        history.append(float(intermediate_result.fun))

    try:
        res = minimize(fun, x0, jac=True, method="L-BFGS-B", callback=callback,
                       options={"maxiter": max_iter, "ftol": tol, "gtol": 1e-7, "maxcor": 20})
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"likelihood evaluation failed: {exc}") from exc
    C = res.x[:-1].reshape(M, L)
    s = float(np.exp(res.x[-1]))
    n_obs = int(counts.sum())
    shift = n_obs * np.log(scale)
    info = {
        "iterations": int(res.nit),
        "initial_nll": float(f0 + shift),
        "nll": float(res.fun + shift),
        "converged": bool(res.success),
        "message": str(res.message),
        "history": [h + shift for h in history],
    }
    return C, s, info


def _residual_scale(resid):
    return float(np.sqrt(np.mean(resid**2))) or 1.0


def fit_reml(
    ds: Dataset,
    outcome: str,
    L: int,
    M: int,
    init: Optional[FpcaModel] = None,
    mean: Optional[MeanEstimate] = None,
    bandwidth: Optional[float] = None,
    max_iter: int = MAX_ITER,
    tol: float = REL_TOL,
) -> FpcaModel:
    """Fit eigenvalues, eigenfunctions and noise variance of a rank-``L`` model in an ``M``-spline basis.

    The mean is estimated first (unless given) and subtracted. Starting
    values come from ``init`` or from a moment estimate based on
    within-subject cross products.
    """
    _require_rescaled(ds)
    if not 1 <= L <= M:
        raise DataError(f"need 1 <= L <= M, got L={L}, M={M}")
    series = ds.series(outcome)
    if len(series) < L + 1:
        raise DataError(f"need at least {L + 1} subjects with {outcome}")
    if mean is None:
        mean = fit_mean(ds, outcome, bandwidth)
    basis = orthonormal_basis(M) if init is None else init.basis
    if basis.n_basis != M:
        raise DataError("initial model has a different basis size")
    design = _Design.build(series, basis)
    resid = design.y - mean(design.t)
    scale = _residual_scale(resid)
    if init is None:
        start = _moment_init(design, resid / scale, L)
    else:
        if init.rank != L:
            raise DataError("initial model has a different rank")
        start = (init.coefficients * np.sqrt(init.eigenvalues / scale**2), init.noise_var / scale**2)
    C, s, info = _optimize(design, resid, L, start, scale, max_iter, tol)
    if not info["converged"]:
        warnings.warn(f"FPCA fit did not converge: {info['message']}", RuntimeWarning, stacklevel=2)
    return _from_factor(C, s, scale**2, mean, basis, info, outcome)


# --- model selection -------------------------------------------------------


def _fold_assignment(n: int, folds: Optional[int]) -> list[np.ndarray]:
    if folds is None or folds >= n:
        return [np.array([i]) for i in range(n)]
    if folds < 2:
        raise DataError("need at least two folds")
    return [np.arange(k, n, folds) for k in range(folds)]


def select_model(
    ds: Dataset,
    outcome: str,
    L_grid: Sequence[int] = DEFAULT_L_GRID,
    M_grid: Sequence[int] = DEFAULT_M_GRID,
    folds: Optional[int] = None,
    bandwidth: Optional[float] = None,
    max_iter: int = MAX_ITER,
    candidates: Optional[Sequence[float]] = None,
) -> ModelSelectionResult:
    """Leave-one-curve-out choice of (L, M) by held-out negative log-likelihood.

    Each fold refits the mean (at the full-data bandwidth) and the
    covariance without the held-out curves, warm-started from the full-data
    fit. ``folds`` groups curves into that many folds instead of one each.
    """
    _require_rescaled(ds)
    pairs = sorted((L, M) for L in L_grid for M in M_grid if L <= M)
    if not pairs:
        raise DataError("empty (L, M) grid")
    series = ds.series(outcome)
    n = len(series)
    if bandwidth is None:
        bandwidth = select_bandwidth([(t, y) for _, t, y in series], candidates)
    groups = _fold_assignment(n, folds)
    full_mean = fit_mean(ds, outcome, bandwidth)
    t_all = np.concatenate([t for _, t, _ in series])
    y_all = np.concatenate([y for _, _, y in series])
    owner = np.concatenate([np.full(t.size, i) for i, (_, t, _) in enumerate(series)])
    grid = default_grid()
    fold_means = []
    for g in groups:
        keep = ~np.isin(owner, g)
        fold_means.append(np.interp(t_all, grid, local_linear(t_all[keep], y_all[keep], grid, bandwidth)))

    scores, diagnostics = {}, []
    if len(pairs) == 1:
        return ModelSelectionResult(pairs[0][0], pairs[0][1], {pairs[0]: float("nan")}, [], bandwidth)
    for M in sorted({M for _, M in pairs}):
        basis = orthonormal_basis(M)
        design = _Design.build(series, basis)
        resid_full = y_all - full_mean(t_all)
        scale = _residual_scale(resid_full)
        for L in sorted({L for L, m in pairs if m == M}):
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    C_full, s_full, _ = _optimize(design, resid_full, L, _moment_init(design, resid_full / scale, L),
                                                  scale, max_iter, REL_TOL)
            except NumericalError:
                scores[(L, M)] = float("inf")
                continue
            total = 0.0
            for k, g in enumerate(groups):
                resid = y_all - fold_means[k]
                train = np.setdiff1d(np.arange(n), g)
                keep = np.isin(owner, train)
                sub = _Design(
                    [design.ids[i] for i in train], np.searchsorted(train, owner[keep]), design.t[keep],
                    design.y[keep], design.phi[keep], design.gram[train], design.counts[train],
                )
                try:
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", RuntimeWarning)
                        C, s, info = _optimize(sub, resid[keep], L, (C_full, s_full), scale, max_iter, REL_TOL)
                    gram, q, rr, counts = design.stats(resid / scale, g)
                    held = float(np.sum(_batched_nll(C, s, gram, q, rr, counts, with_grad=False)))
                    held += float(counts.sum()) * np.log(scale)
                except (NumericalError, np.linalg.LinAlgError):
                    held, info = float("inf"), {"converged": False}
                diagnostics.append({"L": L, "M": M, "fold": k, "score": held, "converged": info["converged"]})
                total += held
            scores[(L, M)] = total
    L, M = choose_pair(scores)
    return ModelSelectionResult(L, M, scores, diagnostics, bandwidth)


def choose_pair(scores: dict) -> tuple[int, int]:
    """Arg-min of the CV scores; scores equal to rounding go to smaller L, then smaller M."""
    finite = [v for v in scores.values() if np.isfinite(v)]
    if not finite:
        raise NumericalError("model selection failed for every candidate")
    best = min(finite)
    tol = 1e-9 * max(abs(best), 1.0)
    return next(p for p in sorted(scores) if scores[p] <= best + tol)


# --- scores, reconstruction, forecasting ----------------------------------


def pace_scores(model: FpcaModel, subject: SubjectRecord, outcome: str) -> SubjectScores:
    """Conditional mean and covariance of the scores given the subject's observations."""
    t, y = subject.series(outcome)
    if t.size == 0:
        raise DataError(f"subject {subject.id} has no {outcome} observations")
    phi = model.eigenfunctions(t)
    lam = model.eigenvalues
    factor = _cholesky_with_jitter(marginal_covariance(model, t), subject.id)
    r = y - model.mean(t)
    xi = lam * (phi.T @ cho_solve(factor, r))
    lam_phi_t = phi.T * lam[:, None]
    cov = np.diag(lam) - lam_phi_t @ cho_solve(factor, lam_phi_t.T)
    return SubjectScores(subject.id, xi, 0.5 * (cov + cov.T))


def reconstruct(model: FpcaModel, scores: SubjectScores, t):
    """Fitted trajectory mean(t) + sum_l score_l phi_l(t); scalar in, scalar out."""
    scalar = np.ndim(t) == 0
    tt = _check_unit(t)
    out = model.mean(tt) + model.eigenfunctions(tt) @ np.asarray(scores.scores, float)
    return float(out[0]) if scalar else out


def trajectory_rows(model: FpcaModel, ds: Dataset, outcome: str, n_grid: int = 61):
    grid = np.linspace(0.0, 1.0, n_grid)
    for s in ds.subjects:
        if s.series(outcome)[0].size == 0:
            continue
        values = reconstruct(model, pace_scores(model, s, outcome), grid)
        for t, v in zip(grid, values):
            yield s.id, float(t * ds.time_scale), float(v)


@dataclass(frozen=True)
class ForecastConfig:
    L_grid: tuple = DEFAULT_L_GRID
    M_grid: tuple = DEFAULT_M_GRID
    rank: Optional[int] = None
    n_basis: Optional[int] = None
    reselect: bool = False
    cv_folds: Optional[int] = None
    bandwidth_candidates: Optional[tuple] = None
    min_observations: int = 3
    near_months: float = NEAR_MONTHS
    early_months: float = EARLY_MONTHS
    threads: int = 1


def drop_last(ds: Dataset, subject_id, outcome: str) -> Dataset:
    """Copy of ``ds`` without the last visit carrying ``outcome`` of one subject (or each of a set of ids)."""
    ids = {subject_id} if isinstance(subject_id, str) else set(subject_id)
    subjects = []
    for s in ds.subjects:
        if s.id in ids:
            idx = max(j for j, o in enumerate(s.observations) if o.value(outcome) is not None)
            obs = s.observations[:idx] + s.observations[idx + 1:]
            s = SubjectRecord(s.id, obs)
        subjects.append(s)
    return replace(ds, subjects=tuple(subjects))


def _forecast_one(args):
    reduced, subject_id, outcome, L, M, cfg = args
    if cfg.reselect:
        sel = select_model(reduced, outcome, cfg.L_grid, cfg.M_grid, folds=cfg.cv_folds,
                           candidates=cfg.bandwidth_candidates)
        L, M = sel.chosen
    mean = fit_mean(reduced, outcome, candidates=cfg.bandwidth_candidates)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        model = fit_reml(reduced, outcome, L, M, mean=mean)
    return model, pace_scores(model, reduced.subject(subject_id), outcome)


def forecast_last(ds: Dataset, outcome: str, config: ForecastConfig = ForecastConfig()):
    """Predict each cohort subject's last value from a fit that never sees it.

    Returns ``(results, selection, failures)`` where ``failures`` maps
    subject ids to error messages for fits that could not be completed.
    """
    _require_rescaled(ds)
    cohort = [s for s in ds.subjects if s.series(outcome)[0].size >= config.min_observations]
    if not cohort:
        raise DataError(f"no subject has {config.min_observations} or more {outcome} observations")
    selection = None
    if config.rank is not None and config.n_basis is not None:
        L, M = config.rank, config.n_basis
    else:
        # every held-out value is removed before selecting, so no forecast depends on its own target
        blind = drop_last(ds, [s.id for s in cohort], outcome)
        selection = select_model(blind, outcome, config.L_grid, config.M_grid, folds=config.cv_folds,
                                 candidates=config.bandwidth_candidates)
        L, M = selection.chosen
    jobs = [(drop_last(ds, s.id, outcome), s.id, outcome, L, M, config) for s in cohort]
    if config.threads > 1:
        with ProcessPoolExecutor(config.threads) as pool:
            outputs = list(pool.map(_safe_forecast, jobs))
    else:
        outputs = [_safe_forecast(job) for job in jobs]
    results, failures = [], {}
    for s, out in zip(cohort, outputs):
        if isinstance(out, str):
            failures[s.id] = out
            warnings.warn(f"forecast for subject {s.id} failed: {out}", RuntimeWarning, stacklevel=2)
            continue
        model, scores = out
        t, y = s.series(outcome)
        pred = reconstruct(model, scores, t[-1])
        results.append(make_forecast_result(
            s.id, ds.to_months(t[-1]), y[-1], pred, ds.to_months(t[-1] - t[-2]),
            config.near_months, config.early_months,
        ))
    return results, selection, failures


def _safe_forecast(job):
    try:
        return _forecast_one(job)
    except (DataError, NumericalError, np.linalg.LinAlgError) as exc:
        return str(exc)
