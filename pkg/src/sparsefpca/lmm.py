"""Random intercept and slope model y = b0 + b1 t + b2 x + g0 + g1 t + e on a 0/6/12-month visit grid.

Fixed effects are profiled out by generalized least squares and the
residual variance analytically, so the optimizer only sees the three
entries of the relative Cholesky factor of the random-effects covariance.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from sparsefpca.data import Dataset
from sparsefpca.errors import DataError, NumericalError

LOG_2PI = float(np.log(2.0 * np.pi))
GRID_MONTHS = (0.0, 6.0, 12.0)
STARTS = ((1.0, 0.0, 0.1), (0.3, 0.0, 0.03), (3.0, 0.0, 0.3))


@dataclass(frozen=True)
class LmmSpec:
    outcome: str
    biomarker: Optional[str] = None
    transform: str = "log"
    grid_months: tuple = GRID_MONTHS
    snap_tol: float = 1.0
    # variable that must be present even when not modelled, so a null fit uses the full model's rows
    require: Optional[str] = None

    def __post_init__(self):
        if self.transform not in ("identity", "log"):
            raise DataError(f"unknown transform {self.transform!r}")

    def null(self) -> "LmmSpec":
        return LmmSpec(self.outcome, None, self.transform, self.grid_months, self.snap_tol,
                       require=self.biomarker or self.require)


@dataclass
class LmmDesign:
    spec: LmmSpec
    ids: list
    X: list
    Z: list
    y: list
    rows: tuple
    n_dropped: int = 0

    @property
    def n_subjects(self) -> int:
        return len(self.ids)

    @property
    def n_rows(self) -> int:
        return sum(len(v) for v in self.y)

    @property
    def n_fixed(self) -> int:
        return self.X[0].shape[1] if self.X else (3 if self.spec.biomarker else 2)

    def subset(self, keep: Sequence[int]) -> "LmmDesign":
        keep = list(keep)
        ids = [self.ids[i] for i in keep]
        idset = set(ids)
        return LmmDesign(self.spec, ids, [self.X[i] for i in keep], [self.Z[i] for i in keep],
                         [self.y[i] for i in keep], tuple(r for r in self.rows if r[0] in idset))


def build_design(ds: Dataset, spec: LmmSpec) -> LmmDesign:
    """Snap visits to the month grid and keep subjects with at least two complete grid visits."""
    grid = np.asarray(spec.grid_months, float)
    needed = [v for v in (spec.biomarker, spec.require) if v]
    ids, Xs, Zs, ys, rows = [], [], [], [], []
    dropped = 0
    for s in ds.subjects:
        chosen: dict[int, tuple[float, object]] = {}
        for o in s.observations:
            month = float(ds.to_months(o.time))
            g = int(np.argmin(np.abs(grid - month)))
            dist = abs(grid[g] - month)
            if dist > spec.snap_tol:
                continue
            if o.value(spec.outcome) is None or any(o.value(v) is None for v in needed):
                continue
            if spec.transform == "log" and any(o.value(v) <= 0 for v in needed):
                dropped += 1
                warnings.warn(f"subject {s.id}: non-positive biomarker at month {month:g} dropped", RuntimeWarning,
                              stacklevel=2)
                continue
            if g not in chosen or dist < chosen[g][0]:
                chosen[g] = (dist, o)
        if len(chosen) < 2:
            continue
        gs = sorted(chosen)
        t = grid[gs]
        y = np.array([chosen[g][1].value(spec.outcome) for g in gs], float)
        cols = [np.ones_like(t), t]
        if spec.biomarker:
            x = np.array([chosen[g][1].value(spec.biomarker) for g in gs], float)
            cols.append(np.log(x) if spec.transform == "log" else x)
        ids.append(s.id)
        Xs.append(np.column_stack(cols))
        Zs.append(np.column_stack([np.ones_like(t), t]))
        ys.append(y)
        rows.extend((s.id, float(tt)) for tt in t)
    if not ids:
        raise DataError(f"no subject has two or more eligible visits for {spec.outcome}")
    return LmmDesign(spec, ids, Xs, Zs, ys, tuple(rows), dropped)


@dataclass
class LmmFit:
    beta: np.ndarray
    beta_se: np.ndarray
    re_cov: np.ndarray
    resid_var: float
    loglik: float
    reml_loglik: Optional[float]
    converged: bool
    boundary: bool
    n_subjects: int
    n_rows: int
    rows: tuple = field(repr=False, default=())
    biomarker: Optional[str] = None
    log: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "beta_se": self.beta_se.tolist(),
            "re_cov": self.re_cov.tolist(),
            "resid_var": self.resid_var,
            "loglik": self.loglik,
            "reml_loglik": self.reml_loglik,
            "converged": self.converged,
            "boundary": self.boundary,
            "n_subjects": self.n_subjects,
            "n_rows": self.n_rows,
            "biomarker": self.biomarker,
        }


class _Blocks:
    """Subjects grouped by visit count so each group is handled as one batched array."""

    def __init__(self, design: LmmDesign):
        sizes = np.array([len(y) for y in design.y])
        self.groups = []
        for n in sorted(set(sizes.tolist())):
            idx = np.flatnonzero(sizes == n)
            self.groups.append((
                np.stack([design.X[i] for i in idx]),
                np.stack([design.Z[i] for i in idx]),
                np.stack([design.y[i] for i in idx]),
            ))
        self.n = int(sizes.sum())
        self.p = design.X[0].shape[1]

    def profile(self, theta):
        """GLS pieces at relative factor ``theta``: beta, RSS, sum log|V|, X^T V^-1 X."""
        lam = np.array([[theta[0], 0.0], [theta[1], theta[2]]])
        D = lam @ lam.T
        xtvx = np.zeros((self.p, self.p))
        xtvy = np.zeros(self.p)
        logdet = 0.0
        cache = []
        for X, Z, y in self.groups:
            V = Z @ D @ Z.transpose(0, 2, 1) + np.eye(Z.shape[1])
            chol = np.linalg.cholesky(V)
            logdet += 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum()
            Vinv = np.linalg.inv(V)
            VX = Vinv @ X
            xtvx += np.einsum("nji,njk->ik", X, VX)
            xtvy += np.einsum("nji,nj->i", VX, y)
            cache.append((X, y, Vinv))
        beta = np.linalg.solve(xtvx, xtvy)
        rss = 0.0
        for X, y, Vinv in cache:
            r = y - X @ beta
            rss += float(np.einsum("ni,nij,nj->", r, Vinv, r))
        return beta, rss, logdet, xtvx

    def objective(self, theta, reml: bool) -> float:
        beta, rss, logdet, xtvx = self.profile(theta)
        dof = self.n - self.p if reml else self.n
        s2 = max(rss / dof, 1e-300)
        val = dof * (LOG_2PI + np.log(s2)) + logdet + dof
        if reml:
            val += np.linalg.slogdet(xtvx)[1]
        return 0.5 * val


def _optimize(blocks: _Blocks, reml: bool, start, tol, max_iter):
    starts = [np.asarray(start, float)] if start is not None else [np.asarray(s) for s in STARTS]
    vals = [blocks.objective(s, reml) for s in starts]
    x0 = starts[int(np.argmin(vals))]
    res = minimize(lambda th: blocks.objective(th, reml), x0, method="L-BFGS-B", jac="3-point",
                   options={"maxiter": max_iter, "ftol": tol, "gtol": 1e-9})
    return res


def fit_ml(design: LmmDesign, start=None, tol: float = 1e-8, max_iter: int = 500, with_reml: bool = True) -> LmmFit:
    """Maximum likelihood fit; the REML log-likelihood (separately maximized) is reported alongside."""
    if design.n_subjects < 1 or design.n_rows <= design.n_fixed:
        raise DataError("too few rows for the fixed effects")
    blocks = _Blocks(design)
    try:
        res = _optimize(blocks, False, start, tol, max_iter)
        beta, rss, logdet, xtvx = blocks.profile(res.x)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"mixed model fit failed: {exc}") from exc
    s2 = max(rss / blocks.n, 1e-300)
    lam = np.array([[res.x[0], 0.0], [res.x[1], res.x[2]]])
    re_cov = s2 * lam @ lam.T
    cov_beta = s2 * np.linalg.inv(xtvx)
    eig = np.linalg.eigvalsh(re_cov)
    boundary = bool(eig[0] <= 1e-6 * max(eig[1], s2))
    reml_ll = None
    if with_reml:
        res_r = _optimize(blocks, True, res.x, tol, max_iter)
        reml_ll = -float(res_r.fun)
    if not res.success:
        warnings.warn(f"mixed model did not converge: {res.message}", RuntimeWarning, stacklevel=2)
    return LmmFit(
        beta=beta,
        beta_se=np.sqrt(np.diag(cov_beta)),
        re_cov=re_cov,
        resid_var=float(s2),
        loglik=-float(res.fun),
        reml_loglik=reml_ll,
        converged=bool(res.success),
        boundary=boundary,
        n_subjects=design.n_subjects,
        n_rows=design.n_rows,
        rows=design.rows,
        biomarker=design.spec.biomarker,
        log={"iterations": int(res.nit), "theta": res.x.tolist(), "message": str(res.message)},
    )


def marginal_loglik(design: LmmDesign, beta, re_cov, resid_var) -> float:
    """Gaussian log-likelihood of the design at given parameters, one Cholesky per subject."""
    beta = np.asarray(beta, float)
    re_cov = np.asarray(re_cov, float)
    total = 0.0
    for X, Z, y in zip(design.X, design.Z, design.y):
        V = Z @ re_cov @ Z.T + resid_var * np.eye(len(y))
        factor = cho_factor(V, lower=True)
        r = y - X @ beta
        total -= 0.5 * (2.0 * np.sum(np.log(np.diag(factor[0]))) + r @ cho_solve(factor, r) + len(y) * LOG_2PI)
    return float(total)


def lrt_biomarker(full: LmmFit, null: LmmFit) -> tuple[float, float]:
    """Likelihood-ratio statistic and chi-square(1) p-value for the biomarker effect."""
    if set(full.rows) != set(null.rows):
        raise DataError("full and null models were fitted on different rows")
    stat = 2.0 * (full.loglik - null.loglik)
    if stat < -1e-6:
        raise NumericalError(f"negative likelihood-ratio statistic {stat:.3g}: a fit did not reach its optimum")
    stat = max(stat, 0.0)
    return stat, float(stats.chi2.sf(stat, df=1))


def predict_population(fit: LmmFit, t, x=None):
    """Population-level prediction with random effects set to their mean of zero."""
    out = fit.beta[0] + fit.beta[1] * np.asarray(t, float)
    if fit.beta.size > 2:
        if x is None:
            raise DataError("biomarker value required for this model")
        out = out + fit.beta[2] * np.asarray(x, float)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class LooResult:
    mse: float
    n_rows: int
    n_folds: int
    skipped: list


def _exact_beta(design: LmmDesign):
    """Fixed effects of a fold with exactly as many rows as coefficients.

    Such a system is interpolated by every generalized least-squares
    weighting, so beta does not depend on the (unidentified) variances.
    """
    if design.n_rows != design.n_fixed:
        return None
    X = np.vstack(design.X)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        return None
    return np.linalg.solve(X, np.concatenate(design.y))


def loo_cv(design: LmmDesign) -> LooResult:
    if design.n_subjects < 2:
        raise DataError("leave-one-out needs at least two subjects")
    sse, rows, skipped = 0.0, 0, []
    start = None
    if design.n_rows > design.n_fixed:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            start = fit_ml(design, with_reml=False).log["theta"]
    for i in range(design.n_subjects):
        train = design.subset([j for j in range(design.n_subjects) if j != i])
        X, y = design.X[i], design.y[i]
        beta = _exact_beta(train)
        if beta is not None:
            sse += float(np.sum((y - X @ beta) ** 2))
            rows += len(y)
            continue
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                fit = fit_ml(train, start=start, with_reml=False)
        except (DataError, NumericalError) as exc:
            skipped.append(design.ids[i])
            warnings.warn(f"fold {design.ids[i]} skipped: {exc}", RuntimeWarning, stacklevel=2)
            continue
        if not fit.converged:
            skipped.append(design.ids[i])
            warnings.warn(f"fold {design.ids[i]} skipped: no convergence", RuntimeWarning, stacklevel=2)
            continue
        pred = predict_population(fit, X[:, 1], X[:, 2] if X.shape[1] > 2 else None)
        sse += float(np.sum((y - pred) ** 2))
        rows += len(y)
    if rows == 0:
        raise NumericalError("every cross-validation fold failed")
    return LooResult(sse / rows, rows, design.n_subjects - len(skipped), skipped)


def loo_cv_mse(ds: Dataset, spec: LmmSpec) -> float:
    """Leave-one-subject-out MSE of population-level predictions over the eligible cohort."""
    return loo_cv(build_design(ds, spec)).mse
