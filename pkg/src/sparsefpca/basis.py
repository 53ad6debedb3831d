"""Clamped cubic B-splines on [0, 1] with equally spaced interior knots.

Eigenfunctions are parameterized in the L2-orthonormalized version of this
basis, so an M x L coefficient matrix with orthonormal columns gives
orthonormal functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from sparsefpca.errors import DataError, NumericalError

DEGREE = 3
QUAD_NODES = 6


def make_knots(n_basis: int, degree: int = DEGREE) -> np.ndarray:
    """Clamped knot vector on [0, 1] with ``n_basis - degree - 1`` equally spaced interior knots."""
    if n_basis < degree + 1:
        raise ValueError(f"need at least {degree + 1} basis functions, got {n_basis}")
    n_interior = n_basis - degree - 1
    interior = np.linspace(0.0, 1.0, n_interior + 2)[1:-1]
    return np.concatenate([np.zeros(degree + 1), interior, np.ones(degree + 1)])


@dataclass(frozen=True)
class SplineBasis:
    n_basis: int
    degree: int = DEGREE
    knots: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]
    transform: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.degree != DEGREE:
            raise ValueError("only cubic splines are supported")
        if self.knots is None:
            object.__setattr__(self, "knots", make_knots(self.n_basis, self.degree))
        knots = np.asarray(self.knots, dtype=float)
        if knots.shape != (self.n_basis + self.degree + 1,) or np.any(np.diff(knots) < 0):
            raise ValueError("invalid knot vector")
        object.__setattr__(self, "knots", knots)
        if self.transform is not None:
            t = np.asarray(self.transform, dtype=float)
            if t.shape != (self.n_basis, self.n_basis):
                raise ValueError("transform must be M x M")
            object.__setattr__(self, "transform", t)

    @property
    def is_orthonormal(self) -> bool:
        return self.transform is not None

    @property
    def breakpoints(self) -> np.ndarray:
        return np.unique(self.knots)

    def raw_design(self, t) -> np.ndarray:
        """Raw B-spline values, shape ``(len(t), M)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        spans, vals = _basis_funs(self.knots, self.degree, t)
        out = np.zeros((t.size, self.n_basis))
        cols = spans[:, None] - self.degree + np.arange(self.degree + 1)
        out[np.arange(t.size)[:, None], cols] = vals
        return out

    def design(self, t) -> np.ndarray:
        """Values of the working basis (orthonormalized when a transform is set)."""
        raw = self.raw_design(t)
        return raw if self.transform is None else raw @ self.transform.T

    def integrals(self) -> np.ndarray:
        """Integral over [0, 1] of each working basis function."""
        nodes, weights = quadrature_grid(self)
        return weights @ self.design(nodes)

    def to_dict(self) -> dict:
        return {
            "degree": self.degree,
            "n_basis": self.n_basis,
            "knots": self.knots.tolist(),
            "transform": None if self.transform is None else self.transform.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplineBasis":
        transform = d.get("transform")
        return cls(
            n_basis=int(d["n_basis"]),
            degree=int(d["degree"]),
            knots=np.asarray(d["knots"], dtype=float),
            transform=None if transform is None else np.asarray(transform, dtype=float),
        )


def _find_span(knots: np.ndarray, degree: int, x: np.ndarray) -> np.ndarray:
    n = knots.size - degree - 1
    span = np.searchsorted(knots, x, side="right") - 1
    return np.where(x >= knots[n], n - 1, span)


def _basis_funs(knots: np.ndarray, degree: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cox-de Boor triangle for the ``degree + 1`` functions nonzero on each point's span."""
    span = _find_span(knots, degree, x)
    left = np.zeros((x.size, degree + 1))
    right = np.zeros((x.size, degree + 1))
    values = np.zeros((x.size, degree + 1))
    values[:, 0] = 1.0
    for j in range(1, degree + 1):
        left[:, j] = x - knots[span + 1 - j]
        right[:, j] = knots[span + j] - x
        saved = np.zeros(x.size)
        for r in range(j):
            temp = values[:, r] / (right[:, r + 1] + left[:, j - r])
            values[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        values[:, j] = saved
    return span, values


def evaluate_basis(basis: SplineBasis, t: float) -> np.ndarray:
    """Raw B-spline values at a single point ``t`` in [0, 1]."""
    if not np.isfinite(t) or t < 0.0 or t > 1.0:
        raise DataError(f"t={t} is outside [0, 1]")
    return basis.raw_design([t])[0]


def quadrature_grid(basis: SplineBasis, n_nodes: int = QUAD_NODES) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights, ``n_nodes`` per knot span."""
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    bp = basis.breakpoints
    a, b = bp[:-1, None], bp[1:, None]
    nodes = 0.5 * (b - a) * x[None, :] + 0.5 * (a + b)
    weights = 0.5 * (b - a) * w[None, :]
    return nodes.ravel(), weights.ravel()


def gram_matrix(basis: SplineBasis) -> np.ndarray:
    """Inner products of the working basis functions on [0, 1]."""
    nodes, weights = quadrature_grid(basis)
    values = basis.design(nodes)
    gram = (values * weights[:, None]).T @ values
    return 0.5 * (gram + gram.T)


def orthonormalize(basis: SplineBasis) -> SplineBasis:
    """Return the basis with ``transform`` set so its functions are L2-orthonormal."""
    gram = gram_matrix(basis)
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"Gram matrix of {basis.n_basis} splines is numerically singular"
        ) from exc
    inv = np.linalg.solve(chol, np.eye(basis.n_basis))
    current = np.eye(basis.n_basis) if basis.transform is None else basis.transform
    return replace(basis, transform=inv @ current)


def orthonormal_basis(n_basis: int) -> SplineBasis:
    return orthonormalize(SplineBasis(n_basis))
