"""Polynomial and B-spline design matrices and least-squares curve fitting."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NumericalError, ValidationError

COND_LIMIT = 1e12
RIDGE_SCALE = 1e-8


@dataclass(frozen=True)
class BasisSpec:
    """Basis family and size.

    ``polynomial`` has ``degree + 1`` columns; ``bspline`` has
    ``interior_knots + degree + 1`` columns over a clamped knot vector with
    interior knots spaced uniformly across the energy range.
    """

    family: str = "bspline"
    degree: int = 3
    interior_knots: int = 4

    def __post_init__(self):
        if self.family not in ("polynomial", "bspline"):
            raise ValidationError(f"unknown basis family {self.family!r}")
        if self.degree < 0:
            raise ValidationError("basis degree must be >= 0")
        if self.family == "bspline" and self.interior_knots < 0:
            raise ValidationError("interior_knots must be >= 0")

    @property
    def dim(self) -> int:
        if self.family == "polynomial":
            return self.degree + 1
        return self.interior_knots + self.degree + 1

    def knot_vector(self, lo: float, hi: float) -> np.ndarray:
        inner = lo + (hi - lo) * np.arange(1, self.interior_knots + 1) / (self.interior_knots + 1)
        p = self.degree
        return np.concatenate([np.full(p + 1, lo), inner, np.full(p + 1, hi)])

    def to_dict(self) -> dict:
        return {"family": self.family, "degree": self.degree, "knots": self.interior_knots}

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        return cls(d["family"], int(d["degree"]), int(d.get("knots", 0)))


POLY3 = BasisSpec("polynomial", 3, 0)
BSPLINE3 = BasisSpec("bspline", 3, 4)


def bspline_basis(x: np.ndarray, knots: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate all B-splines of ``degree`` on ``knots`` at ``x`` (Cox-de Boor).

    Intervals are half-open ``[t_j, t_{j+1})`` except that the right end of the
    knot range is included in the last non-degenerate interval.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    t = np.asarray(knots, dtype=float)
    nb = t.size - degree - 1
    if nb < 1:
        raise ValidationError("knot vector too short for degree")
    if np.any(np.diff(t) < 0):
        raise ValidationError("knot vector must be non-decreasing")
    if t[degree] >= t[nb]:
        raise ValidationError("degenerate knot vector")

    # degree 0: indicators of the knot intervals
    b = ((t[:-1][None, :] <= x[:, None]) & (x[:, None] < t[1:][None, :])).astype(float)
    last = np.flatnonzero(t[:-1] < t[1:])[-1]
    b[x == t[-1], :] = 0.0
    b[x == t[-1], last] = 1.0

    for p in range(1, degree + 1):
        nxt = np.zeros((x.size, t.size - p - 1))
        for j in range(t.size - p - 1):
            left = t[j + p] - t[j]
            right = t[j + p + 1] - t[j + 1]
            if left > 0:
                nxt[:, j] += (x - t[j]) / left * b[:, j]
            if right > 0:
                nxt[:, j] += (t[j + p + 1] - x) / right * b[:, j + 1]
        b = nxt
    return b


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Basis evaluated on an energy grid, with a cached QR factorization."""

    values: np.ndarray
    spec: BasisSpec
    energies: np.ndarray
    _q: np.ndarray = field(init=False, repr=False)
    _r: np.ndarray = field(init=False, repr=False)
    _ridge: float = field(init=False, repr=False)

    def __post_init__(self):
        q, r = np.linalg.qr(self.values)
        object.__setattr__(self, "_q", q)
        object.__setattr__(self, "_r", r)
        gram = self.values.T @ self.values
        cond = np.linalg.cond(gram)
        ridge = 0.0
        if not np.isfinite(cond) or cond > COND_LIMIT:
            ridge = RIDGE_SCALE * np.trace(gram) / gram.shape[0]
        object.__setattr__(self, "_ridge", ridge)

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def ill_conditioned(self) -> bool:
        return self._ridge > 0

    def solve(self, y: np.ndarray, ridge: bool = True) -> np.ndarray:
        """Least-squares coefficients for one curve (m,) or many curves (n, m)."""
        y = np.asarray(y, dtype=float)
        one = y.ndim == 1
        ys = y[None, :] if one else y
        if ys.shape[1] != self.m:
            raise ValidationError(f"curve length {ys.shape[1]} != design rows {self.m}")
        if self._ridge > 0:
            if not ridge:
                raise NumericalError("rank-deficient design and ridge disabled")
            warnings.warn("ill-conditioned design; adding ridge", RuntimeWarning, stacklevel=2)
            g = self.values.T @ self.values + self._ridge * np.eye(self.d)
            beta = np.linalg.solve(g, self.values.T @ ys.T).T
        else:
            beta = solve_triangular(self._r, self._q.T @ ys.T).T
        return beta[0] if one else beta


def build_design(energies, spec: BasisSpec) -> DesignMatrix:
    """Evaluate ``spec`` on the energy grid.

    Polynomial columns are powers of the standardized energy
    ``(x - mean) / std``; B-spline columns come from Cox-de Boor on the
    clamped uniform knot vector.
    """
    x = np.asarray(energies, dtype=float)
    if x.ndim != 1 or x.size < 1:
        raise ValidationError("energies must be a non-empty 1-D array")
    if np.any(np.diff(x) <= 0):
        raise ValidationError("energies not strictly increasing")
    if spec.dim > x.size:
        raise ValidationError(f"basis dimension {spec.dim} exceeds {x.size} energy levels")
    if spec.family == "polynomial":
        s = x.std()
        u = (x - x.mean()) / (s if s > 0 else 1.0)
        values = u[:, None] ** np.arange(spec.degree + 1)[None, :]
    else:
        if x.size < 2:
            raise ValidationError("degenerate knot vector: single energy level")
        values = bspline_basis(x, spec.knot_vector(x[0], x[-1]), spec.degree)
    return DesignMatrix(values, spec, x)


def ols_fit(design: DesignMatrix, y, ridge: bool = True) -> np.ndarray:
    """Ordinary least-squares coefficients of curve ``y`` on ``design``."""
    return design.solve(y, ridge=ridge)


def vectorize_volume(vol, spec: BasisSpec | DesignMatrix) -> np.ndarray:
    """Per-voxel OLS coefficients, shape (n, d)."""
    design = spec if isinstance(spec, DesignMatrix) else build_design(vol.energies, spec)
    return design.solve(vol.curves)
