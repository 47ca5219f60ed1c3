"""Spatial gating functions: softmax and normalized-Gaussian gates.

Both gates map a voxel's spatial coordinates to mixing weights over the ``K``
components. Evaluation works on whole (n, 3) coordinate arrays and always goes
through the log domain.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ValidationError

LOG_2PI = np.log(2.0 * np.pi)
WEIGHT_FLOOR = 1e-8
COLLAPSE_TOL = 1e-8
SPD_FLOOR_SCALE = 1e-6


def data_floor(x: np.ndarray, scale: float = SPD_FLOOR_SCALE) -> float:
    """Eigenvalue floor tied to the data: ``scale`` times the mean per-column
    variance of ``x`` (plain ``scale`` if the data are constant).

    The floor depends only on the data, never on the current parameters, so
    flooring stays the exact maximizer over a fixed constraint set and EM
    remains monotone.
    """
    v = float(np.mean(np.var(np.asarray(x, dtype=float), axis=0))) if np.size(x) else 0.0
    return scale * (v if v > 0 and np.isfinite(v) else 1.0)


def spd_repair(cov: np.ndarray, floor: float = SPD_FLOOR_SCALE) -> np.ndarray:
    """Clip the eigenvalues of each symmetric matrix in ``cov`` (..., p, p) at
    ``floor``; this is the Gaussian MLE under the constraint ``eig >= floor``.

    Matrices whose smallest eigenvalue already clears the floor are returned
    unchanged (bit for bit).
    """
    cov = np.array(cov, dtype=float, copy=True)
    flat = cov.reshape(-1, cov.shape[-2], cov.shape[-1])
    for j, c in enumerate(flat):
        c = 0.5 * (c + c.T)
        vals, vecs = np.linalg.eigh(c)
        if vals[0] < floor:
            vals = np.maximum(vals, floor)
            flat[j] = (vecs * vals) @ vecs.T
            flat[j] = 0.5 * (flat[j] + flat[j].T)
    return flat.reshape(cov.shape)


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """log N(x; mean, cov) for each row of ``x`` (n, p)."""
    chol = np.linalg.cholesky(cov)
    diff = np.asarray(x, dtype=float) - mean
    z = np.linalg.solve(chol, diff.T)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (mean.size * LOG_2PI + logdet + np.einsum("ij,ij->j", z, z))


def collapsed_components(tau: np.ndarray, tol: float = COLLAPSE_TOL) -> list[int]:
    """Indices of components whose responsibility mass is below ``tol * n``."""
    mass = tau.sum(axis=0)
    return [int(k) for k in np.flatnonzero(mass < tol * tau.shape[0])]


def augment(coords: np.ndarray, bias: bool = True) -> np.ndarray:
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    if not bias:
        return coords
    return np.column_stack([np.ones(coords.shape[0]), coords])


# -- softmax gate -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SoftmaxGate:
    """Softmax gate with ``alpha`` of shape (K-1, p); component K is the
    zero-score reference. With ``bias`` the features are ``(1, v1, v2, v3)``."""

    alpha: np.ndarray
    bias: bool = True

    @property
    def K(self) -> int:
        return self.alpha.shape[0] + 1

    @classmethod
    def zeros(cls, K: int, bias: bool = True) -> "SoftmaxGate":
        return cls(np.zeros((K - 1, 4 if bias else 3)), bias)

    def log_weights(self, coords: np.ndarray) -> np.ndarray:
        x = augment(coords, self.bias)
        scores = np.column_stack([x @ self.alpha.T, np.zeros(x.shape[0])])
        return scores - logsumexp(scores, axis=1, keepdims=True)

    def weights(self, coords: np.ndarray) -> np.ndarray:
        return np.exp(self.log_weights(coords))

    def permuted(self, perm) -> "SoftmaxGate":
        """Gate whose component ``j`` is this gate's component ``perm[j]``."""
        full = np.vstack([self.alpha, np.zeros(self.alpha.shape[1])])
        full = full[list(perm)]
        return SoftmaxGate(full[:-1] - full[-1], self.bias)

    def to_dict(self) -> dict:
        return {"family": "softmax", "bias": self.bias, "alpha": self.alpha.tolist()}


def softmax_weights(gate: SoftmaxGate, v) -> np.ndarray:
    """Gate weights at one coordinate (3,) or many (n, 3)."""
    v = np.asarray(v, dtype=float)
    w = gate.weights(v)
    return w[0] if v.ndim == 1 else w


def softmax_objective(alpha: np.ndarray, x: np.ndarray, tau: np.ndarray) -> float:
    """Weighted multinomial log-likelihood sum_i sum_k tau_ik log pi_k(x_i)."""
    scores = np.column_stack([x @ alpha.T, np.zeros(x.shape[0])])
    logp = scores - logsumexp(scores, axis=1, keepdims=True)
    return float(np.sum(tau * logp))


def _softmax_grad_hess(alpha, x, tau):
    K1, p = alpha.shape
    scores = np.column_stack([x @ alpha.T, np.zeros(x.shape[0])])
    pi = np.exp(scores - logsumexp(scores, axis=1, keepdims=True))[:, :K1]
    s = tau.sum(axis=1)
    grad = ((tau[:, :K1] - s[:, None] * pi).T @ x).ravel()
    a = (np.sqrt(s)[:, None, None] * pi[:, :, None] * x[:, None, :]).reshape(x.shape[0], K1 * p)
    info = -(a.T @ a)
    for k in range(K1):
        blk = slice(k * p, (k + 1) * p)
        info[blk, blk] += (x * (s * pi[:, k])[:, None]).T @ x
    return grad, info


def update_softmax_gate(coords: np.ndarray, tau: np.ndarray, gate0: SoftmaxGate,
                        max_iter: int = 50, grad_tol: float = 1e-6,
                        max_halvings: int = 20) -> SoftmaxGate:
    """Maximize the weighted multinomial log-likelihood by damped Newton steps.

    Each accepted step does not decrease the objective; steps are halved up to
    ``max_halvings`` times. Stops when the gradient max-norm falls below
    ``grad_tol`` or after ``max_iter`` iterations.
    """
    x = augment(coords, gate0.bias)
    tau = np.asarray(tau, dtype=float)
    if tau.shape != (x.shape[0], gate0.K):
        raise ValidationError("tau shape does not match coordinates and gate")
    alpha = np.array(gate0.alpha, dtype=float)
    obj = softmax_objective(alpha, x, tau)
    if not np.isfinite(obj):
        warnings.warn("non-finite softmax objective at start", RuntimeWarning, stacklevel=2)
        return gate0
    for _ in range(max_iter):
        grad, info = _softmax_grad_hess(alpha, x, tau)
        if np.max(np.abs(grad)) < grad_tol:
            break
        jitter = 1e-10 * max(np.trace(info) / info.shape[0], 1e-12)
        try:
            step = np.linalg.solve(info + jitter * np.eye(info.shape[0]), grad)
        except np.linalg.LinAlgError:
            step = grad / max(np.trace(info), 1.0)
        step = step.reshape(alpha.shape)
        t = 1.0
        accepted = False
        for _ in range(max_halvings + 1):
            cand = alpha + t * step
            val = softmax_objective(cand, x, tau)
            if not np.isfinite(val):
                warnings.warn("non-finite softmax objective; keeping last iterate",
                              RuntimeWarning, stacklevel=2)
                return SoftmaxGate(alpha, gate0.bias)
            if val >= obj:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        gain = val - obj
        alpha, obj = cand, val
        if gain <= 1e-15 * max(1.0, abs(obj)):
            break
    return SoftmaxGate(alpha, gate0.bias)


# -- Gaussian gate ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GaussianGate:
    """Normalized-Gaussian gate: weights ``w`` (K,), means ``mu`` (K, 3) and
    covariances ``R`` (K, 3, 3)."""

    w: np.ndarray
    mu: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        mu = np.asarray(self.mu, dtype=float)
        R = np.asarray(self.R, dtype=float)
        if w.ndim != 1 or mu.shape != (w.size, 3) or R.shape != (w.size, 3, 3):
            raise ValidationError("inconsistent Gaussian gate shapes")
        if np.any(w < 0):
            raise ValidationError("gate weights must be non-negative")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "R", R)

    @property
    def K(self) -> int:
        return self.w.size

    def log_joint(self, coords: np.ndarray) -> np.ndarray:
        """Unnormalized log gate terms ``log w_k + log phi3(v; mu_k, R_k)``, (n, K)."""
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        with np.errstate(divide="ignore"):
            logw = np.log(self.w)
        out = np.empty((coords.shape[0], self.K))
        for k in range(self.K):
            out[:, k] = logw[k] + gaussian_logpdf(coords, self.mu[k], self.R[k])
        return out

    def log_weights(self, coords: np.ndarray) -> np.ndarray:
        lj = self.log_joint(coords)
        norm = logsumexp(lj, axis=1, keepdims=True)
        dead = ~np.isfinite(norm[:, 0])
        with np.errstate(invalid="ignore"):
            out = lj - norm
        if dead.any():
            # all terms vanish: hand the voxel to the nearest gate mean
            coords = np.atleast_2d(np.asarray(coords, dtype=float))
            diff = coords[dead, None, :] - self.mu[None]
            big = np.max(np.abs(diff), axis=(1, 2), keepdims=True)
            near = np.argmin(((diff / np.where(big > 0, big, 1.0)) ** 2).sum(axis=2), axis=1)
            out[dead] = -np.inf
            out[np.flatnonzero(dead), near] = 0.0
        return out

    def weights(self, coords: np.ndarray) -> np.ndarray:
        return np.exp(self.log_weights(coords))

    def permuted(self, perm) -> "GaussianGate":
        perm = list(perm)
        return GaussianGate(self.w[perm], self.mu[perm], self.R[perm])

    def to_dict(self) -> dict:
        return {"family": "gaussian", "w": self.w.tolist(), "mu": self.mu.tolist(),
                "R": self.R.tolist()}


def gaussian_weights(gate: GaussianGate, v) -> np.ndarray:
    """Gate weights at one coordinate (3,) or many (n, 3)."""
    v = np.asarray(v, dtype=float)
    w = gate.weights(v)
    return w[0] if v.ndim == 1 else w


def weighted_moments(x: np.ndarray, tau: np.ndarray):
    """Responsibility-weighted means (K, p) and scatter matrices (K, p, p)."""
    mass = tau.sum(axis=0)
    safe = np.where(mass > 0, mass, 1.0)
    means = (tau.T @ x) / safe[:, None]
    scat = np.empty((tau.shape[1], x.shape[1], x.shape[1]))
    for k in range(tau.shape[1]):
        d = x - means[k]
        scat[k] = (d * tau[:, k, None]).T @ d / safe[k]
    return mass, means, scat


def update_gaussian_gate(coords: np.ndarray, tau: np.ndarray, lam: float = 0.075,
                         previous: GaussianGate | None = None,
                         collapse_tol: float = COLLAPSE_TOL,
                         floor: float | None = None) -> GaussianGate:
    """Closed-form gate update with covariance shrinkage ``R~ = lam * R``.

    Collapsed components (mass below ``collapse_tol * n``) keep the previous
    gate's mean and covariance (or the global moments if there is none) and get
    the floor weight. Covariance eigenvalues are clipped at ``floor``
    (default :func:`data_floor` of ``coords``).
    """
    if not 0.0 < lam <= 1.0:
        raise ValidationError("lambda must lie in (0, 1]")
    coords = np.asarray(coords, dtype=float)
    tau = np.asarray(tau, dtype=float)
    n = coords.shape[0]
    mass, mu, R = weighted_moments(coords, tau)
    w = mass / n
    R = lam * R
    dead = mass < collapse_tol * n
    if dead.any():
        if previous is not None:
            mu[dead] = previous.mu[dead]
            R[dead] = previous.R[dead]
        else:
            mu[dead] = coords.mean(axis=0)
            R[dead] = np.cov(coords.T, bias=True).reshape(3, 3) if n > 1 else np.eye(3)
        w[dead] = WEIGHT_FLOOR
        w = w / w.sum()
    return GaussianGate(w, mu, spd_repair(R, data_floor(coords) if floor is None else floor))
