"""Reference clusterings: a spectral-only Gaussian mixture and k-means on
concatenated spatial and spectral features."""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp
from threadpoolctl import threadpool_limits

from .errors import NumericalError, ValidationError
from .gating import data_floor, gaussian_logpdf, spd_repair, weighted_moments
from .initialization import initial_centers, lloyd, nearest
from .model import FitReport, Labeling
from .volume import SpectralVolume

PRUNE_TOL = 1e-8


def _maximin_seeds(x: np.ndarray, K: int) -> np.ndarray:
    """Deterministic farthest-point seeding, starting at the row nearest the mean."""
    first = int(np.argmin(((x - x.mean(axis=0)) ** 2).sum(axis=1)))
    seeds = [first]
    d2 = ((x - x[first]) ** 2).sum(axis=1)
    for _ in range(1, K):
        nxt = int(np.argmax(d2))
        seeds.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return np.array(seeds)


def gmm_spectral(vol: SpectralVolume, K0: int = 150, max_iter: int = 500, tol: float = 1e-6,
                 max_kmeans_iter: int = 100):
    """Full-covariance Gaussian mixture on the curves alone.

    Components whose responsibility mass drops below ``1e-8 * n`` are pruned.
    Returns ``(Labeling, FitReport)``; labels are renumbered ``1..K_final``.
    """
    y = np.asarray(vol.curves, dtype=float)
    n, m = y.shape
    if not 1 <= K0 <= n:
        raise ValidationError(f"K0 must lie in 1..{n}")
    floor = data_floor(y)
    with threadpool_limits(limits=1, user_api="blas"):
        assign, _, _ = lloyd(y, y[_maximin_seeds(y, K0)], max_iter=max_kmeans_iter)
        tau = np.zeros((n, K0))
        tau[np.arange(n), assign] = 1.0
        trace, pruned = [], []
        alive = list(range(K0))
        it = 0
        while True:
            mass, means, covs = weighted_moments(y, tau)
            keep = mass >= PRUNE_TOL * n
            if not keep.all():
                pruned += [alive[k] for k in np.flatnonzero(~keep)]
                alive = [alive[k] for k in np.flatnonzero(keep)]
                if not alive:
                    raise NumericalError("all mixture components collapsed")
                mass, means, covs = mass[keep], means[keep], covs[keep]
            w = mass / mass.sum()
            covs = spd_repair(covs, floor)
            logp = np.column_stack([np.log(w[k]) + gaussian_logpdf(y, means[k], covs[k])
                                    for k in range(w.size)])
            lse = logsumexp(logp, axis=1)
            ll = float(lse.sum())
            if not np.isfinite(ll):
                raise NumericalError("non-finite GMM log-likelihood")
            trace.append(ll)
            tau = np.exp(logp - lse[:, None])
            if len(trace) > 1 and abs(ll - trace[-2]) <= tol * abs(trace[-2]):
                converged = True
                break
            if it >= max_iter:
                converged = False
                break
            it += 1
    raw = np.argmax(tau, axis=1)
    present, labels = np.unique(raw, return_inverse=True)
    report = FitReport(trace, it, converged, sorted(pruned))
    return Labeling(labels + 1, present.size), report


def _zscore(x: np.ndarray) -> np.ndarray:
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    return (x - x.mean(axis=0)) / sd


def joint_features(vol: SpectralVolume, spatial_weight: float = 1.0) -> np.ndarray:
    return np.hstack([spatial_weight * _zscore(vol.coords), _zscore(vol.curves)])


def seed_voxels(coords: np.ndarray, K: int) -> np.ndarray:
    """Voxels nearest the (surplus-trimmed) spatial lattice centers."""
    centers = initial_centers(coords, K)
    idx, _ = nearest(centers, coords)
    return idx


def kmeans_joint(vol: SpectralVolume, K: int = 40, spatial_weight: float = 1.0):
    """Lloyd's k-means on standardized coordinates (scaled by ``spatial_weight``)
    concatenated with standardized curves, seeded from the spatial lattice.

    Returns ``(Labeling, sse_trace)``.
    """
    if not 1 <= K <= vol.n:
        raise ValidationError(f"K must lie in 1..{vol.n}")
    if spatial_weight < 0:
        raise ValidationError("spatial_weight must be >= 0")
    feats = joint_features(vol, spatial_weight)
    seeds = seed_voxels(vol.coords, K)
    with threadpool_limits(limits=1, user_api="blas"):
        assign, _, trace = lloyd(feats, feats[seeds])
    return Labeling(assign + 1, K), trace

