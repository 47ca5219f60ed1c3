"""Reproducible EM initialization from a spatial k-means (Voronoi) partition.

Without a seed, k-means starts from a regular lattice of centers laid over the
bounding box of the unmasked voxels. The lattice shape ``(a, b, c)`` is chosen
among all shapes with ``K <= a*b*c <= 2K`` by minimizing

    var(log(cell edge lengths)) + (a*b*c - K) / K

i.e. cells as close to cubic as possible with few surplus centers. Surplus
centers are the ones whose lattice Voronoi cell holds the fewest voxels (ties
broken by lattice index, x-fastest).
"""

from __future__ import annotations

import numpy as np

from .basis import build_design, vectorize_volume
from .errors import ValidationError
from .model import Labeling, ModelParams
from .volume import SpectralVolume, coordinate_frame, to_frame

MAX_LLOYD_ITER = 300


def lattice_shape(extent, K: int) -> tuple[int, int, int]:
    extent = np.asarray(extent, dtype=float)
    best = None
    for a in range(1, 2 * K + 1):
        for b in range(1, 2 * K // a + 1):
            lo = -(-K // (a * b))
            for c in range(lo, 2 * K // (a * b) + 1):
                cells = np.log(extent / np.array([a, b, c]))
                cost = round(float(cells.var()) + (a * b * c - K) / K, 12)
                key = (cost, a * b * c, (a, b, c))
                if best is None or key < best:
                    best = key
    return best[2]


def lattice_centers(points: np.ndarray, K: int) -> np.ndarray:
    """Regular lattice of at least ``K`` centers over the bounding box of ``points``,
    in x-fastest order."""
    lo = points.min(axis=0) - 0.5
    extent = points.max(axis=0) - points.min(axis=0) + 1.0
    shape = lattice_shape(extent, K)
    axes = [lo[j] + (np.arange(shape[j]) + 0.5) * extent[j] / shape[j] for j in range(3)]
    zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel(), zz.ravel()])


def nearest(points: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest center (ties to the lowest index) and squared distance."""
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    idx = np.argmin(d2, axis=1)
    return idx, d2[np.arange(points.shape[0]), idx]


def lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int = MAX_LLOYD_ITER):
    """Lloyd's k-means from the given centers.

    Empty clusters are re-seeded at the point farthest from its current center.
    Returns ``(assignment, centers, sse_trace)`` with 0-based assignments.
    """
    centers = np.array(centers, dtype=float, copy=True)
    K = centers.shape[0]
    assign, d2 = nearest(points, centers)
    trace = [float(d2.sum())]
    for _ in range(max_iter):
        counts = np.bincount(assign, minlength=K)
        for k in np.flatnonzero(counts == 0):
            # steal the farthest point from a cluster that can spare one
            movable = np.where(counts[assign] > 1, d2, -np.inf)
            far = int(np.argmax(movable))
            if not np.isfinite(movable[far]):
                raise ValidationError("fewer points than clusters")
            counts[assign[far]] -= 1
            counts[k] = 1
            centers[k] = points[far]
            assign[far] = k
            d2[far] = 0.0
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, points)
        centers = sums / counts[:, None]
        new, d2 = nearest(points, centers)
        trace.append(float(d2.sum()))
        if np.array_equal(new, assign):
            break
        assign = new
    return assign, centers, trace


def initial_centers(points: np.ndarray, K: int) -> np.ndarray:
    """Exactly ``K`` lattice centers, surplus ones trimmed."""
    centers = lattice_centers(points, K)
    if centers.shape[0] > K:
        owner, _ = nearest(points, centers)
        counts = np.bincount(owner, minlength=centers.shape[0])
        order = sorted(range(centers.shape[0]), key=lambda j: (counts[j], j))
        centers = centers[sorted(order[centers.shape[0] - K:])]
    return centers


def voronoi_partition(coords: np.ndarray, K: int, seed: int | None = None,
                      spacing=None) -> np.ndarray:
    """1-based spatial k-means labels of the voxel coordinates."""
    points = np.asarray(coords, dtype=float)
    if spacing is not None:
        points = points * np.asarray(spacing, dtype=float)
    n = points.shape[0]
    if not 1 <= K <= n:
        raise ValidationError(f"K must lie in 1..{n}")
    if seed is None:
        centers = initial_centers(points, K)
    else:
        rng = np.random.default_rng(seed)
        centers = points[rng.choice(n, size=K, replace=False)]
    assign, _, _ = lloyd(points, centers)
    return assign + 1


def voronoi_init(vol: SpectralVolume, K: int, seed: int | None = None, config=None,
                 twofold: bool = False) -> tuple[Labeling, ModelParams]:
    """Initial partition and parameters from hard-assignment M-steps.

    ``config`` (a :class:`specmix.fmr.FitConfig`) selects the gate family,
    basis, lambda and coordinate frame; defaults apply when omitted.
    """
    from .fmr import FitConfig, initial_gate, initial_params, variant_name
    from .twofold import m_step_coef

    config = FitConfig(K=K) if config is None else config
    labels = voronoi_partition(vol.coords, K, seed, config.spacing)
    center, scale = coordinate_frame(vol.coords, config.standardize, config.spacing)
    x = to_frame(vol.coords, center, scale, config.spacing)
    design = build_design(vol.energies, config.spec)
    spacing = None if config.spacing is None else np.asarray(config.spacing, dtype=float)
    if not twofold:
        params = initial_params(x, vol.curves, labels, K, config, design, center, scale)
    else:
        tau = np.zeros((vol.n, K))
        tau[np.arange(vol.n), labels - 1] = 1.0
        coefs = vectorize_volume(vol, design)
        params = ModelParams(variant_name(config.gate, True), initial_gate(x, tau, config),
                             tuple(m_step_coef(coefs, tau, config.diagonal)), config.spec,
                             config.lam, center, scale, spacing, config.diagonal)
    return Labeling(labels, K), params

