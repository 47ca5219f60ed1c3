"""Clustering evaluation: Davies-Bouldin indices, Dice, tumor-cluster
selection and the adjusted Rand index."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .model import Labeling


@dataclass(frozen=True)
class ClusterSummary:
    label: int
    members: np.ndarray
    spatial_centroid: np.ndarray
    spectral_centroid: np.ndarray


def _labels(labeling) -> np.ndarray:
    return labeling.labels if isinstance(labeling, Labeling) else np.asarray(labeling, dtype=int)


def cluster_summaries(labeling, coords: np.ndarray, curves: np.ndarray) -> list[ClusterSummary]:
    labels = _labels(labeling)
    out = []
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        out.append(ClusterSummary(int(k), idx, coords[idx].mean(axis=0), curves[idx].mean(axis=0)))
    return out


def _spread(x: np.ndarray) -> tuple[float, np.ndarray]:
    c = x.mean(axis=0)
    return float(np.linalg.norm(x - c, axis=1).mean()), c


def _ratio(sa, ca, sb, cb) -> float:
    d = float(np.linalg.norm(ca - cb))
    if d == 0.0:
        raise ValidationError("coincident cluster centroids; Davies-Bouldin ratio undefined")
    return (sa + sb) / d


def davies_bouldin(labeling, features: np.ndarray) -> float:
    """Davies-Bouldin index of the non-empty clusters on ``features`` (n, p).

    The spread of a cluster is the mean Euclidean distance of its members to
    the centroid.
    """
    labels = _labels(labeling)
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    ids = np.unique(labels)
    if ids.size < 2:
        raise ValidationError("Davies-Bouldin needs at least two clusters")
    stats = [_spread(x[labels == k]) for k in ids]
    worst = []
    for a, (sa, ca) in enumerate(stats):
        worst.append(max(_ratio(sa, ca, sb, cb) for b, (sb, cb) in enumerate(stats) if b != a))
    return float(np.mean(worst))


def davies_bouldin_tumor(labeling, tumor_clusters, features: np.ndarray) -> float:
    """Worst separation ratio between the merged tumor region and any other cluster."""
    labels = _labels(labeling)
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    tumor = set(int(k) for k in tumor_clusters)
    ids = set(int(k) for k in np.unique(labels))
    if not tumor:
        raise ValidationError("tumor cluster set is empty")
    if not tumor < ids:
        raise ValidationError("tumor clusters must be a strict subset of the present clusters")
    in_tumor = np.isin(labels, sorted(tumor))
    st, ct = _spread(x[in_tumor])
    return max(_ratio(st, ct, *_spread(x[labels == k])) for k in sorted(ids - tumor))


def _as_mask(region, n: int | None = None) -> np.ndarray:
    region = np.asarray(list(region) if isinstance(region, (set, frozenset)) else region)
    if region.dtype == bool:
        return region
    if n is None:
        n = int(region.max()) + 1 if region.size else 0
    mask = np.zeros(n, dtype=bool)
    mask[region.astype(int)] = True
    return mask


def dice(region_a, region_b) -> float:
    """Dice overlap ``2|A & B| / (|A| + |B|)`` of two boolean masks or index sets."""
    if isinstance(region_a, (set, frozenset)) or isinstance(region_b, (set, frozenset)):
        a, b = set(region_a), set(region_b)
        if not a and not b:
            raise ValidationError("Dice undefined for two empty regions")
        return 2.0 * len(a & b) / (len(a) + len(b))
    a = np.asarray(region_a, dtype=bool)
    b = np.asarray(region_b, dtype=bool)
    if a.shape != b.shape:
        raise ValidationError("regions must have the same shape")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        raise ValidationError("Dice undefined for two empty regions")
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def _overlaps(labels, truth):
    ids = np.unique(labels)
    sizes = np.array([(labels == k).sum() for k in ids])
    hits = np.array([np.logical_and(labels == k, truth).sum() for k in ids])
    return ids, sizes, hits


def select_tumor_clusters(labeling, truth, method: str = "auto") -> tuple[set, float]:
    """Clusters whose union best matches ``truth`` in Dice.

    Clusters are ranked by the fraction of their voxels inside ``truth`` and
    added while the merged Dice strictly improves. Under this ranking the
    forward selection reaches the global optimum: including a cluster helps
    iff its inside-fraction exceeds half the current Dice, and the current
    Dice never drops below twice the next fraction once growth stops.
    ``method="exhaustive"`` searches all subsets instead (small K only).
    """
    labels = _labels(labeling)
    truth = np.asarray(truth, dtype=bool)
    if truth.shape != labels.shape:
        raise ValidationError("truth mask must have one entry per voxel")
    t = int(truth.sum())
    if t == 0:
        raise ValidationError("truth region is empty")
    ids, sizes, hits = _overlaps(labels, truth)
    cand = [j for j in range(ids.size) if hits[j] > 0]
    if not cand:
        return set(), 0.0
    if method == "exhaustive":
        return _exhaustive(ids, sizes, hits, cand, t)
    if method not in ("auto", "greedy"):
        raise ValidationError(f"unknown selection method {method!r}")
    # rank by inside-fraction; exact rational comparison, ties to larger overlap then id
    order = sorted(cand, key=lambda j: (-hits[j] / sizes[j], -hits[j], ids[j]))
    chosen, a, s = [], 0, 0
    best = 0.0
    for j in order:
        new = 2.0 * (a + hits[j]) / (s + sizes[j] + t)
        if new <= best:
            break
        chosen.append(j)
        a, s, best = a + hits[j], s + sizes[j], new
    return {int(ids[j]) for j in chosen}, best


def _exhaustive(ids, sizes, hits, cand, t):
    best, best_set = 0.0, ()
    for r in range(1, len(cand) + 1):
        for sub in itertools.combinations(cand, r):
            val = 2.0 * sum(hits[j] for j in sub) / (sum(sizes[j] for j in sub) + t)
            if val > best:
                best, best_set = val, sub
    return {int(ids[j]) for j in best_set}, best


def adjusted_rand(labels_a, labels_b) -> float:
    """Adjusted Rand index from the pair-counting contingency table."""
    a = np.asarray(_labels(labels_a))
    b = np.asarray(_labels(labels_b))
    if a.shape != b.shape:
        raise ValidationError("labelings must have equal length")
    n = a.size
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def pairs(x):
        x = x.astype(float)
        return float((x * (x - 1) / 2).sum())

    index = pairs(table)
    ra, rb = pairs(table.sum(axis=1)), pairs(table.sum(axis=0))
    total = n * (n - 1) / 2
    expected = ra * rb / total if total else 0.0
    top = 0.5 * (ra + rb)
    if top == expected:
        return 1.0
    return (index - expected) / (top - expected)


def spatial_scatter(labeling, coords: np.ndarray) -> float:
    """Mean squared distance of each voxel to its cluster's spatial centroid."""
    labels = _labels(labeling)
    coords = np.asarray(coords, dtype=float)
    total = 0.0
    for k in np.unique(labels):
        x = coords[labels == k]
        total += float(((x - x.mean(axis=0)) ** 2).sum())
    return total / coords.shape[0]


def evaluate(labeling, coords, curves, truth_mask) -> dict:
    """Dice of the selected tumor clusters plus spatial/spectral DB and DB_t."""
    sel, d = select_tumor_clusters(labeling, truth_mask)
    out = {"dice": d,
           "spat_db": davies_bouldin(labeling, coords),
           "spec_db": davies_bouldin(labeling, curves)}
    present = set(np.unique(_labels(labeling)).tolist())
    if sel and sel < present:
        out["spat_dbt"] = davies_bouldin_tumor(labeling, sel, coords)
        out["spec_dbt"] = davies_bouldin_tumor(labeling, sel, curves)
    else:
        out["spat_dbt"] = out["spec_dbt"] = float("nan")
    out["tumor_clusters"] = sorted(sel)
    return out
