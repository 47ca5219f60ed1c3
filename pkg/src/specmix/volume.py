"""Spectral volumes: data model, file I/O, air masking and synthetic phantoms.

A volume holds one attenuation curve (HU) per unmasked voxel, all sampled on a
shared, strictly increasing energy grid (keV). Grid positions are enumerated in
x-fastest order; the boolean ``mask`` maps them to curve rows.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

DEFAULT_ENERGIES = np.arange(40.0, 140.0 + 1e-9, 5.0)
DEFAULT_AIR_THRESHOLD = -400.0
SVOL_MAGIC = b"SVOL1"


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def grid_coords(mask: np.ndarray) -> np.ndarray:
    """Voxel-index coordinates of the True cells of ``mask``, x-fastest order."""
    flat = np.flatnonzero(mask.ravel(order="F"))
    x, y, z = np.unravel_index(flat, mask.shape, order="F")
    return np.column_stack([x, y, z]).astype(float)


@dataclass(frozen=True, eq=False)
class SpectralVolume:
    """Immutable spectral image.

    Attributes
    ----------
    energies : (m,) array
        Energy levels in keV, strictly increasing.
    curves : (n, m) array
        Attenuation curve of each unmasked voxel, rows in mask order.
    mask : (nx, ny, nz) bool array
        True where the grid position carries a curve.
    coords : (n, 3) array
        Voxel-index coordinates of each row (derived from ``mask``).
    """

    energies: np.ndarray
    curves: np.ndarray
    mask: np.ndarray
    coords: np.ndarray = field(init=False)

    def __post_init__(self):
        energies = np.asarray(self.energies, dtype=float)
        curves = np.asarray(self.curves, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if energies.ndim != 1 or energies.size < 1:
            raise ValidationError("energies must be a non-empty 1-D array")
        if not np.all(np.isfinite(energies)):
            raise ValidationError("energies must be finite")
        if np.any(np.diff(energies) <= 0):
            raise ValidationError("energies not strictly increasing")
        if mask.ndim != 3:
            raise ValidationError("mask must be a 3-D grid")
        if curves.ndim != 2 or curves.shape[1] != energies.size:
            raise ValidationError(
                f"curves must be (n, {energies.size}), got {curves.shape}")
        if curves.shape[0] != int(mask.sum()):
            raise ValidationError(
                f"mask has {int(mask.sum())} voxels but {curves.shape[0]} curves given")
        if np.isnan(curves).any():
            raise ValidationError("NaN attenuation values")
        object.__setattr__(self, "energies", _readonly(energies))
        object.__setattr__(self, "curves", _readonly(curves))
        object.__setattr__(self, "mask", _readonly(mask))
        object.__setattr__(self, "coords", _readonly(grid_coords(mask)))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.mask.shape)

    @property
    def n(self) -> int:
        return self.curves.shape[0]

    @property
    def m(self) -> int:
        return self.energies.size

    def row_index_grid(self) -> np.ndarray:
        """Grid of curve-row indices, -1 where masked out."""
        grid = np.full(self.mask.size, -1, dtype=np.int64)
        flat = np.flatnonzero(self.mask.ravel(order="F"))
        grid[flat] = np.arange(flat.size)
        return grid.reshape(self.mask.shape, order="F")

    def subset(self, keep: np.ndarray) -> "SpectralVolume":
        """Volume restricted to the rows where ``keep`` is True."""
        keep = np.asarray(keep, dtype=bool)
        if keep.shape != (self.n,):
            raise ValidationError("keep must be a boolean n-vector")
        new_mask = np.zeros(self.mask.size, dtype=bool)
        flat = np.flatnonzero(self.mask.ravel(order="F"))
        new_mask[flat[keep]] = True
        new_mask = new_mask.reshape(self.mask.shape, order="F")
        return SpectralVolume(self.energies, self.curves[keep], new_mask)


def coordinate_frame(coords: np.ndarray, standardize: bool = True,
                     spacing=None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(center, scale)`` defining the fitting frame
    ``(coords * spacing - center) / scale``.

    With ``standardize`` each axis gets zero mean and unit variance; otherwise
    the frame is the (spaced) voxel-index frame.
    """
    spacing = np.ones(3) if spacing is None else np.asarray(spacing, dtype=float)
    scaled = np.asarray(coords, dtype=float) * spacing
    if not standardize:
        return np.zeros(3), np.ones(3)
    sd = scaled.std(axis=0)
    sd[sd == 0] = 1.0
    return scaled.mean(axis=0), sd


def to_frame(coords: np.ndarray, center, scale, spacing=None) -> np.ndarray:
    spacing = np.ones(3) if spacing is None else np.asarray(spacing, dtype=float)
    return (np.asarray(coords, dtype=float) * spacing - np.asarray(center)) / np.asarray(scale)


# -- file I/O -----------------------------------------------------------------

def save_svol(vol: SpectralVolume, path) -> None:
    """Write the little-endian ``SVOL1`` binary format (float32 payload)."""
    nx, ny, nz = vol.dims
    with open(path, "wb") as fh:
        fh.write(SVOL_MAGIC)
        fh.write(struct.pack("<4I", nx, ny, nz, vol.m))
        fh.write(vol.energies.astype("<f4").tobytes())
        fh.write(vol.mask.ravel(order="F").astype(np.uint8).tobytes())
        fh.write(vol.curves.astype("<f4").tobytes(order="C"))


def _load_svol(path) -> SpectralVolume:
    data = Path(path).read_bytes()
    if len(data) < 21 or data[:5] != SVOL_MAGIC:
        raise ValidationError("malformed header: missing SVOL1 magic")
    nx, ny, nz, m = struct.unpack_from("<4I", data, 5)
    off = 21
    ncell = nx * ny * nz
    if m == 0 or ncell == 0:
        raise ValidationError("malformed header: zero-sized dimension")
    need = off + 4 * m + ncell
    if len(data) < need:
        raise ValidationError("dimension mismatch: file truncated before mask")
    energies = np.frombuffer(data, "<f4", m, off).astype(float)
    off += 4 * m
    mask_flat = np.frombuffer(data, np.uint8, ncell, off)
    off += ncell
    if np.any(mask_flat > 1):
        raise ValidationError("malformed mask bytes (expected 0/1)")
    n = int(mask_flat.sum())
    if len(data) - off != 4 * n * m:
        raise ValidationError(
            f"dimension mismatch: expected {n}x{m} float32 curves, "
            f"found {len(data) - off} payload bytes")
    curves = np.frombuffer(data, "<f4", n * m, off).astype(float).reshape(n, m)
    mask = mask_flat.astype(bool).reshape((nx, ny, nz), order="F")
    return SpectralVolume(energies, curves, mask)


def save_csv(vol: SpectralVolume, path) -> None:
    header = ["x", "y", "z"] + [f"e{e:.17g}" for e in vol.energies]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for c, y in zip(vol.coords.astype(int), vol.curves):
            w.writerow([*c.tolist(), *(f"{v:.17g}" for v in y)])


def _load_csv(path) -> SpectralVolume:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError("malformed header: empty file")
    header = rows[0]
    if header[:3] != ["x", "y", "z"] or len(header) < 4 or \
            not all(h.startswith("e") for h in header[3:]):
        raise ValidationError("malformed header: expected x,y,z,e<E1>,...")
    try:
        energies = np.array([float(h[1:]) for h in header[3:]])
        body = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise ValidationError(f"malformed value: {exc}") from None
    if body.size == 0:
        raise ValidationError("no voxel rows")
    if body.shape[1] != len(header):
        raise ValidationError("dimension mismatch: row width differs from header")
    xyz = body[:, :3]
    if np.any(xyz < 0) or np.any(xyz != np.round(xyz)):
        raise ValidationError("coordinates must be non-negative integers")
    xyz = xyz.astype(int)
    dims = tuple(xyz.max(axis=0) + 1)
    mask = np.zeros(dims, dtype=bool)
    mask[xyz[:, 0], xyz[:, 1], xyz[:, 2]] = True
    if mask.sum() != xyz.shape[0]:
        raise ValidationError("duplicate voxel coordinates")
    # rows may come in any order; reorder to mask order
    order = np.lexsort((xyz[:, 0], xyz[:, 1], xyz[:, 2]))
    return SpectralVolume(energies, body[order, 3:], mask)


def load_volume(path, format: str | None = None) -> SpectralVolume:
    """Load a volume from ``svol`` binary or ``csv``; format inferred from suffix."""
    if format is None:
        format = "csv" if str(path).lower().endswith(".csv") else "svol"
    if format in ("svol", "svol-binary"):
        return _load_svol(path)
    if format == "csv":
        return _load_csv(path)
    raise ValidationError(f"unknown volume format {format!r}")


def save_volume(vol: SpectralVolume, path, format: str | None = None) -> None:
    if format is None:
        format = "csv" if str(path).lower().endswith(".csv") else "svol"
    if format == "csv":
        save_csv(vol, path)
    else:
        save_svol(vol, path)


# -- preprocessing ------------------------------------------------------------

def mask_air(vol: SpectralVolume, threshold_hu: float = DEFAULT_AIR_THRESHOLD) -> SpectralVolume:
    """Drop voxels whose mean attenuation lies below ``threshold_hu``."""
    if not np.isfinite(threshold_hu):
        raise ValidationError("threshold_hu must be finite")
    keep = vol.curves.mean(axis=1) >= threshold_hu
    if not keep.any():
        raise ValidationError("all voxels masked as air")
    if keep.all():
        return vol
    return vol.subset(keep)


# -- synthetic phantoms -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Phantom:
    """A synthetic volume with known region structure.

    ``true_labels`` are 1-based region ids ordered by decreasing region size, so
    label 1 is the largest ("background") region. ``coefficients[k]`` holds the
    cubic coefficients of region ``k+1``'s mean curve in the normalized energy
    ``t = (E - E_min) / (E_max - E_min)``.
    """

    volume: SpectralVolume
    true_labels: np.ndarray
    tumor_mask: np.ndarray
    coefficients: np.ndarray
    mean_curves: np.ndarray

    @property
    def n_regions(self) -> int:
        return self.coefficients.shape[0]


def cubic_curve(coefs: np.ndarray, energies: np.ndarray) -> np.ndarray:
    e = np.asarray(energies, dtype=float)
    t = (e - e[0]) / (e[-1] - e[0]) if e.size > 1 else np.zeros_like(e)
    return np.polynomial.polynomial.polyval(t, np.asarray(coefs).T)


def _draw_curve(rng: np.random.Generator) -> np.ndarray:
    # y(t) = floor + amp * (1-t)^2 (1 + kappa t): a smooth decay from 40 keV
    floor = rng.uniform(0.0, 120.0)
    amp = rng.uniform(20.0, 300.0)
    kappa = rng.uniform(-0.5, 1.5)
    return np.array([floor + amp, amp * (kappa - 2.0), amp * (1.0 - 2.0 * kappa), amp * kappa])


def _regions(dims, k: int, rng: np.random.Generator) -> np.ndarray:
    """Anisotropic Voronoi tiling with ``k`` ellipsoidal cells."""
    mask = np.ones(dims, dtype=bool)
    coords = grid_coords(mask)
    span = np.maximum(np.asarray(dims, dtype=float), 1.0)
    unit = (coords + 0.5) / span
    for _ in range(100):
        cand = rng.uniform(0.0, 1.0, size=(50 * k, 3))
        centers = [cand[0]]
        for _ in range(1, k):
            d = np.min([np.sum((cand - c) ** 2, axis=1) for c in centers], axis=0)
            centers.append(cand[int(np.argmax(d))])
        centers = np.array(centers)
        axes = rng.uniform(0.6, 1.6, size=(k, 3))
        d2 = (((unit[:, None, :] - centers[None]) / axes[None]) ** 2).sum(axis=2)
        lab = np.argmin(d2, axis=1)
        if np.bincount(lab, minlength=k).min() > 0:
            return lab
    raise ValidationError("could not place non-empty regions; grid too small")


def synth_phantom(dims=(30, 30, 4), energies=None, k_true: int = 4, noise_sd: float = 10.0,
                  seed: int = 0, min_separation: float | None = None,
                  mimic_tumor: bool = False) -> Phantom:
    """Generate a piecewise-constant-curve phantom.

    ``k_true`` compact ellipsoidal regions tile the grid; each gets a cubic mean
    decay curve, with every pair of curves differing by at least
    ``min_separation`` HU (default ``max(5*noise_sd, 20)``) at some energy.
    The smallest region is the tumor. With ``mimic_tumor`` the non-background
    region farthest from the tumor reuses the tumor's mean curve, so only
    spatial position tells the two apart.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValidationError("dims must be three positive integers")
    energies = DEFAULT_ENERGIES if energies is None else np.asarray(energies, dtype=float)
    if k_true < 1:
        raise ValidationError("k_true must be >= 1")
    if noise_sd < 0:
        raise ValidationError("noise_sd must be >= 0")
    if int(np.prod(dims)) < k_true:
        raise ValidationError("dims admit fewer voxels than k_true")
    if mimic_tumor and k_true < 3:
        raise ValidationError("mimic_tumor needs k_true >= 3")
    sep = max(5.0 * noise_sd, 20.0) if min_separation is None else float(min_separation)

    rng = np.random.default_rng(seed)
    raw = _regions(dims, k_true, rng)
    sizes = np.bincount(raw, minlength=k_true)
    order = np.argsort(-sizes, kind="stable")
    relabel = np.empty(k_true, dtype=int)
    relabel[order] = np.arange(k_true)
    labels0 = relabel[raw]

    n_distinct = k_true - 1 if mimic_tumor else k_true
    coefs = []
    draws = 0
    while len(coefs) < n_distinct:
        if draws >= 1000:
            raise ValidationError(
                f"infeasible separation: cannot place {n_distinct} curves "
                f"{sep:g} HU apart")
        c = _draw_curve(rng)
        draws += 1
        y = cubic_curve(c, energies)
        if all(np.max(np.abs(y - cubic_curve(o, energies))) >= sep for o in coefs):
            coefs.append(c)
    coefs = np.array(coefs)
    if mimic_tumor:
        # the mimic is the non-background region farthest from the tumor
        coords = grid_coords(np.ones(dims, dtype=bool))
        cent = np.array([coords[labels0 == k].mean(axis=0) for k in range(k_true)])
        dist = np.linalg.norm(cent - cent[k_true - 1], axis=1)
        dist[[0, k_true - 1]] = -1.0
        mimic = int(np.argmax(dist))
        coefs = np.insert(coefs, mimic, coefs[-1], axis=0)
    mean_curves = cubic_curve(coefs, energies)

    curves = mean_curves[labels0]
    if noise_sd > 0:
        curves = curves + rng.normal(0.0, noise_sd, size=curves.shape)
    vol = SpectralVolume(energies, curves, np.ones(dims, dtype=bool))
    labels = labels0 + 1
    tumor = labels == k_true if k_true >= 2 else np.zeros(labels.size, dtype=bool)
    return Phantom(vol, _readonly(labels), _readonly(tumor), _readonly(coefs),
                   _readonly(mean_curves))


def write_truth_csv(phantom: Phantom, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "true_label", "is_tumor"])
        for i, (lab, t) in enumerate(zip(phantom.true_labels, phantom.tumor_mask)):
            w.writerow([i, int(lab), int(bool(t))])


def read_truth_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(true_labels, tumor_mask)`` from a ``labels.csv`` sidecar."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"row", "true_label", "is_tumor"} <= set(reader.fieldnames):
            raise ValidationError("truth file needs columns row,true_label,is_tumor")
        rows = [(int(r["row"]), int(r["true_label"]), int(r["is_tumor"])) for r in reader]
    rows.sort()
    arr = np.array(rows, dtype=int).reshape(-1, 3)
    if not np.array_equal(arr[:, 0], np.arange(len(arr))):
        raise ValidationError("truth rows must cover 0..n-1 exactly once")
    return arr[:, 1], arr[:, 2].astype(bool)
