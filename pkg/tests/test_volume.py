import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from specmix.errors import ValidationError
from specmix.volume import (SpectralVolume, grid_coords, load_volume, mask_air, read_truth_csv,
                            save_volume, synth_phantom, write_truth_csv, coordinate_frame,
                            to_frame, cubic_curve)

from conftest import random_volume


def test_smallest_volume():
    vol = SpectralVolume([40, 90, 140], [[1, 2, 3], [4, 5, 6]], np.ones((2, 1, 1), bool))
    assert vol.n == 2 and vol.m == 3 and vol.dims == (2, 1, 1)
    assert np.array_equal(vol.coords, [[0, 0, 0], [1, 0, 0]])


def test_rejects_repeated_energy():
    with pytest.raises(ValidationError, match="energies not strictly increasing"):
        SpectralVolume([40, 40, 140], [[1, 2, 3]], np.ones((1, 1, 1), bool))


def test_rejects_nan_and_count_mismatch():
    with pytest.raises(ValidationError, match="NaN"):
        SpectralVolume([40, 90], [[1, np.nan]], np.ones((1, 1, 1), bool))
    with pytest.raises(ValidationError):
        SpectralVolume([40, 90], [[1, 2], [3, 4]], np.ones((1, 1, 1), bool))


def test_coords_are_x_fastest():
    mask = np.ones((2, 3, 2), bool)
    c = grid_coords(mask)
    assert np.array_equal(c[:3], [[0, 0, 0], [1, 0, 0], [0, 1, 0]])
    assert np.array_equal(c[6], [0, 0, 1])


def test_row_index_grid_bijection():
    vol = random_volume((5, 4, 3), seed=3, keep=0.6)
    grid = vol.row_index_grid()
    rows = grid[grid >= 0]
    assert np.array_equal(np.sort(rows), np.arange(vol.n))
    # reconstructing coordinates from the grid gives the stored coordinates
    idx = np.argwhere(grid >= 0)
    order = grid[tuple(idx.T)]
    assert np.array_equal(vol.coords[order], idx.astype(float))


@pytest.mark.parametrize("fmt,suffix", [("svol", ".svol"), ("csv", ".csv")])
def test_round_trip(tmp_path, fmt, suffix):
    vol = random_volume((5, 5, 2), seed=1, keep=0.8)
    if fmt == "svol":
        # the binary payload is float32; use representable values for bit-exactness
        vol = SpectralVolume(vol.energies, vol.curves.astype(np.float32), vol.mask)
    path = tmp_path / f"v{suffix}"
    save_volume(vol, path)
    back = load_volume(path)
    assert np.array_equal(back.mask, vol.mask)
    assert np.array_equal(back.energies, vol.energies)
    assert np.array_equal(back.curves, vol.curves)
    assert np.array_equal(back.coords, vol.coords)


def test_svol_errors(tmp_path):
    bad = tmp_path / "bad.svol"
    bad.write_bytes(b"NOPE!" + bytes(20))
    with pytest.raises(ValidationError, match="malformed header"):
        load_volume(bad)
    vol = random_volume((3, 3, 1), seed=2)
    good = tmp_path / "g.svol"
    save_volume(vol, good)
    trunc = tmp_path / "t.svol"
    trunc.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(ValidationError, match="dimension mismatch"):
        load_volume(trunc)


def test_mask_air_removes_constant_air_voxel():
    curves = np.full((3, 4), 30.0)
    curves[1] = -1000.0
    vol = SpectralVolume([40, 60, 80, 100], curves, np.ones((3, 1, 1), bool))
    out = mask_air(vol, -500)
    assert out.n == 2
    assert np.array_equal(out.coords, [[0, 0, 0], [2, 0, 0]])


def test_mask_air_identity_and_empty():
    vol = random_volume(seed=4)
    assert mask_air(vol, vol.curves.mean(axis=1).min() - 1) is vol
    with pytest.raises(ValidationError):
        mask_air(vol, 1e9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), thr=st.floats(-60, 60))
def test_mask_air_matches_filter_and_is_idempotent(seed, thr):
    vol = random_volume((4, 4, 2), seed=seed, scale=40.0)
    means = vol.curves.mean(axis=1)
    if not (means >= thr).any():
        return
    out = mask_air(vol, thr)
    assert np.array_equal(out.curves, vol.curves[means >= thr])
    assert np.array_equal(out.coords, vol.coords[means >= thr])
    again = mask_air(out, thr)
    assert np.array_equal(again.curves, out.curves) and np.array_equal(again.mask, out.mask)


def test_phantom_noiseless_curves_equal_region_means():
    ph = synth_phantom((12, 12, 2), k_true=4, noise_sd=0, seed=5)
    for k in range(1, 5):
        rows = ph.volume.curves[ph.true_labels == k]
        assert np.array_equal(rows, np.broadcast_to(ph.mean_curves[k - 1], rows.shape))
        assert np.all(np.ptp(rows, axis=0) == 0)


def test_phantom_deterministic_and_valid():
    a = synth_phantom((10, 10, 2), k_true=4, seed=9)
    b = synth_phantom((10, 10, 2), k_true=4, seed=9)
    assert np.array_equal(a.volume.curves, b.volume.curves)
    assert np.array_equal(a.true_labels, b.true_labels)
    assert set(np.unique(a.true_labels)) == {1, 2, 3, 4}
    # the tumor is a union of whole regions and not the background
    tumor_regions = set(np.unique(a.true_labels[a.tumor_mask]))
    assert tumor_regions == {4}
    assert not np.any(a.tumor_mask & ~np.isin(a.true_labels, list(tumor_regions)))


def test_phantom_curve_separation():
    ph = synth_phantom((10, 10, 2), k_true=5, noise_sd=10, seed=2)
    mc = ph.mean_curves
    for i in range(5):
        for j in range(i):
            assert np.max(np.abs(mc[i] - mc[j])) >= 50.0


def test_phantom_region_means_converge():
    ph = synth_phantom((30, 30, 4), k_true=4, noise_sd=10, seed=11)
    for k in range(1, 5):
        rows = ph.volume.curves[ph.true_labels == k]
        emp = rows.mean(axis=0)
        gen = cubic_curve(ph.coefficients[k - 1], ph.volume.energies)
        assert np.all(np.abs(emp - gen) <= 3 * 10 / np.sqrt(rows.shape[0]) * 1.5)
        # mean curves are cubic: a cubic fit is exact
        t = (ph.volume.energies - 40) / 100
        fit = np.polynomial.polynomial.polyfit(t, ph.mean_curves[k - 1], 3)
        assert np.allclose(fit, ph.coefficients[k - 1], atol=1e-8)


def test_phantom_mimic_shares_tumor_curve():
    ph = synth_phantom((20, 20, 2), k_true=5, seed=3, mimic_tumor=True)
    same = [k for k in range(4) if np.array_equal(ph.coefficients[k], ph.coefficients[4])]
    assert len(same) == 1 and same[0] != 0


def test_phantom_errors():
    with pytest.raises(ValidationError, match="infeasible separation"):
        synth_phantom((10, 10, 1), k_true=6, noise_sd=200, seed=0)
    with pytest.raises(ValidationError):
        synth_phantom((1, 1, 1), k_true=2)
    with pytest.raises(ValidationError):
        synth_phantom(k_true=0)


def test_truth_csv_round_trip(tmp_path):
    ph = synth_phantom((6, 6, 1), k_true=3, seed=1)
    write_truth_csv(ph, tmp_path / "labels.csv")
    labels, tumor = read_truth_csv(tmp_path / "labels.csv")
    assert np.array_equal(labels, ph.true_labels)
    assert np.array_equal(tumor, ph.tumor_mask)


def test_coordinate_frame():
    coords = grid_coords(np.ones((4, 3, 1), bool))
    c, s = coordinate_frame(coords)
    x = to_frame(coords, c, s)
    assert np.allclose(x[:, :2].mean(axis=0), 0) and np.allclose(x[:, :2].std(axis=0), 1)
    assert np.all(x[:, 2] == 0)
    c, s = coordinate_frame(coords, standardize=False)
    assert np.array_equal(to_frame(coords, c, s), coords)
    c, s = coordinate_frame(coords, standardize=False, spacing=(1, 1, 2.5))
    assert np.array_equal(to_frame(coords, c, s, (1, 1, 2.5)), coords * [1, 1, 2.5])
