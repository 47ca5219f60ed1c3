import numpy as np
import pytest

from specmix.baselines import gmm_spectral, joint_features, kmeans_joint
from specmix.errors import ValidationError
from specmix.metrics import adjusted_rand
from specmix.volume import DEFAULT_ENERGIES, SpectralVolume


def _two_populations(noise=1.0, seed=0):
    rng = np.random.default_rng(seed)
    mask = np.ones((10, 10, 1), bool)
    truth = np.repeat([1, 2], 50)
    rng.shuffle(truth)
    levels = np.array([0.0, 100.0])[truth - 1]
    curves = levels[:, None] + rng.normal(0, noise, size=(100, DEFAULT_ENERGIES.size))
    return SpectralVolume(DEFAULT_ENERGIES, curves, mask), truth


def test_gmm_two_constant_populations():
    vol, truth = _two_populations()
    lab, rep = gmm_spectral(vol, K0=2)
    assert adjusted_rand(truth, lab) == 1.0
    assert np.all(np.diff(rep.loglik_trace) >= -1e-8)


def test_gmm_prunes_to_present_labels():
    vol, _ = _two_populations(seed=1)
    lab, rep = gmm_spectral(vol, K0=20)
    assert lab.n_clusters == np.unique(lab.labels).size
    with pytest.raises(ValidationError):
        gmm_spectral(vol, K0=0)


def test_kmeans_recovers_spatial_blobs():
    # identical curves in two spatial halves: only coordinates separate them
    mask = np.ones((12, 6, 1), bool)
    rng = np.random.default_rng(2)
    curves = 50 + rng.normal(0, 1.0, size=(72, DEFAULT_ENERGIES.size))
    vol = SpectralVolume(DEFAULT_ENERGIES, curves, mask)
    truth = (vol.coords[:, 0] >= 6).astype(int) + 1
    lab, trace = kmeans_joint(vol, K=2, spatial_weight=20.0)
    assert adjusted_rand(truth, lab) == 1.0
    assert np.all(np.diff(trace) <= 1e-9)


def test_joint_features_scaling():
    vol, _ = _two_populations()
    f = joint_features(vol, 3.0)
    assert f.shape == (100, 3 + DEFAULT_ENERGIES.size)
    assert np.allclose(f[:, :2].std(axis=0), 3.0)
    with pytest.raises(ValidationError):
        kmeans_joint(vol, K=0)
