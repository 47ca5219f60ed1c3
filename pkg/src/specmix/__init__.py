"""Spatially gated mixtures of functional regressions for clustering spectral volumes."""

from .basis import BasisSpec, DesignMatrix, build_design, bspline_basis, ols_fit, vectorize_volume
from .errors import NumericalError, SpecmixError, ValidationError
from .fmr import FitConfig, e_step, fit, label, log_likelihood, m_step_regression
from .gating import GaussianGate, SoftmaxGate, update_gaussian_gate, update_softmax_gate
from .initialization import voronoi_init
from .metrics import (adjusted_rand, davies_bouldin, davies_bouldin_tumor, dice, evaluate,
                      select_tumor_clusters)
from .model import FitReport, Labeling, ModelParams, load_model, save_model
from .twofold import fit_twofold, m_step_coef
from .volume import Phantom, SpectralVolume, load_volume, mask_air, save_volume, synth_phantom

__version__ = "0.1.0"
