"""Two-fold variants (SgMVFR, SsMVFR).

Stage one reduces every curve to its OLS basis coefficients; stage two fits a
spatially gated multivariate Gaussian mixture to those coefficient vectors.
"""

from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np
from threadpoolctl import threadpool_limits

from .basis import build_design, vectorize_volume
from .fmr import FitConfig, _gate_terms, run_em, update_gate
from .gating import data_floor, gaussian_logpdf, spd_repair, weighted_moments
from .model import CoefComponent, ModelParams
from .parallel import map_rows
from .volume import SpectralVolume

log = logging.getLogger(__name__)


def coef_log_terms(params: ModelParams, x: np.ndarray, coefs: np.ndarray,
                   threads: int | None = None) -> np.ndarray:
    """(n, K) matrix of ``log gate_k(v_i) + log N_d(beta_i; m_k, C_k)``."""
    comps = params.components

    def chunk(sl):
        out = _gate_terms(params.gate, x[sl])
        for k, c in enumerate(comps):
            out[:, k] += gaussian_logpdf(coefs[sl], c.mean, c.cov)
        return out

    return map_rows(chunk, coefs.shape[0], threads)


def m_step_coef(coefs: np.ndarray, tau: np.ndarray, diagonal: bool = False,
                previous=None, collapse_tol: float = 1e-8,
                floor: float | None = None) -> list[CoefComponent]:
    """Weighted mean and covariance of the coefficient vectors per component,
    eigenvalues clipped at ``floor`` (default :func:`specmix.gating.data_floor`)."""
    coefs = np.asarray(coefs, dtype=float)
    floor = data_floor(coefs) if floor is None else floor
    tau = np.asarray(tau, dtype=float)
    mass, means, covs = weighted_moments(coefs, tau)
    if diagonal:
        covs = covs * np.eye(coefs.shape[1])[None]
    out = []
    for k in range(tau.shape[1]):
        if mass[k] < collapse_tol * coefs.shape[0]:
            if previous is not None:
                out.append(previous[k])
            else:
                c = np.atleast_2d(np.cov(coefs.T, bias=True))
                out.append(CoefComponent(coefs.mean(axis=0), spd_repair(c, floor)))
            continue
        out.append(CoefComponent(means[k], spd_repair(covs[k], floor)))
    return out


def fit_twofold(vol: SpectralVolume, config: FitConfig = FitConfig()):
    """Fit SgMVFR / SsMVFR. Returns ``(ModelParams, FitReport)``."""
    from .initialization import voronoi_init

    config.validate(vol.n)
    with threadpool_limits(limits=1, user_api="blas"):
        init_labels, params = voronoi_init(vol, config.K, config.seed, config, twofold=True)
        x = params.frame(vol.coords)
        coefs = vectorize_volume(vol, build_design(vol.energies, config.spec))

        def terms_fn(p):
            return coef_log_terms(p, x, coefs, config.threads)

        def mstep_fn(tau, p):
            gate = update_gate(p.gate, x, tau, config.lam)
            comps = m_step_coef(coefs, tau, config.diagonal, p.components)
            return replace(p, gate=gate, components=tuple(comps))

        params, report = run_em(params, terms_fn, mstep_fn, config.tol, config.max_iter,
                                config.drop_collapsed)
    log.info("%s K=%d: %d iterations, converged=%s", params.variant, params.K,
             report.iterations, report.converged)
    return params, replace(report, init_labels=init_labels.labels)
