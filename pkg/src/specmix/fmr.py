"""EM for spatially gated mixtures of functional regressions (SgMFR, SsMFR).

Each voxel's curve ``y_i`` is modelled as

    f(y_i | v_i) = sum_k pi_k(v_i) N_m(y_i; B beta_k, sigma2_k I)

with Gaussian or softmax spatial gates ``pi_k``. For Gaussian gates the EM
maximizes the joint likelihood of curves and coordinates; for softmax gates the
conditional likelihood above. The two-fold variants reuse the loop in
:func:`run_em` (see :mod:`specmix.twofold`).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy.special import logsumexp
from threadpoolctl import threadpool_limits

from .basis import BSPLINE3, BasisSpec, DesignMatrix, build_design
from .errors import NumericalError, ValidationError
from .gating import (GaussianGate, SoftmaxGate, collapsed_components,
                     update_gaussian_gate, update_softmax_gate)
from .model import (SIGMA2_FLOOR, FitReport, Labeling, ModelParams, RegressionComponent)
from .parallel import map_rows, sum_rows
from .volume import SpectralVolume

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class FitConfig:
    """Options shared by all EM fitters.

    ``gate`` is ``"gaussian"`` or ``"softmax"``; ``lam`` shrinks the spatial
    covariance update; ``seed=None`` gives the deterministic lattice
    initialization, an integer gives random k-means centers.
    """

    K: int = 40
    spec: BasisSpec = BSPLINE3
    gate: str = "gaussian"
    lam: float = 0.075
    max_iter: int = 500
    tol: float = 1e-6
    seed: int | None = None
    standardize: bool = True
    spacing: tuple | None = None
    drop_collapsed: bool = False
    softmax_bias: bool = True
    diagonal: bool = False
    threads: int | None = None

    def validate(self, n: int) -> None:
        if self.K < 1:
            raise ValidationError("K must be >= 1")
        if self.K > n:
            raise ValidationError(f"K={self.K} exceeds the {n} available voxels")
        if self.gate not in ("gaussian", "softmax"):
            raise ValidationError(f"unknown gate family {self.gate!r}")
        if not 0.0 < self.lam <= 1.0:
            raise ValidationError("lambda must lie in (0, 1]")
        if self.max_iter < 0:
            raise ValidationError("max_iter must be >= 0")
        if self.tol <= 0:
            raise ValidationError("tol must be > 0")


def variant_name(gate: str, twofold: bool) -> str:
    return ("Sg" if gate == "gaussian" else "Ss") + ("MVFR" if twofold else "MFR")


# -- densities ----------------------------------------------------------------

def _gate_terms(gate, x: np.ndarray) -> np.ndarray:
    if isinstance(gate, GaussianGate):
        return gate.log_joint(x)
    return gate.log_weights(x)


def regression_log_terms(params: ModelParams, x: np.ndarray, curves: np.ndarray,
                         design: DesignMatrix, threads: int | None = None) -> np.ndarray:
    """(n, K) matrix of ``log gate_k(v_i) + log N_m(y_i; B beta_k, sigma2_k I)``."""
    means = np.array([design.values @ c.beta for c in params.components])
    s2 = np.array([c.sigma2 for c in params.components])
    m = curves.shape[1]
    const = -0.5 * m * (LOG_2PI + np.log(s2))

    def chunk(sl):
        d2 = ((curves[sl, None, :] - means[None]) ** 2).sum(axis=2)
        return _gate_terms(params.gate, x[sl]) + const - 0.5 * d2 / s2

    return map_rows(chunk, curves.shape[0], threads)


def responsibilities(terms: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize log terms; returns ``(tau, row log-normalizers)``."""
    lse = logsumexp(terms, axis=1)
    bad = ~np.isfinite(lse)
    with np.errstate(invalid="ignore"):
        tau = np.exp(terms - lse[:, None])
    if bad.any():
        warnings.warn(f"{int(bad.sum())} voxel(s) with no finite component density; "
                      "using uniform responsibilities", RuntimeWarning, stacklevel=2)
        tau[bad] = 1.0 / terms.shape[1]
    return tau, lse


def model_log_terms(vol: SpectralVolume, params: ModelParams,
                    threads: int | None = None) -> np.ndarray:
    """(n, K) log terms of any variant evaluated on ``vol``."""
    x = params.frame(vol.coords)
    design = build_design(vol.energies, params.spec)
    if params.twofold:
        from .twofold import coef_log_terms
        return coef_log_terms(params, x, design.solve(vol.curves), threads)
    return regression_log_terms(params, x, vol.curves, design, threads)


def log_likelihood(vol: SpectralVolume, params: ModelParams, threads: int | None = None) -> float:
    """Log-likelihood of ``vol`` under ``params`` (any variant)."""
    val = float(logsumexp(model_log_terms(vol, params, threads), axis=1).sum())
    if not np.isfinite(val):
        raise NumericalError("non-finite log-likelihood; parameters corrupted")
    return val


def e_step(vol: SpectralVolume, params: ModelParams, threads: int | None = None) -> np.ndarray:
    """Posterior component memberships tau (n, K)."""
    return responsibilities(model_log_terms(vol, params, threads))[0]


# -- M-step -------------------------------------------------------------------

def _m_step_regression(curves: np.ndarray, tau: np.ndarray, design: DesignMatrix,
                       previous=None, threads: int | None = None,
                       collapse_tol: float = 1e-8) -> list[RegressionComponent]:
    n, m = curves.shape
    mass = tau.sum(axis=0)
    wsum = sum_rows(lambda sl: tau[sl].T @ curves[sl], n, threads)
    dead = mass < collapse_tol * n
    ybar = wsum / np.where(dead, 1.0, mass)[:, None]
    betas = design.solve(ybar)
    fitted = betas @ design.values.T

    def chunk(sl):
        d2 = ((curves[sl, None, :] - fitted[None]) ** 2).sum(axis=2)
        return (tau[sl] * d2).sum(axis=0)

    rss = sum_rows(chunk, n, threads)
    comps = []
    for k in range(tau.shape[1]):
        if dead[k]:
            if previous is not None:
                comps.append(previous[k])
            else:
                comps.append(RegressionComponent(design.solve(curves.mean(axis=0)), 1.0))
            continue
        s2 = max(rss[k] / (m * mass[k]), SIGMA2_FLOOR)
        comps.append(RegressionComponent(betas[k], float(s2)))
    return comps


def m_step_regression(vol: SpectralVolume, tau: np.ndarray, spec: BasisSpec | DesignMatrix,
                      previous=None) -> list[RegressionComponent]:
    """Closed-form regression updates: weighted least squares for ``beta_k`` and
    the responsibility-weighted residual variance for ``sigma2_k``."""
    design = spec if isinstance(spec, DesignMatrix) else build_design(vol.energies, spec)
    tau = np.asarray(tau, dtype=float)
    if tau.shape[0] != vol.n:
        raise ValidationError("tau rows must match voxels")
    return _m_step_regression(vol.curves, tau, design, previous)


def update_gate(gate, x: np.ndarray, tau: np.ndarray, lam: float):
    if isinstance(gate, GaussianGate):
        return update_gaussian_gate(x, tau, lam, previous=gate)
    return update_softmax_gate(x, tau, gate)


# -- EM driver ----------------------------------------------------------------

def run_em(params: ModelParams, terms_fn: Callable[[ModelParams], np.ndarray],
           mstep_fn: Callable[[np.ndarray, ModelParams], ModelParams],
           tol: float, max_iter: int, drop_collapsed: bool = False,
           on_iteration: Callable[[int, float], None] | None = None):
    """Alternate E- and M-steps until the relative log-likelihood change drops
    below ``tol`` or ``max_iter`` M-steps have run.

    Returns ``(params, report)``; the last trace entry is the log-likelihood of
    the returned parameters.
    """
    trace: list[float] = []
    collapsed: list[int] = []
    index = list(range(params.K))
    converged = False
    iterations = 0
    while True:
        terms = terms_fn(params)
        tau, lse = responsibilities(terms)
        ll = float(lse.sum())
        if not np.isfinite(ll):
            raise NumericalError(f"log-likelihood diverged after {iterations} iterations; "
                                 f"trace={trace}")
        trace.append(ll)
        if on_iteration is not None:
            on_iteration(iterations, ll)
        if len(trace) > 1 and abs(ll - trace[-2]) <= tol * abs(trace[-2]):
            converged = True
            break
        if iterations >= max_iter:
            break
        dead = collapsed_components(tau)
        for k in dead:
            if index[k] not in collapsed:
                collapsed.append(index[k])
        if dead and drop_collapsed and len(dead) < params.K:
            params = params.dropped(dead)
            index = [index[k] for k in range(len(index)) if k not in dead]
            keep = [k for k in range(tau.shape[1]) if k not in dead]
            tau = tau[:, keep]
            tau /= tau.sum(axis=1, keepdims=True)
        params = mstep_fn(tau, params)
        iterations += 1
    return params, FitReport(trace, iterations, converged, sorted(collapsed))


def fit(vol: SpectralVolume, config: FitConfig = FitConfig()):
    """Fit SgMFR (Gaussian gates) or SsMFR (softmax gates) by EM.

    Returns ``(ModelParams, FitReport)``.
    """
    from .initialization import voronoi_init

    config.validate(vol.n)
    with threadpool_limits(limits=1, user_api="blas"):
        init_labels, params = voronoi_init(vol, config.K, config.seed, config, twofold=False)
        x = params.frame(vol.coords)
        design = build_design(vol.energies, config.spec)
        curves = vol.curves

        def terms_fn(p):
            return regression_log_terms(p, x, curves, design, config.threads)

        def mstep_fn(tau, p):
            gate = update_gate(p.gate, x, tau, config.lam)
            comps = _m_step_regression(curves, tau, design, p.components, config.threads)
            return replace(p, gate=gate, components=tuple(comps))

        params, report = run_em(params, terms_fn, mstep_fn, config.tol, config.max_iter,
                                config.drop_collapsed)
    log.info("%s K=%d: %d iterations, converged=%s, loglik=%.6f", params.variant, params.K,
             report.iterations, report.converged, report.loglik_trace[-1])
    return params, replace(report, init_labels=init_labels.labels)


def label(vol: SpectralVolume, params: ModelParams, threads: int | None = None) -> Labeling:
    """Bayes allocation: each voxel goes to its most probable component (ties
    to the smallest index)."""
    return labels_from_tau(e_step(vol, params, threads))


def labels_from_tau(tau: np.ndarray) -> Labeling:
    return Labeling(np.argmax(tau, axis=1) + 1, tau.shape[1])


def initial_params(x: np.ndarray, curves: np.ndarray, labels: np.ndarray, K: int,
                   config: FitConfig, design: DesignMatrix, center, scale) -> ModelParams:
    """Parameters from hard-assignment M-steps on an initial partition."""
    tau = np.zeros((x.shape[0], K))
    tau[np.arange(x.shape[0]), labels - 1] = 1.0
    gate = initial_gate(x, tau, config)
    comps = _m_step_regression(curves, tau, design)
    return ModelParams(variant_name(config.gate, False), gate, tuple(comps), config.spec,
                       config.lam, np.asarray(center), np.asarray(scale),
                       None if config.spacing is None else np.asarray(config.spacing, float))


def initial_gate(x: np.ndarray, tau: np.ndarray, config: FitConfig):
    if config.gate == "gaussian":
        return update_gaussian_gate(x, tau, config.lam)
    # a hard partition is separable and drives Newton to infinity; soften it
    K = tau.shape[1]
    soft = 0.9 * tau + 0.1 / K
    return update_softmax_gate(x, soft, SoftmaxGate.zeros(K, config.softmax_bias))
