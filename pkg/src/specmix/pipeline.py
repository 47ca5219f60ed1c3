"""Named clustering methods behind one call, as used by the CLI and sweeps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .baselines import gmm_spectral, kmeans_joint
from .basis import BasisSpec
from .errors import ValidationError
from .fmr import FitConfig, fit, labels_from_tau, e_step
from .metrics import adjusted_rand, evaluate
from .model import FitReport, Labeling, ModelParams
from .twofold import fit_twofold

METHODS = ("sgmfr-bspl", "sgmfr-poly", "ssmfr-bspl", "sgmvfr-bspl", "ssmvfr-bspl",
           "gmm", "kmeans")


@dataclass
class MethodResult:
    method: str
    labeling: Labeling
    params: ModelParams | None = None
    report: FitReport | None = None
    sse_trace: list | None = None


def method_config(method: str, K: int, lam: float = 0.075, degree: int = 3, knots: int = 4,
                  **kw) -> FitConfig:
    if method not in METHODS[:5]:
        raise ValidationError(f"{method!r} is not a mixture-of-regressions method")
    family = "polynomial" if method.endswith("poly") else "bspline"
    spec = BasisSpec(family, degree, knots if family == "bspline" else 0)
    gate = "gaussian" if method.startswith("sg") else "softmax"
    return FitConfig(K=K, spec=spec, gate=gate, lam=lam, **kw)


def run_method(vol, method: str, K: int = 40, lam: float = 0.075, degree: int = 3,
               knots: int = 4, K0: int = 150, spatial_weight: float = 1.0,
               **kw) -> MethodResult:
    """Run one of :data:`METHODS` on ``vol``.

    ``K0`` applies to ``gmm`` and ``spatial_weight`` to ``kmeans``; other
    keyword arguments go to :class:`specmix.fmr.FitConfig`.
    """
    if method not in METHODS:
        raise ValidationError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    if method == "gmm":
        lab, rep = gmm_spectral(vol, K0, max_iter=kw.get("max_iter", 500), tol=kw.get("tol", 1e-6))
        return MethodResult(method, lab, report=rep)
    if method == "kmeans":
        lab, trace = kmeans_joint(vol, K, spatial_weight)
        return MethodResult(method, lab, sse_trace=trace)
    cfg = method_config(method, K, lam, degree, knots, **kw)
    fitter = fit_twofold if "mvfr" in method else fit
    params, report = fitter(vol, cfg)
    return MethodResult(method, labels_from_tau(e_step(vol, params, cfg.threads)), params, report)


def score(result: MethodResult, vol, truth_labels=None, tumor_mask=None) -> dict:
    out = {}
    if tumor_mask is not None:
        out.update(evaluate(result.labeling, vol.coords, vol.curves, tumor_mask))
    if truth_labels is not None:
        out["ari"] = adjusted_rand(truth_labels, result.labeling)
    return out


def alternating_search(vols, truths, method: str, k_values, lam_values, rounds: int = 3,
                       start=None, progress=None, **kw) -> tuple[list[dict], dict]:
    """Coordinate search over (K, lambda): vary lambda at fixed K, then K at
    fixed lambda, alternating for ``rounds`` rounds on each volume.

    Each setting is scored by the Dice of the selected tumor clusters (ties:
    lower spatial DB). Returns all evaluated rows and the recommendation, the
    mean of the per-volume optima.
    """
    k_values = sorted(int(k) for k in k_values)
    lam_values = sorted(float(v) for v in lam_values)
    rows = []
    best_k, best_lam = [], []
    for vi, (vol, (labels, tumor)) in enumerate(zip(vols, truths)):
        K = k_values[len(k_values) // 2] if start is None else start[0]
        lam = lam_values[len(lam_values) // 2] if start is None else start[1]
        cache = {}
        for rnd in range(1, rounds + 1):
            varied = "lambda" if rnd % 2 == 1 else "K"
            grid = [(K, v) for v in lam_values] if varied == "lambda" else [(k, lam) for k in k_values]
            scored = []
            for k, v in grid:
                if (k, v) not in cache:
                    res = run_method(vol, method, K=k, lam=v, **kw)
                    s = score(res, vol, labels, tumor)
                    ll = res.report.loglik_trace[-1] if res.report is not None else float("nan")
                    cache[(k, v)] = {**s, "loglik": ll}
                    if progress:
                        progress(vi, rnd, k, v, cache[(k, v)])
                s = cache[(k, v)]
                rows.append({"volume": vi, "round": rnd, "varied": varied, "K": k, "lambda": v,
                             "dice": s["dice"], "spat_db": s["spat_db"], "spec_db": s["spec_db"],
                             "ari": s.get("ari", float("nan")), "loglik": s["loglik"]})
                scored.append((-s["dice"], s["spat_db"], k, v))
            _, _, K, lam = min(scored)
        best_k.append(K)
        best_lam.append(lam)
    rec = {"K": int(round(float(np.mean(best_k)))), "lambda": float(np.mean(best_lam)),
           "per_volume": [{"K": k, "lambda": v} for k, v in zip(best_k, best_lam)]}
    return rows, rec
