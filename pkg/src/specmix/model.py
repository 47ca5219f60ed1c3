"""Fitted-model containers, labelings and the canonical model JSON format."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .basis import BasisSpec
from .errors import ValidationError
from .gating import GaussianGate, SoftmaxGate
from .volume import to_frame

VARIANTS = ("SgMFR", "SsMFR", "SgMVFR", "SsMVFR")
SIGMA2_FLOOR = 1e-6


@dataclass(frozen=True)
class RegressionComponent:
    beta: np.ndarray
    sigma2: float


@dataclass(frozen=True)
class CoefComponent:
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Everything needed to evaluate a fitted model on a volume.

    ``center``/``scale``/``spacing`` define the spatial frame the gate lives in
    (see :func:`specmix.volume.coordinate_frame`).
    """

    variant: str
    gate: GaussianGate | SoftmaxGate
    components: tuple
    spec: BasisSpec
    lam: float
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    spacing: np.ndarray | None = None
    diagonal: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}")
        if self.gate.K != len(self.components):
            raise ValidationError("gate and components disagree on K")
        object.__setattr__(self, "components", tuple(self.components))

    @property
    def K(self) -> int:
        return len(self.components)

    @property
    def twofold(self) -> bool:
        return self.variant.endswith("VFR")

    @property
    def gate_family(self) -> str:
        return "gaussian" if isinstance(self.gate, GaussianGate) else "softmax"

    def frame(self, coords: np.ndarray) -> np.ndarray:
        return to_frame(coords, self.center, self.scale, self.spacing)

    def permuted(self, perm) -> "ModelParams":
        perm = list(perm)
        return replace(self, gate=self.gate.permuted(perm),
                       components=tuple(self.components[p] for p in perm))

    def dropped(self, drop) -> "ModelParams":
        """Model without the components listed in ``drop``."""
        keep = [k for k in range(self.K) if k not in set(drop)]
        if not keep:
            raise ValidationError("cannot drop every component")
        if isinstance(self.gate, GaussianGate):
            w = self.gate.w[keep]
            gate = GaussianGate(w / w.sum(), self.gate.mu[keep], self.gate.R[keep])
        else:
            full = np.vstack([self.gate.alpha, np.zeros(self.gate.alpha.shape[1])])[keep]
            gate = SoftmaxGate(full[:-1] - full[-1], self.gate.bias)
        return replace(self, gate=gate, components=tuple(self.components[k] for k in keep))


@dataclass(frozen=True)
class FitReport:
    loglik_trace: list
    iterations: int
    converged: bool
    collapsed_clusters: list
    init_labels: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {"loglik_trace": [float(v) for v in self.loglik_trace],
                "iterations": int(self.iterations), "converged": bool(self.converged),
                "collapsed_clusters": [int(k) for k in self.collapsed_clusters]}


@dataclass(frozen=True, eq=False)
class Labeling:
    """Hard assignment with 1-based cluster ids ``1..n_clusters``."""

    labels: np.ndarray
    n_clusters: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int)
        if labels.ndim != 1:
            raise ValidationError("labels must be a 1-D array")
        if labels.size and (labels.min() < 1 or labels.max() > self.n_clusters):
            raise ValidationError("labels must lie in 1..n_clusters")
        object.__setattr__(self, "labels", labels)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_clusters + 1)[1:]

    def centroids(self, features: np.ndarray) -> np.ndarray:
        """Per-cluster feature means (NaN rows for empty clusters)."""
        features = np.asarray(features, dtype=float)
        sums = np.zeros((self.n_clusters, features.shape[1]))
        np.add.at(sums, self.labels - 1, features)
        with np.errstate(invalid="ignore", divide="ignore"):
            return sums / self.sizes[:, None]


# -- canonical JSON -----------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, bool) or x is None:
        return json.dumps(x)
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if not math.isfinite(x):
            raise ValidationError("non-finite value cannot be serialized")
        s = f"{x:.17g}"
        if "e" not in s and "." not in s and "n" not in s:
            s += ".0"
        return s
    if isinstance(x, str):
        return json.dumps(x)
    if isinstance(x, np.ndarray):
        return _fmt(x.tolist())
    if isinstance(x, dict):
        items = sorted(x.items())
        return "{" + ",".join(f"{json.dumps(str(k))}:{_fmt(v)}" for k, v in items) + "}"
    if isinstance(x, (list, tuple)):
        return "[" + ",".join(_fmt(v) for v in x) + "]"
    raise TypeError(f"cannot serialize {type(x).__name__}")


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, no whitespace, floats at 17 significant
    digits (exact round trip for doubles)."""
    return _fmt(obj) + "\n"


def params_to_dict(params: ModelParams, loglik: float | None = None) -> dict:
    if params.twofold:
        comps = [{"m": c.mean.tolist(), "C": c.cov.tolist()} for c in params.components]
    else:
        comps = [{"beta": c.beta.tolist(), "sigma2": float(c.sigma2)} for c in params.components]
    d = {
        "variant": params.variant,
        "K": params.K,
        "lambda": float(params.lam),
        "basis": params.spec.to_dict(),
        "gate": params.gate.to_dict(),
        "components": comps,
        "frame": {"center": params.center.tolist(), "scale": params.scale.tolist(),
                  "spacing": None if params.spacing is None else list(params.spacing)},
        "diagonal": bool(params.diagonal),
    }
    if loglik is not None:
        d["loglik"] = float(loglik)
    return d


def params_from_dict(d: dict) -> ModelParams:
    try:
        g = d["gate"]
        if g["family"] == "gaussian":
            gate = GaussianGate(np.array(g["w"]), np.array(g["mu"]), np.array(g["R"]))
        elif g["family"] == "softmax":
            K = int(d["K"])
            alpha = np.array(g["alpha"], dtype=float).reshape(K - 1, 4 if g["bias"] else 3)
            gate = SoftmaxGate(alpha, bool(g["bias"]))
        else:
            raise ValidationError(f"unknown gate family {g['family']!r}")
        variant = d["variant"]
        if variant.endswith("VFR"):
            comps = [CoefComponent(np.array(c["m"], dtype=float), np.array(c["C"], dtype=float))
                     for c in d["components"]]
        else:
            comps = [RegressionComponent(np.array(c["beta"], dtype=float), float(c["sigma2"]))
                     for c in d["components"]]
        fr = d.get("frame", {})
        spacing = fr.get("spacing")
        return ModelParams(variant, gate, tuple(comps), BasisSpec.from_dict(d["basis"]),
                           float(d["lambda"]), np.array(fr.get("center", [0, 0, 0]), dtype=float),
                           np.array(fr.get("scale", [1, 1, 1]), dtype=float),
                           None if spacing is None else np.array(spacing, dtype=float),
                           bool(d.get("diagonal", False)))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed model JSON: {exc}") from None


def save_model(params: ModelParams, path, loglik: float | None = None) -> None:
    with open(path, "w") as fh:
        fh.write(canonical_json(params_to_dict(params, loglik)))


def load_model(path) -> tuple[ModelParams, float | None]:
    with open(path) as fh:
        d = json.load(fh)
    return params_from_dict(d), d.get("loglik")
