"""Command-line interface: ``specmix {synth,fit,label,eval,bench}``.

Exit codes: 0 on success, 2 on invalid input, 3 on numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import parallel
from .errors import NumericalError, SpecmixError, ValidationError
from .fmr import e_step, labels_from_tau, log_likelihood
from .model import Labeling, canonical_json, load_model, params_to_dict
from .pipeline import METHODS, alternating_search, run_method
from .plotting import plot_loglik_trace, plot_sweep, render_label_slices
from .volume import (DEFAULT_AIR_THRESHOLD, load_volume, mask_air, read_truth_csv,
                     save_volume, synth_phantom, write_truth_csv)

log = logging.getLogger("specmix")

METRIC_COLUMNS = ["dice", "spat_db", "spec_db", "spat_dbt", "spec_dbt", "runtime_s", "ari"]


# -- argument types -----------------------------------------------------------

def _positive_int(s: str) -> int:
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer {s!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(s: str) -> int:
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _lambda(s: str) -> float:
    v = float(s)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1], got {v}")
    return v


def _positive_float(s: str) -> float:
    v = float(s)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {v}")
    return v


def _triple(s: str) -> tuple[int, int, int]:
    parts = s.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated integers")
    return tuple(_positive_int(p) for p in parts)


def _energies(s: str) -> np.ndarray:
    """``lo:hi:step`` or a comma-separated list."""
    if ":" in s:
        lo, hi, step = (float(p) for p in s.split(":"))
        return np.arange(lo, hi + step * 1e-9, step)
    return np.array([float(p) for p in s.split(",")])


def _list(conv):
    def parse(s: str):
        return [conv(p) for p in s.split(",") if p]
    return parse


# -- helpers ------------------------------------------------------------------

def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def write_labels_csv(labels, path) -> None:
    labels = getattr(labels, "labels", labels)
    lines = ["row,label"] + [f"{i},{int(v)}" for i, v in enumerate(labels)]
    _write_text(Path(path), "\n".join(lines) + "\n")


def read_labels_csv(path) -> Labeling:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"row", "label"} <= set(reader.fieldnames):
            raise ValidationError(f"{path}: expected columns row,label")
        rows = sorted((int(r["row"]), int(r["label"])) for r in reader)
    arr = np.array(rows, dtype=int).reshape(-1, 2)
    if not np.array_equal(arr[:, 0], np.arange(len(arr))):
        raise ValidationError(f"{path}: rows must cover 0..n-1")
    return Labeling(arr[:, 1], int(arr[:, 1].max()) if len(arr) else 0)


def _load(args) -> object:
    vol = load_volume(args.volume)
    if getattr(args, "mask_air", None) is not None:
        vol = mask_air(vol, args.mask_air)
    return vol


# -- commands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    ph = synth_phantom(args.dims, args.energies, args.k_true, args.noise, args.seed,
                       mimic_tumor=args.mimic_tumor)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vol_path = out / ("volume.csv" if args.format == "csv" else "volume.svol")
    save_volume(ph.volume, vol_path, args.format)
    write_truth_csv(ph, out / "labels.csv")
    print(f"wrote {vol_path} and {out / 'labels.csv'} (n={ph.volume.n})")
    return 0


def cmd_fit(args) -> int:
    vol = _load(args)
    out = Path(args.out)
    t0 = time.perf_counter()
    res = run_method(vol, args.method, K=args.k, lam=args.lam, degree=args.basis_degree,
                     knots=args.knots, K0=args.k0, spatial_weight=args.spatial_weight,
                     tol=args.tol, max_iter=args.max_iter, seed=args.seed,
                     threads=args.threads)
    runtime = time.perf_counter() - t0
    if res.params is not None:
        model = params_to_dict(res.params, res.report.loglik_trace[-1])
    else:
        # baselines carry no reusable parameters; store their labeling
        model = {"variant": args.method, "K": int(res.labeling.n_clusters),
                 "labels": res.labeling.labels.tolist(), "n": int(vol.n)}
    _write_text(out / "model.json", canonical_json(model))
    report = {"method": args.method}
    if res.report is not None:
        report.update(res.report.to_dict())
    if res.sse_trace is not None:
        report["sse_trace"] = [float(v) for v in res.sse_trace]
    _write_text(out / "report.json", canonical_json(report))
    _write_text(out / "timing.json", json.dumps({"runtime_s": runtime}) + "\n")
    write_labels_csv(res.labeling, out / "labels.csv")
    if args.plot:
        trace = res.report.loglik_trace if res.report is not None else res.sse_trace
        plot_loglik_trace(trace, out / "trace.png", title=args.method)
    print(f"{args.method}: K={res.labeling.n_clusters} runtime={runtime:.2f}s -> {out}")
    return 0


def cmd_label(args) -> int:
    vol = _load(args)
    with open(args.model) as fh:
        raw = json.load(fh)
    if "labels" in raw:
        if int(raw.get("n", -1)) != vol.n:
            raise ValidationError("baseline model was fitted on a different volume")
        lab = Labeling(np.array(raw["labels"]), int(raw["K"]))
    else:
        params, _ = load_model(args.model)
        lab = labels_from_tau(e_step(vol, params))
    write_labels_csv(lab, args.out)
    if args.render:
        tumor = read_truth_csv(args.truth)[1] if args.truth else None
        paths = render_label_slices(lab, vol, args.render, truth=tumor)
        print(f"rendered {len(paths)} slice(s) to {args.render}")
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import adjusted_rand, evaluate

    vol = _load(args)
    lab = read_labels_csv(args.labels)
    if lab.labels.size != vol.n:
        raise ValidationError("labels and volume disagree on the number of voxels")
    true_labels, tumor = read_truth_csv(args.truth)
    if true_labels.size != vol.n:
        raise ValidationError("truth and volume disagree on the number of voxels")
    if not tumor.any():
        raise ValidationError("truth file marks no tumor voxels")
    res = evaluate(lab, vol.coords, vol.curves, tumor)
    runtime = float("nan")
    if args.timing:
        with open(args.timing) as fh:
            runtime = float(json.load(fh)["runtime_s"])
    res["runtime_s"] = runtime
    res["ari"] = adjusted_rand(true_labels, lab)
    line = ",".join("" if np.isnan(res[c]) else f"{res[c]:.17g}" for c in METRIC_COLUMNS)
    _write_text(Path(args.out), ",".join(METRIC_COLUMNS) + "\n" + line + "\n")
    print(", ".join(f"{c}={res[c]:.4g}" for c in METRIC_COLUMNS))
    return 0


def cmd_bench(args) -> int:
    if len(args.volume) != len(args.truth):
        raise ValidationError("give one --truth per --volume")
    vols = [load_volume(p) for p in args.volume]
    truths = [read_truth_csv(p) for p in args.truth]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(vi, rnd, k, lam, s):
        log.info("volume %d round %d K=%d lambda=%g dice=%.4f", vi, rnd, k, lam, s["dice"])

    rows, rec = alternating_search(vols, truths, args.method, args.k_values, args.lambda_values,
                                   rounds=args.rounds, progress=progress, tol=args.tol,
                                   max_iter=args.max_iter, threads=args.threads)
    cols = ["volume", "round", "varied", "K", "lambda", "dice", "spat_db", "spec_db", "ari",
            "loglik"]
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([f"{r[c]:.17g}" if isinstance(r[c], float) else r[c] for c in cols])
    _write_text(out / "recommendation.json", canonical_json(rec))
    for vi in range(len(vols)):
        plot_sweep([r for r in rows if r["volume"] == vi], out / f"bench_volume{vi}.png")
    print(f"recommended K={rec['K']} lambda={rec['lambda']:.4g} -> {out}")
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="specmix", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="worker threads (default: $SPECMIX_THREADS or CPU count)")
    # also accepted after the subcommand name
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_positive_int, default=argparse.SUPPRESS,
                        help="worker threads")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic phantom")
    s.add_argument("--dims", type=_triple, default=(30, 30, 4))
    s.add_argument("--energies", type=_energies, default=None, help="lo:hi:step or list (keV)")
    s.add_argument("--k-true", type=_positive_int, default=4)
    s.add_argument("--noise", type=float, default=10.0, help="noise sd in HU")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mimic-tumor", action="store_true")
    s.add_argument("--format", choices=["svol", "csv"], default="svol")
    s.add_argument("--out", default=".")
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("fit", help="cluster a volume", parents=[common])
    f.add_argument("volume")
    f.add_argument("--method", choices=METHODS, default="sgmfr-bspl")
    f.add_argument("--k", type=_positive_int, default=40)
    f.add_argument("--lambda", dest="lam", type=_lambda, default=0.075)
    f.add_argument("--basis-degree", type=_nonneg_int, default=3)
    f.add_argument("--knots", type=_nonneg_int, default=4)
    f.add_argument("--tol", type=_positive_float, default=1e-6)
    f.add_argument("--max-iter", type=_nonneg_int, default=500)
    f.add_argument("--seed", type=int, default=None,
                   help="random k-means restart seed (default: lattice init)")
    f.add_argument("--k0", type=_positive_int, default=150, help="initial GMM components")
    f.add_argument("--spatial-weight", type=float, default=1.0, help="k-means spatial weight")
    f.add_argument("--mask-air", type=float, nargs="?", const=DEFAULT_AIR_THRESHOLD,
                   default=None, metavar="HU")
    f.add_argument("--plot", action="store_true", help="also write trace.png")
    f.add_argument("--out", default=".")
    f.set_defaults(func=cmd_fit)

    lb = sub.add_parser("label", help="label a volume with a fitted model", parents=[common])
    lb.add_argument("model")
    lb.add_argument("volume")
    lb.add_argument("--out", default="labels.csv")
    lb.add_argument("--render", metavar="DIR", help="write per-slice PNG label maps")
    lb.add_argument("--truth", help="labels.csv with is_tumor column for contour overlay")
    lb.add_argument("--mask-air", type=float, nargs="?", const=DEFAULT_AIR_THRESHOLD,
                    default=None, metavar="HU")
    lb.set_defaults(func=cmd_label)

    e = sub.add_parser("eval", help="score a labeling against ground truth")
    e.add_argument("--volume", required=True)
    e.add_argument("--labels", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--timing", help="timing.json written by fit")
    e.add_argument("--out", default="metrics.csv")
    e.set_defaults(func=cmd_eval, mask_air=None)

    b = sub.add_parser("bench", help="alternating K / lambda sweep", parents=[common])
    b.add_argument("--volume", action="append", required=True)
    b.add_argument("--truth", action="append", required=True)
    b.add_argument("--method", choices=METHODS[:5], default="sgmfr-bspl")
    b.add_argument("--k-values", type=_list(_positive_int), default=[10, 20, 30, 40, 50])
    b.add_argument("--lambda-values", type=_list(_lambda),
                   default=[0.025, 0.05, 0.075, 0.15, 0.3])
    b.add_argument("--rounds", type=_positive_int, default=3)
    b.add_argument("--tol", type=_positive_float, default=1e-6)
    b.add_argument("--max-iter", type=_nonneg_int, default=500)
    b.add_argument("--out", default="bench")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    parallel.set_threads(args.threads)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"specmix: error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"specmix: numerical failure: {exc}", file=sys.stderr)
        return 3
    except SpecmixError as exc:
        print(f"specmix: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"specmix: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
