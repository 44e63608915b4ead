"""File formats: edge lists, parameter bundles, posteriors, and reports.

Every real number is serialized with 17 significant digits so that
write -> read round-trips are exact at double precision, and JSON manifests
use sorted keys and ``\\n`` newlines so identical runs produce byte-identical
files.

Directory layouts
-----------------
network dir:    edges.csv (``layer,i,j,weight``; upper triangle, nonzeros),
                network.json (n, m, family, dispersion, clipped means count)
truth dir:      Z.csv, Theta.csv, B.csv, manifest.json
spectral dir:   Z.csv, Theta.csv, B.csv, manifest.json (flags, permutations)
fit dir:        posteriors.csv (one row per fitted vertex), manifest.json
coverage dir:   replicates.csv, summary.json
credible dir:   ellipses.csv, samples.csv (optional), manifest.json
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from ._util import format_float
from .credible import CredibleSummary
from .families import EdgeFamily
from .generate import ModelParams, MultilayerNetwork
from .simulate import CoverageReport, ReplicateResult
from .spectral import SpectralEstimate
from .vi import FitResults, VariationalPosterior


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


def _open_csv(path: Path):
    f = path.open("w", newline="", encoding="utf-8")
    return f, csv.writer(f, lineterminator="\n")


def _write_matrix(path: Path, M: np.ndarray, columns: list[str]) -> None:
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    f, w = _open_csv(path)
    with f:
        w.writerow(columns)
        for row in M:
            w.writerow([format_float(v) for v in row])


def _read_matrix(path: Path) -> np.ndarray:
    with path.open("r", newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if len(rows) <= 1:
        return np.zeros((0, 0))
    return np.array([[float(v) for v in row] for row in rows[1:]])


def _num_or_none(x):
    x = float(x)
    return x if math.isfinite(x) else None


def _family_to_json(fam: EdgeFamily) -> dict:
    if fam.dispersion is None:
        disp = None
    else:
        disp = np.atleast_1d(np.asarray(fam.dispersion, dtype=np.float64)).tolist()
    return {
        "kind": fam.kind,
        "interval": [_num_or_none(fam.interval[0]), _num_or_none(fam.interval[1])],
        "dispersion": disp,
    }


def _family_from_json(obj: dict) -> EdgeFamily:
    lo, hi = obj["interval"]
    interval = (float(lo), math.inf if hi is None else float(hi))
    disp = obj.get("dispersion")
    if disp is not None:
        disp = np.asarray(disp, dtype=np.float64)
        if disp.size == 1:
            disp = float(disp[0])
    return EdgeFamily(kind=obj["kind"], interval=interval, dispersion=disp)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

def save_network(network: MultilayerNetwork, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    m, n = network.m, network.n
    f, w = _open_csv(out / "edges.csv")
    with f:
        w.writerow(["layer", "i", "j", "weight"])
        for t in range(m):
            At = network.layers[t]
            iu, ju = np.triu_indices(n)
            vals = At[iu, ju]
            keep = vals != 0.0
            for i, j, v in zip(iu[keep], ju[keep], vals[keep]):
                w.writerow([t, int(i), int(j), format_float(v)])
    _write_json(out / "network.json", {
        "n": n, "m": m, "family": _family_to_json(network.family),
        "clipped_means": int(network.clipped_means),
    })


def load_network(in_dir: str | Path) -> MultilayerNetwork:
    src = Path(in_dir)
    meta = _read_json(src / "network.json")
    n, m = int(meta["n"]), int(meta["m"])
    layers = np.zeros((m, n, n))
    with (src / "edges.csv").open("r", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        next(reader)
        for row in reader:
            t, i, j = int(row[0]), int(row[1]), int(row[2])
            v = float(row[3])
            layers[t, i, j] = v
            layers[t, j, i] = v
    return MultilayerNetwork(
        layers=layers, family=_family_from_json(meta["family"]),
        clipped_means=int(meta.get("clipped_means", 0)),
    )


# ---------------------------------------------------------------------------
# parameter bundles (ground truth and spectral estimates share the layout)
# ---------------------------------------------------------------------------

def _save_zb_bundle(out: Path, Z, Theta, B) -> None:
    d = Z.shape[1]
    m = Theta.shape[1]
    _write_matrix(out / "Z.csv", Z, [f"community_{k}" for k in range(d)])
    _write_matrix(out / "Theta.csv", Theta, [f"layer_{t}" for t in range(m)])
    rows = []
    for t in range(m):
        for a in range(d):
            rows.append(np.concatenate([[t, a], B[t, a]]))
    f, w = _open_csv(out / "B.csv")
    with f:
        w.writerow(["layer", "row"] + [f"community_{k}" for k in range(d)])
        for row in rows:
            w.writerow([str(int(row[0])), str(int(row[1]))]
                       + [format_float(v) for v in row[2:]])


def _load_zb_bundle(src: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    Z = _read_matrix(src / "Z.csv")
    Theta = _read_matrix(src / "Theta.csv")
    raw = _read_matrix(src / "B.csv")
    d = Z.shape[1]
    m = Theta.shape[1]
    B = np.zeros((m, d, d))
    for row in raw:
        B[int(row[0]), int(row[1])] = row[2:]
    return Z, Theta, B


def save_params(params: ModelParams, out_dir: str | Path,
                extra: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _save_zb_bundle(out, params.Z, params.Theta, params.B)
    pure = int(np.sum(params.Z.max(axis=1) >= 1.0 - 1e-12))
    manifest = {
        "n": params.n, "m": params.m, "d": params.d,
        "family": _family_to_json(params.family), "n_pure": pure,
    }
    if extra:
        manifest.update(extra)
    _write_json(out / "manifest.json", manifest)


def load_params(in_dir: str | Path) -> ModelParams:
    src = Path(in_dir)
    meta = _read_json(src / "manifest.json")
    Z, Theta, B = _load_zb_bundle(src)
    return ModelParams(Z=Z, Theta=Theta, B=B, family=_family_from_json(meta["family"]))


def save_spectral(est: SpectralEstimate, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _save_zb_bundle(out, est.Z, est.Theta, est.B)
    _write_json(out / "manifest.json", {
        "n": est.n, "m": est.m, "d": est.d,
        "family": _family_to_json(est.family),
        "interval": [_num_or_none(est.interval[0]), _num_or_none(est.interval[1])],
        "perms": [list(p) for p in est.perms],
        "label_perm": list(est.label_perm),
        "flags": list(est.flags),
    })


def load_spectral(in_dir: str | Path) -> SpectralEstimate:
    src = Path(in_dir)
    meta = _read_json(src / "manifest.json")
    Z, Theta, B = _load_zb_bundle(src)
    lo, hi = meta["interval"]
    return SpectralEstimate(
        Z=Z, Theta=Theta, B=B, family=_family_from_json(meta["family"]),
        interval=(float(lo), math.inf if hi is None else float(hi)),
        perms=[tuple(p) for p in meta["perms"]],
        label_perm=tuple(meta["label_perm"]),
        flags=list(meta["flags"]), layers=None,
    )


# ---------------------------------------------------------------------------
# posterior bundles
# ---------------------------------------------------------------------------

def _posterior_columns(d: int, m: int) -> list[str]:
    k = d - 1
    cols = ["vertex", "converged", "n_iter", "final_objective",
            "ema_objective", "clip_fraction"]
    cols += [f"mu1_{a}" for a in range(k)]
    cols += [f"mu2_{t}" for t in range(m)]
    cols += [f"L_{a}_{b}" for a in range(k) for b in range(a + 1)]
    cols += [f"M_{t}_{a}" for t in range(m) for a in range(k)]
    cols += [f"sigma_{t}" for t in range(m)]
    return cols


def save_fit(fit: FitResults, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    post0 = next((p for p in fit.posteriors if p is not None), None)
    if post0 is None:
        raise ValueError("cannot save a fit with no successful vertices")
    d, m = post0.d, post0.m
    k = d - 1
    tri = np.tril_indices(k)
    f, w = _open_csv(out / "posteriors.csv")
    with f:
        w.writerow(_posterior_columns(d, m))
        for post in fit.posteriors:
            if post is None:
                continue
            nums = np.concatenate([
                [post.final_objective, post.ema_objective, post.clip_fraction],
                post.mu1, post.mu2, post.L[tri], post.M.reshape(-1), post.sigma,
            ])
            w.writerow([post.vertex, int(post.converged), post.n_iter]
                       + [format_float(v) for v in nums])
    _write_json(out / "manifest.json", {
        "n": fit.n, "m": m, "d": d,
        "structure": fit.structure,
        "interval": [_num_or_none(fit.interval[0]), _num_or_none(fit.interval[1])],
        "seed": fit.seed,
        "errors": {str(i): msg for i, msg in sorted(fit.errors.items())},
        "vertex_flags": {
            str(p.vertex): list(p.flags)
            for p in fit.posteriors if p is not None and p.flags
        },
    })


def load_fit(in_dir: str | Path) -> FitResults:
    src = Path(in_dir)
    meta = _read_json(src / "manifest.json")
    n, m, d = int(meta["n"]), int(meta["m"]), int(meta["d"])
    k = d - 1
    tri = np.tril_indices(k)
    lo, hi = meta["interval"]
    interval = (float(lo), math.inf if hi is None else float(hi))
    vertex_flags = {int(i): list(fl) for i, fl in meta.get("vertex_flags", {}).items()}
    posteriors: list[VariationalPosterior | None] = [None] * n
    with (src / "posteriors.csv").open("r", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        next(reader)
        for row in reader:
            i = int(row[0])
            nums = np.array([float(v) for v in row[3:]])
            off = 3
            mu1 = nums[off:off + k]; off += k
            mu2 = nums[off:off + m]; off += m
            L = np.zeros((k, k))
            L[tri] = nums[off:off + k * (k + 1) // 2]; off += k * (k + 1) // 2
            M = nums[off:off + m * k].reshape(m, k); off += m * k
            sigma = nums[off:off + m]
            posteriors[i] = VariationalPosterior(
                vertex=i, mu1=mu1, mu2=mu2, L=L, M=M, sigma=sigma,
                n_vertices=n, structure=meta["structure"],
                converged=bool(int(row[1])), n_iter=int(row[2]),
                final_objective=nums[0], ema_objective=nums[1],
                clip_fraction=nums[2], flags=vertex_flags.get(i, []),
            )
    errors = {int(i): msg for i, msg in meta.get("errors", {}).items()}
    return FitResults(
        posteriors=posteriors, errors=errors, structure=meta["structure"],
        interval=interval, seed=int(meta["seed"]),
    )


# ---------------------------------------------------------------------------
# dispersion, coverage reports, credible regions
# ---------------------------------------------------------------------------

def save_dispersion(rhos: np.ndarray, flags: list[str], out_path: str | Path) -> None:
    path = Path(out_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    boundary = {int(fl.split("layer")[-1]) for fl in flags if "boundary" in fl}
    f, w = _open_csv(path)
    with f:
        w.writerow(["layer", "dispersion", "at_boundary"])
        for t, rho in enumerate(np.atleast_1d(rhos)):
            w.writerow([t, format_float(rho), int(t in boundary)])


def load_dispersion(path: str | Path) -> np.ndarray:
    raw = _read_matrix(Path(path))
    return raw[:, 1]


def save_coverage(report: CoverageReport, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    f, w = _open_csv(out / "replicates.csv")
    with f:
        # wall-clock timings stay out of the files so reruns are byte-identical
        w.writerow(["index", "seed", "coverage", "n_mixed",
                    "err_vi", "err_spectral"])
        for r in report.replicates:
            w.writerow([r.index, r.seed, format_float(r.coverage), r.n_mixed,
                        format_float(r.err_vi), format_float(r.err_spectral)])
    _write_json(out / "summary.json", {
        "which": report.which, "n": report.n, "m": report.m, "d": report.d,
        "reps": report.reps, "alpha": report.alpha,
        "structure": report.structure, "seed": report.seed,
        "n_completed": report.n_completed,
        "n_failed": len(report.failures),
        "failures": {str(i): msg for i, msg in sorted(report.failures.items())},
        "mean_coverage": report.mean_coverage,
        "median_err_vi": report.median_err_vi,
        "median_err_spectral": report.median_err_spectral,
    })


def load_coverage(in_dir: str | Path) -> CoverageReport:
    src = Path(in_dir)
    meta = _read_json(src / "summary.json")
    report = CoverageReport(
        which=int(meta["which"]), n=int(meta["n"]), m=int(meta["m"]),
        d=int(meta["d"]), reps=int(meta["reps"]), alpha=float(meta["alpha"]),
        structure=meta["structure"], seed=int(meta["seed"]),
        failures={int(i): msg for i, msg in meta.get("failures", {}).items()},
    )
    with (src / "replicates.csv").open("r", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        next(reader)
        for row in reader:
            report.replicates.append(ReplicateResult(
                index=int(row[0]), seed=int(row[1]), coverage=float(row[2]),
                n_mixed=int(row[3]), err_vi=float(row[4]),
                err_spectral=float(row[5]),
            ))
    return report


def save_credible(summaries: list[CredibleSummary], out_dir: str | Path,
                  seed: int = 0) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not summaries:
        raise ValueError("no credible summaries to save")
    d = summaries[0].d
    k = d - 1
    f, w = _open_csv(out / "ellipses.csv")
    with f:
        w.writerow(
            ["vertex", "alpha", "radius2"]
            + [f"z_hat_{c}" for c in range(d)]
            + [f"center_{a}" for a in range(k)]
            + [f"cov_{a}_{b}" for a in range(k) for b in range(k)]
        )
        for s in summaries:
            nums = np.concatenate([[s.alpha, s.radius2], s.z_hat, s.center,
                                   s.cov_x.reshape(-1)])
            w.writerow([s.vertex] + [format_float(v) for v in nums])
    n_samples = 0
    if any(s.samples is not None for s in summaries):
        f, w = _open_csv(out / "samples.csv")
        with f:
            w.writerow(["vertex", "draw"] + [f"z_{c}" for c in range(d)])
            for s in summaries:
                if s.samples is None:
                    continue
                n_samples = max(n_samples, s.samples.shape[0])
                for r, z in enumerate(s.samples):
                    w.writerow([s.vertex, r] + [format_float(v) for v in z])
    _write_json(out / "manifest.json", {
        "d": d, "alpha": summaries[0].alpha, "radius2": summaries[0].radius2,
        "n_vertices": len(summaries), "n_samples": n_samples, "seed": seed,
    })
