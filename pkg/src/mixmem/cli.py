"""Command-line interface for the estimation pipeline.

Commands: ``generate``, ``spectral``, ``dispersion``, ``fit``, ``coverage``,
``credible``.  Every command is a pure function of its input files, flags,
and seed: identical invocations produce byte-identical outputs, independent
of ``--threads``.  Exit codes: 0 success, 2 usage/input error, 3 partial
failure (some vertices or replicates failed; partial results were written).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import storage
from .config import RunConfig, _parse_dispersion, apply_overrides, load_config
from .credible import credible_region
from .families import BERNOULLI, DomainError
from .generate import GenerationError, experiment_params, sample_network
from .likelihood import CLIP_MARGIN, nb_profile_dispersion
from .simulate import coverage_experiment
from .spectral import AlignmentError, SpectralError, estimate, preliminary_means
from .vi import fit_all

_USAGE_ERRORS = (
    ValueError, FileNotFoundError, NotADirectoryError, IsADirectoryError,
    GenerationError, SpectralError, AlignmentError, DomainError, KeyError,
)


def _default_threads() -> int:
    return os.cpu_count() or 1


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for key in ("structure", "seed", "threads", "max_iter", "alpha", "d"):
        if hasattr(args, key):
            overrides[key] = getattr(args, key)
    return apply_overrides(cfg, overrides)


def _cmd_generate(args) -> int:
    params = experiment_params(
        args.experiment, args.n, args.m, args.d, seed=args.seed,
        **({"family_kind": args.family} if args.family else {}),
        **({"dispersion": _parse_dispersion(args.dispersion)} if args.dispersion else {}),
    )
    clip = params.family.kind == BERNOULLI
    network = sample_network(params, args.seed, clip_means=clip)
    storage.save_network(network, args.out)
    storage.save_params(params, os.path.join(args.out, "truth"),
                        extra={"which": args.experiment, "seed": args.seed})
    return 0


def _cmd_spectral(args) -> int:
    network = storage.load_network(args.input)
    cfg = _load_run_config(args)
    est = estimate(network, args.d, cfg.spectral_config())
    storage.save_spectral(est, args.out)
    return 0


def _cmd_dispersion(args) -> int:
    network = storage.load_network(args.input)
    est = storage.load_spectral(args.spectral)
    means = np.stack([preliminary_means(est, t) for t in range(network.m)])
    # frozen means are consumed like every other evaluated mean: clipped into
    # the working interval, which also keeps noisy preliminary values positive
    lo, hi = est.interval
    means = np.clip(means, lo + CLIP_MARGIN,
                    hi - CLIP_MARGIN if np.isfinite(hi) else None)
    rhos, flags = nb_profile_dispersion(network.layers, means)
    storage.save_dispersion(rhos, flags, args.out)
    return 0


def _cmd_fit(args) -> int:
    network = storage.load_network(args.input)
    est = storage.load_spectral(args.spectral)
    cfg = _load_run_config(args)
    threads = cfg.threads if cfg.threads else _default_threads()
    fit = fit_all(
        network, est, cfg.vi_config(), seed=cfg.seed, threads=threads,
        interval=cfg.interval(),
    )
    storage.save_fit(fit, args.out)
    if fit.errors:
        print(f"warning: {len(fit.errors)} vertex fit(s) failed; "
              f"see manifest.json", file=sys.stderr)
        return 3
    return 0


def _cmd_coverage(args) -> int:
    cfg = _load_run_config(args)
    threads = cfg.threads if cfg.threads else _default_threads()
    report = coverage_experiment(
        args.experiment, args.n, args.m, args.d, args.reps, alpha=cfg.alpha,
        structure=cfg.structure, seed=cfg.seed, vi_cfg=cfg.vi_config(),
        spectral_cfg=cfg.spectral_config(), threads=threads,
    )
    storage.save_coverage(report, args.out)
    if report.failures:
        print(f"warning: {len(report.failures)} replicate(s) failed",
              file=sys.stderr)
        return 3
    return 0


def _cmd_credible(args) -> int:
    if not 0.0 < args.alpha < 1.0:
        raise ValueError("--alpha must be in (0, 1)")
    fit = storage.load_fit(args.posteriors)
    summaries = [
        credible_region(p, args.alpha, n_samples=args.samples, seed=args.seed)
        for p in fit.posteriors if p is not None
    ]
    storage.save_credible(summaries, args.out, seed=args.seed)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixmem",
        description="Multilayer mixed-membership estimation and uncertainty.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample a synthetic experiment dataset")
    p.add_argument("--experiment", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--family", choices=("bernoulli", "poisson", "negbinomial"))
    p.add_argument("--dispersion", help="negbinomial dispersion (scalar or comma list)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("spectral", help="run the spectral pipeline on a dataset")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_spectral)

    p = sub.add_parser("dispersion", help="profile-likelihood dispersion per layer")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--spectral", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_dispersion)

    p = sub.add_parser("fit", help="fit per-vertex variational posteriors")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--spectral", required=True)
    p.add_argument("--config")
    p.add_argument("--structure", choices=("structured", "blockdiag"))
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("coverage", help="Monte-Carlo coverage/error experiment")
    p.add_argument("--experiment", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--reps", type=int, required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--structure", choices=("structured", "blockdiag"))
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_coverage)

    p = sub.add_parser("credible", help="per-vertex credible regions and samples")
    p.add_argument("--posteriors", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--samples", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_credible)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
