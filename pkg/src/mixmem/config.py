"""Flat key=value run configuration shared by the CLI commands.

A run is fully captured by (input files, configuration, seed).  The config
file format is one ``key = value`` pair per line; ``#`` starts a comment and
blank lines are ignored.  Unknown keys are an error, so typos fail loudly.
Explicit CLI flags override file values.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .spectral import SpectralConfig
from .vi import VIConfig


def _parse_bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("true", "1", "yes"):
        return True
    if s in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _parse_optional_float(v: str):
    s = v.strip().lower()
    return None if s in ("none", "null", "") else float(v)


def _parse_dispersion(v: str):
    s = v.strip().lower()
    if s in ("none", "null", ""):
        return None
    parts = [float(p) for p in v.split(",")]
    return parts[0] if len(parts) == 1 else np.array(parts)


@dataclass(frozen=True)
class RunConfig:
    """All tunables for the estimation pipeline, with library defaults."""

    # model
    d: int = 3
    family: str = "poisson"
    dispersion: object = None          # scalar or comma list for negbinomial
    interval_lo: float | None = None   # optional working-interval override
    interval_hi: float | None = None
    # variational fit
    alpha0: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 8
    max_iter: int = 5000
    tol_rel: float = 1e-6
    window: int = 200
    ema_decay: float = 0.99
    divergence_factor: float = 10.0
    cn_factor: float = 10.0
    structure: str = "structured"
    chunk: int = 512
    param_floor: float = 1e-10
    # spectral
    kmeans_restarts: int = 20
    kmeans_seed: int = 0
    cluster_factor: int = 10
    cond_max: float = 1e8
    max_hunt_retries: int = 50
    b_radicand_floor: float = 1e-12
    reselect_positive: bool = True
    tau: float | None = None
    label_align: bool = True
    # run
    seed: int = 0
    threads: int = 0      # 0 = use available parallelism
    alpha: float = 0.05

    def vi_config(self) -> VIConfig:
        return VIConfig(
            alpha0=self.alpha0, beta1=self.beta1, beta2=self.beta2,
            adam_eps=self.adam_eps, batch=self.batch, max_iter=self.max_iter,
            tol_rel=self.tol_rel, window=self.window, ema_decay=self.ema_decay,
            divergence_factor=self.divergence_factor, cn_factor=self.cn_factor,
            structure=self.structure, chunk=self.chunk,
            param_floor=self.param_floor,
        )

    def spectral_config(self) -> SpectralConfig:
        return SpectralConfig(
            kmeans_restarts=self.kmeans_restarts, kmeans_seed=self.kmeans_seed,
            cluster_factor=self.cluster_factor, cond_max=self.cond_max,
            max_hunt_retries=self.max_hunt_retries,
            b_radicand_floor=self.b_radicand_floor,
            reselect_positive=self.reselect_positive, tau=self.tau,
            label_align=self.label_align,
        )

    def interval(self) -> tuple[float, float] | None:
        if self.interval_lo is None or self.interval_hi is None:
            return None
        return (self.interval_lo, self.interval_hi)


_PARSERS = {
    "d": int, "family": str.strip, "dispersion": _parse_dispersion,
    "interval_lo": _parse_optional_float, "interval_hi": _parse_optional_float,
    "alpha0": float, "beta1": float, "beta2": float, "adam_eps": float,
    "batch": int, "max_iter": int, "tol_rel": float, "window": int,
    "ema_decay": float, "divergence_factor": float, "cn_factor": float,
    "structure": str.strip, "chunk": int, "param_floor": float,
    "kmeans_restarts": int, "kmeans_seed": int, "cluster_factor": int,
    "cond_max": float, "max_hunt_retries": int, "b_radicand_floor": float,
    "reselect_positive": _parse_bool,
    "tau": _parse_optional_float, "label_align": _parse_bool,
    "seed": int, "threads": int, "alpha": float,
}

assert set(_PARSERS) == {f.name for f in fields(RunConfig)}


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _PARSERS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        updates[key] = _PARSERS[key](value)
    return replace(cfg, **updates)


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), base)


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply non-None override values (already typed) on top of a config."""
    updates = {k: v for k, v in overrides.items() if v is not None}
    bad = set(updates) - {f.name for f in fields(RunConfig)}
    if bad:
        raise ValueError(f"unknown config overrides: {sorted(bad)}")
    return replace(cfg, **updates)
