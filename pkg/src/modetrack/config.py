"""Experiment configuration: JSON schema, validation, and construction.

Top-level keys:

  model:
    M            state dimension
    a            AR coefficient, 0 < a <= 1
    delta_nu     length-M noise variances
    B            {"kind": "identity"}
                 | {"kind": "rows", "rows": [[...], ...]}          (row-major)
                 | {"kind": "householder-first-row", "first_row": [...]}
    C0, v0       initial state (v0 optional, defaults to zeros)
    observation:
      n_sensors  J
      alpha      (M, J) failure probabilities
      sigma_obs2 length-M working noise variances
      h          length-M list of "linear" | "squared"
      failure    {"kind": "uniform", "lo": .., "hi": ..}
                 | {"kind": "gauss-indep", "mean": .., "var": ..}
                 | {"kind": "gauss-dep", "slope": .., "var": ..}
      sim_alpha  optional (M, J) probabilities used only to simulate truth

  filters: list of {"kind": .., "K": .., "M_rr": .., "name": ..}
           M_rr may be "auto" with "eps"/"eps2" to pick the tracked size
           from the tail bound.
  N, T, n_runs, seed, in_track_threshold

Explicitly given bases are projected to the nearest orthonormal matrix;
the adjustment size is recorded and reported in the run manifest.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bounds import MODE_OFFLINE, choose_mrr
from .filters import (
    FILTER_KINDS,
    PF_DOUCET,
    PF_EIS,
    PF_EIS_MT,
    PF_MT,
    PF_ORIG_KDIM,
    PF_ORIGINAL,
    FilterSpec,
)
from .ldss import LdssModel, StatePartition, householder_basis, nearest_orthonormal
from .sensors import (
    GaussDepFailure,
    GaussIndepFailure,
    SensorSpec,
    UniformFailure,
)


class ConfigError(ValueError):
    """Invalid configuration; the message carries the offending field path."""


def _need(mapping: dict, key: str, path: str):
    if key not in mapping:
        raise ConfigError(f"{path}.{key}: required field is missing")
    return mapping[key]


def _build_failure(block: dict, path: str):
    kind = _need(block, "kind", path)
    try:
        if kind == "uniform":
            return UniformFailure(lo=float(_need(block, "lo", path)), hi=float(_need(block, "hi", path)))
        if kind == "gauss-indep":
            return GaussIndepFailure(mu=float(_need(block, "mean", path)), var=float(_need(block, "var", path)))
        if kind == "gauss-dep":
            return GaussDepFailure(slope=float(_need(block, "slope", path)), var=float(_need(block, "var", path)))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    raise ConfigError(f"{path}.kind: unknown failure kind {kind!r}")


def build_sensor_spec(block: dict, m: int, path: str = "model.observation") -> SensorSpec:
    alpha = np.asarray(_need(block, "alpha", path), dtype=float)
    if alpha.ndim == 1:
        alpha = alpha[:, None]
    n_sensors = int(block.get("n_sensors", alpha.shape[1]))
    if alpha.shape != (m, n_sensors):
        raise ConfigError(f"{path}.alpha: expected shape ({m}, {n_sensors}), got {alpha.shape}")
    try:
        return SensorSpec(
            alpha=alpha,
            sigma_obs2=np.asarray(_need(block, "sigma_obs2", path), dtype=float),
            h_kind=tuple(_need(block, "h", path)),
            fail=_build_failure(_need(block, "failure", path), f"{path}.failure"),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _build_basis(spec, m: int, path: str):
    """Returns (B, adjustment) where adjustment is the orthonormalization size."""
    if spec is None or spec == "identity" or (isinstance(spec, dict) and spec.get("kind") == "identity"):
        return np.eye(m), 0.0
    if not isinstance(spec, dict):
        raise ConfigError(f"{path}: basis spec must be a mapping or 'identity'")
    kind = _need(spec, "kind", path)
    if kind == "rows":
        rows = np.asarray(_need(spec, "rows", path), dtype=float)
        if rows.shape != (m, m):
            raise ConfigError(f"{path}.rows: expected {m} rows of length {m}")
        b = nearest_orthonormal(rows)
        return b, float(np.abs(b - rows).max())
    if kind == "householder-first-row":
        first = np.asarray(_need(spec, "first_row", path), dtype=float)
        if first.shape != (m,):
            raise ConfigError(f"{path}.first_row: expected length {m}")
        return householder_basis(first), 0.0
    raise ConfigError(f"{path}.kind: unknown basis kind {kind!r}")


@dataclass
class ModelBundle:
    model: LdssModel
    sim_model: LdssModel
    basis_adjustment: float


def build_model(block: dict, path: str = "model") -> ModelBundle:
    m = int(_need(block, "M", path))
    basis, adjustment = _build_basis(block.get("B"), m, f"{path}.B")
    obs_block = block.get("observation")
    obs = build_sensor_spec(obs_block, m) if obs_block else None
    try:
        model = LdssModel(
            m=m,
            a=float(_need(block, "a", path)),
            b_mat=basis,
            delta_nu=np.asarray(_need(block, "delta_nu", path), dtype=float),
            obs=obs,
            c0=np.asarray(block["C0"], dtype=float) if "C0" in block else None,
            v0=np.asarray(block["v0"], dtype=float) if "v0" in block else None,
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    sim_model = model
    if obs_block and "sim_alpha" in obs_block and obs is not None:
        sim_alpha = np.asarray(obs_block["sim_alpha"], dtype=float)
        if sim_alpha.ndim == 1:
            sim_alpha = sim_alpha[:, None]
        if sim_alpha.shape != obs.alpha.shape:
            raise ConfigError(f"{path}.observation.sim_alpha: shape must match alpha")
        sim_obs = SensorSpec(
            alpha=sim_alpha, sigma_obs2=obs.sigma_obs2, h_kind=obs.h_kind, fail=obs.fail
        )
        sim_model = LdssModel(
            m=m, a=model.a, b_mat=basis, delta_nu=model.delta_nu,
            obs=sim_obs, c0=model.c0, v0=model.v0,
        )
    return ModelBundle(model=model, sim_model=sim_model, basis_adjustment=adjustment)


@dataclass
class BoundRecord:
    """Which tail bound authorized a filter's tracked dimension."""

    filter_name: str
    bound: str
    eps: float
    eps2: float
    m_rr: int


def build_filter_spec(block: dict, model: LdssModel, path: str) -> tuple[FilterSpec, BoundRecord | None]:
    kind = _need(block, "kind", path)
    if kind not in FILTER_KINDS:
        raise ConfigError(f"{path}.kind: unknown filter kind {kind!r}")
    m = model.m
    defaults = {
        PF_ORIGINAL: (m, 0),
        PF_ORIG_KDIM: (int(block.get("K", 1)), 0),
        PF_DOUCET: (0, 0),
        PF_EIS: (int(block.get("K", 1)), 0),
        PF_EIS_MT: (int(block.get("K", 1)), None),
        PF_MT: (int(block.get("K", 1)), None),
    }
    k, m_rr = defaults[kind]
    record = None
    raw_mrr = block.get("M_rr", m_rr)
    if raw_mrr == "auto":
        eps = float(block.get("eps", 1.0))
        eps2 = float(block.get("eps2", 0.05))
        resid = np.asarray(model.delta_nu, dtype=float)[k:]
        chosen, _idx = choose_mrr(resid, eps=eps, eps2=eps2, mode=MODE_OFFLINE)
        raw_mrr = chosen
        record = BoundRecord(
            filter_name=block.get("name", kind),
            bound="max-norm tail bound (offline)",
            eps=eps,
            eps2=eps2,
            m_rr=chosen,
        )
    if raw_mrr is None:
        raw_mrr = m - k if kind in (PF_MT, PF_EIS_MT) else 0
    try:
        part = StatePartition.from_sizes(m, k, int(raw_mrr))
        spec = FilterSpec(kind=kind, partition=part, name=block.get("name", ""))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return spec, record


@dataclass
class ExperimentConfig:
    model: LdssModel
    sim_model: LdssModel
    filters: list[FilterSpec]
    n_particles: int
    t_steps: int
    n_runs: int
    seed: int
    in_track_threshold: float
    basis_adjustment: float = 0.0
    bound_records: list[BoundRecord] = field(default_factory=list)
    raw: dict = field(default_factory=dict)


def load_experiment(source) -> ExperimentConfig:
    """Parse and validate an experiment config from a path, str, or dict."""
    if isinstance(source, dict):
        raw = source
    else:
        text = Path(source).read_text() if not str(source).lstrip().startswith("{") else str(source)
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON ({exc})") from exc
    bundle = build_model(_need(raw, "model", "config"))
    if bundle.model.obs is None:
        raise ConfigError("model.observation: required for experiments")
    filters = []
    records = []
    for i, block in enumerate(_need(raw, "filters", "config")):
        spec, record = build_filter_spec(block, bundle.model, f"filters[{i}]")
        filters.append(spec)
        if record is not None:
            records.append(record)
    names = [f.name for f in filters]
    if len(set(names)) != len(names):
        raise ConfigError("filters: names must be unique (set 'name' to disambiguate)")
    n_runs = int(raw.get("n_runs", 1))
    threshold = float(raw.get("in_track_threshold", 1.0))
    if n_runs < 1:
        raise ConfigError("n_runs: must be >= 1")
    if threshold <= 0:
        raise ConfigError("in_track_threshold: must be positive")
    try:
        return ExperimentConfig(
            model=bundle.model,
            sim_model=bundle.sim_model,
            filters=filters,
            n_particles=int(_need(raw, "N", "config")),
            t_steps=int(_need(raw, "T", "config")),
            n_runs=n_runs,
            seed=int(raw.get("seed", 0)),
            in_track_threshold=threshold,
            basis_adjustment=bundle.basis_adjustment,
            bound_records=records,
            raw=raw,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config: {exc}") from exc
