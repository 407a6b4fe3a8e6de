"""Monte Carlo experiment runner: paired simulation, metrics, persistence.

Each run simulates one ground-truth trajectory and feeds the identical
observation stream to every filter (paired design), so filter comparisons
difference out the simulation noise. Metrics per (filter, t): RMSE of the
posterior-mean estimate, percentage of runs out of track, and mean
effective particle size.
"""
from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .filters import run_filter
from .ldss import simulate
from .rng import run_key


def rmse(estimates: np.ndarray, truths: np.ndarray) -> np.ndarray:
    """Per-step root mean (over runs) squared estimation error.

    estimates, truths: (n_runs, T, M). Returns (T,).
    """
    estimates = np.asarray(estimates, dtype=float)
    truths = np.asarray(truths, dtype=float)
    if estimates.shape != truths.shape:
        raise ValueError("estimates and truths must align")
    sq = np.sum((estimates - truths) ** 2, axis=-1)
    return np.sqrt(sq.mean(axis=0))


def out_of_track(estimates: np.ndarray, truths: np.ndarray, threshold: float) -> np.ndarray:
    """Percentage of runs whose squared error exceeds the threshold, per step."""
    estimates = np.asarray(estimates, dtype=float)
    truths = np.asarray(truths, dtype=float)
    if estimates.shape != truths.shape:
        raise ValueError("estimates and truths must align")
    sq = np.sum((estimates - truths) ** 2, axis=-1)
    return 100.0 * (sq > threshold).mean(axis=0)


@dataclass
class RunOutput:
    run: int
    truth: np.ndarray                  # (T, M)
    obs_hash: str
    means: dict[str, np.ndarray]       # filter name -> (T, M)
    n_eff: dict[str, np.ndarray]
    mode_iterations: dict[str, np.ndarray]
    pd_repairs: dict[str, int]
    fallbacks: dict[str, int]
    degenerate: dict[str, int]


def _hash_observations(observations) -> str:
    digest = hashlib.sha256()
    for obs in observations:
        digest.update(np.ascontiguousarray(obs.y).tobytes())
    return digest.hexdigest()


def execute_run(config: ExperimentConfig, run: int) -> RunOutput:
    """Simulate one trajectory and run every configured filter on it."""
    key = run_key(config.seed, run)
    traj = simulate(config.sim_model, config.t_steps, seed=key)
    out = RunOutput(
        run=run,
        truth=traj.c[1:],
        obs_hash=_hash_observations(traj.observations),
        means={}, n_eff={}, mode_iterations={}, pd_repairs={}, fallbacks={}, degenerate={},
    )
    for spec in config.filters:
        result = run_filter(spec, config.model, traj.observations, config.n_particles, key)
        out.means[spec.name] = result.means
        out.n_eff[spec.name] = result.n_eff
        out.mode_iterations[spec.name] = np.array([r.mode_iterations for r in result.records])
        out.pd_repairs[spec.name] = sum(r.pd_repairs for r in result.records)
        out.fallbacks[spec.name] = sum(r.fallbacks for r in result.records)
        out.degenerate[spec.name] = sum(r.degenerate for r in result.records)
    return out


def collect_runs(config: ExperimentConfig, jobs: int = 1) -> list[RunOutput]:
    runs = range(config.n_runs)
    if jobs <= 1:
        return [execute_run(config, r) for r in runs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(execute_run, [config] * config.n_runs, runs))


@dataclass
class ExperimentResult:
    metrics_rows: list[dict]
    summary: dict
    manifest: dict


def aggregate(config: ExperimentConfig, outputs: list[RunOutput]) -> ExperimentResult:
    outputs = sorted(outputs, key=lambda o: o.run)
    truths = np.stack([o.truth for o in outputs])
    rows = []
    summary = {}
    for spec in config.filters:
        name = spec.name
        est = np.stack([o.means[name] for o in outputs])
        err = rmse(est, truths)
        oot = out_of_track(est, truths, config.in_track_threshold)
        neff = np.stack([o.n_eff[name] for o in outputs]).mean(axis=0)
        iters = np.stack([o.mode_iterations[name] for o in outputs]).mean(axis=0)
        pd_rep = sum(o.pd_repairs[name] for o in outputs)
        fall = sum(o.fallbacks[name] for o in outputs)
        degen = sum(o.degenerate[name] for o in outputs)
        for t in range(config.t_steps):
            rows.append(
                {
                    "filter": name,
                    "t": t + 1,
                    "rmse": err[t],
                    "out_of_track_pct": oot[t],
                    "n_eff_mean": neff[t],
                    "mode_iterations_mean": iters[t],
                    "pd_repairs": pd_rep,
                    "fallbacks": fall,
                    "degenerate_runs": degen,
                }
            )
        summary[name] = {
            "rmse_time_avg": float(err.mean()),
            "rmse_final": float(err[-1]),
            "out_of_track_time_avg": float(oot.mean()),
            "out_of_track_final": float(oot[-1]),
            "n_eff_mean": float(neff.mean()),
            "fallbacks": int(fall),
            "degenerate_runs": int(degen),
        }
    manifest = {
        "version": __version__,
        "seed": config.seed,
        "n_runs": config.n_runs,
        "n_particles": config.n_particles,
        "t_steps": config.t_steps,
        "in_track_threshold": config.in_track_threshold,
        "filters": [
            {"name": f.name, "kind": f.kind, "K": f.partition.k, "M_rr": f.partition.m_rr}
            for f in config.filters
        ],
        "basis_adjustment": config.basis_adjustment,
        "bound_records": [vars(r) for r in config.bound_records],
        "observation_stream_hashes": {str(o.run): o.obs_hash for o in outputs},
    }
    return ExperimentResult(metrics_rows=rows, summary=summary, manifest=manifest)


METRICS_FIELDS = [
    "filter", "t", "rmse", "out_of_track_pct", "n_eff_mean",
    "mode_iterations_mean", "pd_repairs", "fallbacks", "degenerate_runs",
]


def write_outputs(result: ExperimentResult, out_dir, fmt: str = "csv") -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    if fmt == "csv":
        metrics_path = out_dir / "metrics.csv"
        with metrics_path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
            writer.writeheader()
            writer.writerows(result.metrics_rows)
    elif fmt == "json":
        metrics_path = out_dir / "metrics.json"
        metrics_path.write_text(json.dumps(result.metrics_rows, indent=2))
    else:
        raise ValueError(f"unknown output format {fmt!r}")
    paths["metrics"] = metrics_path
    summary_path = out_dir / "summary.json"
    summary_path.write_text(json.dumps(result.summary, indent=2, sort_keys=True))
    paths["summary"] = summary_path
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(result.manifest, indent=2, sort_keys=True))
    paths["manifest"] = manifest_path
    return paths


def run_experiment(config: ExperimentConfig, out_dir=None, jobs: int = 1, fmt: str = "csv"):
    """Full pipeline: simulate, filter, aggregate, optionally persist."""
    outputs = collect_runs(config, jobs=jobs)
    result = aggregate(config, outputs)
    if out_dir is not None:
        write_outputs(result, out_dir, fmt=fmt)
    return result
