"""Command-line front end.

Subcommands: simulate (emit a truth/observation dataset), run (execute an
experiment config), delta-star (certify an instance), bounds (tabulate the
tail bounds), compare (diff two metrics files). Exit codes: 0 success,
2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, build_model, load_experiment, _need
from .bounds import (
    NORM_EUCLIDEAN,
    BoundQuery,
    chernoff_tail_bound,
    choose_mrr,
    trace_tail_bound,
    trace_threshold,
    vp_tail_bound,
)
from .harness import run_experiment, write_outputs
from .ldss import StatePartition, simulate
from .modefind import CondPosteriorSpec, NumericalError
from .rng import run_key
from .sensors import observation_rows
from .unimodality import CertificateError, GridSpec, classify_regions, delta_star


def _cmd_simulate(args) -> int:
    raw = json.loads(Path(args.config).read_text())
    bundle = build_model(_need(raw, "model", "config"))
    if bundle.sim_model.obs is None:
        raise ConfigError("model.observation: required to simulate readings")
    t_steps = int(raw.get("T", args.steps))
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    traj = simulate(bundle.sim_model, t_steps, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "truth.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "p", "C"])
        for t in range(traj.c.shape[0]):
            for p in range(traj.c.shape[1]):
                writer.writerow([t, p, traj.c[t, p]])
    with (out / "observations.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "p", "j", "Y"])
        for t, obs in enumerate(traj.observations, start=1):
            writer.writerows(observation_rows(t, obs))
    print(f"wrote {t_steps} steps to {out}/truth.csv and {out}/observations.csv")
    return 0


def _cmd_run(args) -> int:
    config = load_experiment(args.config)
    if args.seed is not None:
        config.seed = args.seed
    result = run_experiment(config, out_dir=args.out, jobs=args.jobs, fmt=args.format)
    for name, stats in result.summary.items():
        print(
            f"{name}: rmse(avg)={stats['rmse_time_avg']:.4f} "
            f"out-of-track(avg)={stats['out_of_track_time_avg']:.1f}% "
            f"n_eff={stats['n_eff_mean']:.1f}"
        )
    print(f"outputs in {args.out}")
    return 0


def _instance_from_file(path):
    raw = json.loads(Path(path).read_text())
    bundle = build_model(_need(raw, "model", "config"))
    model = bundle.model
    if model.obs is None:
        raise ConfigError("model.observation: required for certification")
    k = int(raw.get("K", 1))
    part = StatePartition.from_sizes(model.m, k)
    c_prev = np.asarray(_need(raw, "C_prev", "instance"), dtype=float)
    v_prev = np.asarray(_need(raw, "v_prev", "instance"), dtype=float)
    v_ts = np.atleast_1d(np.asarray(_need(raw, "v_ts", "instance"), dtype=float))
    y = np.asarray(_need(raw, "Y", "instance"), dtype=float)
    s_idx = np.array(part.s_idx, dtype=int)
    r_idx = np.array(part.r_idx, dtype=int)
    delta_r = raw.get("delta_r_placeholder")
    spec = CondPosteriorSpec(
        obs=model.obs,
        y=y,
        c_tilde=c_prev + model.b_mat[:, s_idx] @ v_ts,
        f_r=model.a * v_prev[r_idx],
        delta_r=np.asarray(delta_r, dtype=float) if delta_r else np.ones(r_idx.size),
        b_r=model.b_mat[:, r_idx],
    )
    grid = None
    if "grid" in raw:
        g = raw["grid"]
        half = float(_need(g, "half_width", "instance.grid"))
        n = int(g.get("n", 201))
        grid = GridSpec(
            lo=spec.f_r - half, hi=spec.f_r + half, n_points=np.full(spec.m_r, n)
        )
    eps0 = raw.get("epsilon0")
    delta_r_query = raw.get("delta_r")
    return spec, grid, (float(eps0) if eps0 is not None else None), delta_r_query, model


def _cmd_delta_star(args) -> int:
    spec, grid, eps0, delta_r_query, model = _instance_from_file(args.config)
    if grid is None:
        from .unimodality import default_grid

        grid = default_grid(spec, float(np.max(model.delta_nu)))
    cert = delta_star(
        spec,
        grid=grid,
        epsilon0=eps0,
        delta_r=np.asarray(delta_r_query, dtype=float) if delta_r_query else None,
    )
    if not cert.condition2_ok:
        print(f"certificate failed: {cert.reason}")
        return 3
    print(f"epsilon0 = {cert.epsilon0:.6g}")
    print(f"locally convex box: {np.round(cert.rlc_lo, 4)} .. {np.round(cert.rlc_hi, 4)}")
    for region, value in sorted(cert.region_minima.items()):
        print(f"region {region}: min max_p gamma_p = {value:.6g}")
    print(f"delta_star = {cert.delta_star:.6g}")
    for eps_val, star in cert.sensitivity:
        print(f"  (sensitivity) epsilon0={eps_val:.6g} -> delta_star={star:.6g}")
    if cert.certified is not None:
        verdict = "certified" if cert.certified else "NOT certified"
        print(f"given delta_r -> {verdict}")
    if args.dump_grid:
        _dump_grid(spec, grid, cert.epsilon0, args.dump_grid)
        print(f"grid fields written to {args.dump_grid}")
    return 0


def _dump_grid(spec, grid, eps0, path):
    a_mask, z_mask = classify_regions(spec, grid, eps0)
    axes = grid.axes()
    mesh = np.meshgrid(*axes, indexing="ij")
    v = np.stack(mesh, axis=-1)
    from .sensors import energy_parts

    c = spec.c_tilde + v @ spec.b_r.T
    e_vals, _, _ = energy_parts(spec.obs, spec.y, c, order=0)
    grads = np.gradient(e_vals, *axes) if grid.dim > 1 else [np.gradient(e_vals, axes[0])]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        head = [f"v{d}" for d in range(grid.dim)]
        head += ["E"] + [f"gradE{d}" for d in range(grid.dim)]
        head += [f"A{d}" for d in range(grid.dim)] + [f"Z{d}" for d in range(grid.dim)]
        writer.writerow(head)
        flat_v = v.reshape(-1, grid.dim)
        flat_e = e_vals.reshape(-1)
        flat_g = np.stack([g.reshape(-1) for g in grads], axis=-1)
        flat_a = a_mask.reshape(-1, grid.dim)
        flat_z = z_mask.reshape(-1, grid.dim)
        for i in range(flat_v.shape[0]):
            writer.writerow(
                list(flat_v[i]) + [flat_e[i]] + list(flat_g[i])
                + list(flat_a[i].astype(int)) + list(flat_z[i].astype(int))
            )


def _cmd_bounds(args) -> int:
    raw = json.loads(Path(args.config).read_text())
    bundle = build_model(_need(raw, "model", "config"))
    model = bundle.model
    k = args.k
    resid = np.asarray(model.delta_nu, dtype=float)[k:]
    if resid.size == 0:
        raise ConfigError("bounds: no residual coordinates left after K")
    eps, eps2 = args.eps, args.eps2
    m_rr, chosen = choose_mrr(resid, eps=eps, eps2=eps2)
    rows = [
        ("max-norm tail bound", f"M_rr={resid.size}, delta_m={resid.max():.4g}, eps={eps}",
         vp_tail_bound(BoundQuery(eps=eps, m_rr=resid.size, delta_m=float(resid.max()), eps2=eps2))),
        ("euclidean Chernoff bound", f"M_rr={resid.size}, delta_m={resid.max():.4g}, eps={eps}",
         chernoff_tail_bound(BoundQuery(eps=eps, m_rr=resid.size, delta_m=float(resid.max()),
                                        eps2=eps2, norm=NORM_EUCLIDEAN))),
        ("trace threshold", f"eps1={eps}, eps2={eps2}, M={model.m}",
         trace_threshold(eps, eps2, model.m)),
        ("trace tail bound", f"trace={resid.sum():.4g}, eps1={eps}, M={model.m}",
         trace_tail_bound(float(resid.sum()), eps, model.m)),
    ]
    width = max(len(r[0]) for r in rows)
    for name, inputs, value in rows:
        print(f"{name:<{width}}  {value:.6g}   [{inputs}]")
    print(f"chosen M_rr = {m_rr} (coordinates {[k + c for c in chosen]} of delta_nu)")
    return 0


def _cmd_compare(args) -> int:
    def load(path):
        per_filter: dict[str, dict[str, list[float]]] = {}
        with Path(path).open() as fh:
            for row in csv.DictReader(fh):
                d = per_filter.setdefault(row["filter"], {"rmse": [], "oot": [], "neff": []})
                d["rmse"].append(float(row["rmse"]))
                d["oot"].append(float(row["out_of_track_pct"]))
                d["neff"].append(float(row["n_eff_mean"]))
        return {
            name: {k: float(np.mean(v)) for k, v in vals.items()}
            for name, vals in per_filter.items()
        }

    left = load(args.left)
    right = load(args.right)
    names = sorted(set(left) | set(right))
    print(f"{'filter':<16} {'rmse(L)':>9} {'rmse(R)':>9} {'oot%(L)':>8} {'oot%(R)':>8} {'neff(L)':>8} {'neff(R)':>8}")
    for name in names:
        lv = left.get(name)
        rv = right.get(name)
        fmt = lambda d, k: f"{d[k]:.4g}" if d else "-"
        print(
            f"{name:<16} {fmt(lv, 'rmse'):>9} {fmt(rv, 'rmse'):>9} "
            f"{fmt(lv, 'oot'):>8} {fmt(rv, 'oot'):>8} {fmt(lv, 'neff'):>8} {fmt(rv, 'neff'):>8}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modetrack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="emit a truth/observation dataset")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--steps", type=int, default=25)
    p_sim.add_argument("--out", default="simout")
    p_sim.set_defaults(func=_cmd_simulate)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--jobs", type=int, default=1)
    p_run.add_argument("--out", default="runout")
    p_run.add_argument("--format", choices=["csv", "json"], default="csv")
    p_run.set_defaults(func=_cmd_run)

    p_ds = sub.add_parser("delta-star", help="certify a conditional-posterior instance")
    p_ds.add_argument("--config", required=True)
    p_ds.add_argument("--dump-grid", default=None)
    p_ds.set_defaults(func=_cmd_delta_star)

    p_b = sub.add_parser("bounds", help="tabulate mode-tracking tail bounds")
    p_b.add_argument("--config", required=True)
    p_b.add_argument("--eps", type=float, default=1.0)
    p_b.add_argument("--eps2", type=float, default=0.05)
    p_b.add_argument("--k", type=int, default=1)
    p_b.set_defaults(func=_cmd_bounds)

    p_c = sub.add_parser("compare", help="tabulate two metrics files side by side")
    p_c.add_argument("left")
    p_c.add_argument("right")
    p_c.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, CertificateError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
