"""Particle filters with prior, Gaussian-proposal, and mode-tracked sampling.

Five filter kinds share one stepping core and differ in how the velocity
coordinates are drawn:

  * pf-original: every coordinate sampled from the state-transition prior.
  * pf-doucet: full-state Gaussian proposal built by Laplace approximation
    around the conditional-posterior mode (the K = 0 special case below).
  * pf-eis: multimodal coordinates sampled from the prior, residual block
    sampled from the Laplace proposal.
  * pf-eis-mt: as pf-eis, but the narrow trailing block is assigned its
    conditional mean instead of being sampled.
  * pf-mt: sampled block from the prior, tracked block set to the
    conditional-posterior mode.

pf-orig-kdim is the dimension-reduction baseline: prior sampling on the
sampled block with the rest frozen at the prior mean.

All draws go through counter-based streams keyed by (run key, step,
purpose), so outputs are reproducible and independent of scheduling.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg as sla

from . import rng as rngmod
from .ldss import LdssModel, StatePartition
from .modefind import NumericalError, batch_find_modes
from .sensors import Observation, SensorSpec, ol_loglik

PF_ORIGINAL = "pf-original"
PF_DOUCET = "pf-doucet"
PF_EIS = "pf-eis"
PF_EIS_MT = "pf-eis-mt"
PF_MT = "pf-mt"
PF_ORIG_KDIM = "pf-orig-kdim"

FILTER_KINDS = (PF_ORIGINAL, PF_DOUCET, PF_EIS, PF_EIS_MT, PF_MT, PF_ORIG_KDIM)

SYSTEMATIC = "systematic"
MULTINOMIAL = "multinomial"

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class ParticleSet:
    """N particles over (C, v) with normalized weights."""

    c: np.ndarray        # (N, M)
    v: np.ndarray        # (N, M)
    weights: np.ndarray  # (N,)

    @property
    def n(self) -> int:
        return self.weights.size

    def posterior_mean(self) -> np.ndarray:
        return self.weights @ self.c


@dataclass(frozen=True)
class FilterSpec:
    """A filter kind plus its coordinate partition."""

    kind: str
    partition: StatePartition
    name: str = ""

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise ValueError(f"unknown filter kind {self.kind!r}")
        p = self.partition
        if self.kind == PF_ORIGINAL and p.k != p.m:
            raise ValueError("pf-original requires the full state sampled (K = M)")
        if self.kind == PF_DOUCET and p.k != 0:
            raise ValueError("pf-doucet requires K = 0")
        if self.kind == PF_DOUCET and p.m_rr != 0:
            raise ValueError("pf-doucet mode-tracks nothing (M_rr = 0)")
        if self.kind == PF_EIS and p.m_rr != 0:
            raise ValueError("pf-eis mode-tracks nothing; use pf-eis-mt")
        if not self.name:
            object.__setattr__(self, "name", self.kind)


@dataclass
class StepRecord:
    """Pre-resampling summary of one filter step."""

    mean: np.ndarray
    n_eff: float
    degenerate: bool = False
    mode_iterations: float = 0.0
    mode_grad_norm: float = 0.0
    pd_repairs: int = 0
    fallbacks: int = 0


@dataclass
class StepStreams:
    """Named random streams for one (run, t) filter step."""

    key: int
    t: int

    def stp(self) -> np.random.Generator:
        return rngmod.stream(self.key, self.t, rngmod.STP)

    def proposal(self) -> np.random.Generator:
        return rngmod.stream(self.key, self.t, rngmod.PROPOSAL)

    def resample(self) -> np.random.Generator:
        return rngmod.stream(self.key, self.t, rngmod.RESAMPLE)


def effective_size(weights: np.ndarray) -> float:
    """Effective particle count 1 / sum(w^2) for normalized weights."""
    weights = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(weights * weights))


def resample(
    weights: np.ndarray,
    n: int,
    scheme: str = SYSTEMATIC,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Indices replicating particles in proportion to their weights."""
    weights = np.asarray(weights, dtype=float)
    total = weights.sum()
    if not np.isfinite(total) or total <= 0:
        raise ValueError("weights must be normalized and positive overall")
    w = weights / total
    if rng is None:
        rng = np.random.default_rng()
    if scheme == SYSTEMATIC:
        positions = (rng.random() + np.arange(n)) / n
        idx = np.searchsorted(np.cumsum(w), positions)
        return np.minimum(idx, w.size - 1)
    if scheme == MULTINOMIAL:
        return rng.choice(w.size, size=n, p=w)
    raise ValueError(f"unknown resampling scheme {scheme!r}")


def init_particles(model: LdssModel, n: int) -> ParticleSet:
    """Initial cloud: every particle at the known initial state."""
    return ParticleSet(
        c=np.tile(model.c0, (n, 1)),
        v=np.tile(model.v0, (n, 1)),
        weights=np.full(n, 1.0 / n),
    )


def _normalize_log_weights(log_w: np.ndarray) -> tuple[np.ndarray, bool]:
    """Shift-normalize; uniform reset (flagged) when every weight is zero."""
    top = log_w.max()
    if not np.isfinite(top):
        n = log_w.size
        return np.full(n, 1.0 / n), True
    w = np.exp(log_w - top)
    w = w / w.sum()
    w = w / w.sum()
    return w, False


def _log_normal_diag(x: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    """Diagonal-Gaussian log density; batched over leading axes."""
    d = x - mean
    return -0.5 * np.sum(LOG_2PI + np.log(var) + d * d / var, axis=-1)


def _log_normal_chol(x: np.ndarray, mean: np.ndarray, chol_l: np.ndarray) -> np.ndarray:
    """Full-covariance Gaussian log density from Cholesky factors (batched)."""
    diff = (x - mean)[..., None]
    z = np.linalg.solve(chol_l, diff)[..., 0]
    quad = np.sum(z * z, axis=-1)
    logdet = np.sum(np.log(np.diagonal(chol_l, axis1=-2, axis2=-1)), axis=-1)
    return -0.5 * (x.shape[-1] * LOG_2PI + quad) - logdet


def _observation_array(y) -> np.ndarray:
    if isinstance(y, Observation):
        return y.y
    return np.atleast_2d(np.asarray(y, dtype=float))


def _proposal_block(model: LdssModel, part: StatePartition, kind: str):
    """Index arrays and basis blocks for the sampled/residual split."""
    if kind == PF_MT:
        sampled = np.array(part.s_idx + part.rs_idx, dtype=int)
        resid = np.array(part.rr_idx, dtype=int)
    else:
        sampled = np.array(part.s_idx, dtype=int)
        resid = np.array(part.r_idx, dtype=int)
    b_s = model.b_mat[:, sampled]
    b_r = model.b_mat[:, resid]
    return sampled, resid, b_s, b_r


def pf_step(
    kind: str,
    pset: ParticleSet,
    model: LdssModel,
    partition: StatePartition,
    y,
    streams: StepStreams,
    scheme: str = SYSTEMATIC,
) -> tuple[ParticleSet, StepRecord]:
    """One importance-sample / weight / resample cycle for any filter kind."""
    if model.obs is None:
        raise ValueError("filtering needs an observation model")
    # degenerate partitions collapse to the simpler kinds
    if kind == PF_MT and partition.m_rr == 0:
        kind = PF_ORIGINAL
    elif kind == PF_EIS_MT and partition.m_rr == 0:
        kind = PF_EIS
    y_arr = _observation_array(y)
    n = pset.n
    m = model.m
    a = model.a
    dn = model.delta_nu

    if kind in (PF_ORIGINAL, PF_ORIG_KDIM):
        z = streams.stp().standard_normal((n, m))
        v_new = a * pset.v + np.sqrt(dn) * z
        if kind == PF_ORIG_KDIM:
            frozen = np.array(partition.r_idx, dtype=int)
            if frozen.size:
                v_new[:, frozen] = a * pset.v[:, frozen]
        c_new = pset.c + v_new @ model.b_mat.T
        log_w = np.log(pset.weights) + ol_loglik(model.obs, y_arr, c_new)
        return _finish_step(pset, c_new, v_new, log_w, streams, scheme, StepRecord(None, 0.0))

    sampled, resid, b_s, b_r = _proposal_block(model, partition, kind)
    if resid.size == 0:
        raise ValueError(f"{kind} needs a nonempty residual block")
    delta_r = dn[resid]
    if np.any(delta_r <= 0):
        raise ValueError("residual prior variances must be positive for proposal filters")

    if sampled.size:
        z_s = streams.stp().standard_normal((n, sampled.size))
        v_s = a * pset.v[:, sampled] + np.sqrt(dn[sampled]) * z_s
        c_tilde = pset.c + v_s @ b_s.T
    else:
        v_s = np.empty((n, 0))
        c_tilde = pset.c.copy()
    f_r = a * pset.v[:, resid]
    z_r = streams.proposal().standard_normal((n, resid.size))
    n_rs = partition.m_rs if kind == PF_EIS_MT else resid.size

    v_r, log_ratio, batch = _draw_residual(
        kind, model.obs, y_arr, c_tilde, f_r, delta_r, b_r, z_r, n_rs
    )
    v_new = np.empty((n, m))
    if sampled.size:
        v_new[:, sampled] = v_s
    v_new[:, resid] = v_r
    c_new = c_tilde + v_r @ b_r.T
    log_w = np.log(pset.weights) + log_ratio + ol_loglik(model.obs, y_arr, c_new)

    ok = batch.ok
    rec = StepRecord(
        mean=None,
        n_eff=0.0,
        mode_iterations=float(batch.iterations[ok].mean()) if ok.any() else 0.0,
        mode_grad_norm=float(batch.grad_norm[ok].max()) if ok.any() else 0.0,
        pd_repairs=batch.pd_repairs,
        fallbacks=int((~ok).sum()),
    )
    return _finish_step(pset, c_new, v_new, log_w, streams, scheme, rec)


def _draw_residual(kind, obs, y_arr, c_tilde, f_r, delta_r, b_r, z_r, n_rs):
    """Residual draws and log prior/proposal corrections for all particles.

    Rows where the mode search or covariance repair fails fall back to
    prior sampling with a unit importance ratio, reusing the same normal
    draws so streams stay aligned.
    """
    n, d = f_r.shape
    batch = batch_find_modes(
        obs, y_arr, c_tilde, f_r, delta_r, b_r, with_cov=(kind != PF_MT)
    )
    ok = batch.ok
    v_r = f_r + np.sqrt(delta_r) * z_r          # fallback: prior draw
    log_ratio = np.zeros(n)
    if not ok.any():
        batch.ok = ok
        return v_r, log_ratio, batch

    if kind == PF_MT:
        v_r[ok] = batch.modes[ok]
        log_ratio[ok] = _log_normal_diag(batch.modes[ok], f_r[ok], delta_r)
        return v_r, log_ratio, batch

    if kind in (PF_DOUCET, PF_EIS):
        draw = batch.modes + np.einsum("nij,nj->ni", batch.chol, z_r)
        v_r[ok] = draw[ok]
    elif kind == PF_EIS_MT:
        if n_rs:
            cov_ss = batch.cov[:, :n_rs, :n_rs]
            cov_rs = batch.cov[:, n_rs:, :n_rs]
            chol_ss = np.empty_like(cov_ss)
            try:
                chol_ss[ok] = np.linalg.cholesky(cov_ss[ok])
            except np.linalg.LinAlgError:
                for i in np.nonzero(ok)[0]:
                    try:
                        chol_ss[i] = np.linalg.cholesky(cov_ss[i])
                    except np.linalg.LinAlgError:
                        ok[i] = False
            x_rs = batch.modes[:, :n_rs] + np.einsum("nij,nj->ni", chol_ss, z_r[:, :n_rs])
            gain = np.linalg.solve(
                np.where(ok[:, None, None], cov_ss, np.eye(n_rs)),
                np.swapaxes(cov_rs, -1, -2),
            )
            m_star = batch.modes[:, n_rs:] + np.einsum(
                "nji,nj->ni", gain, x_rs - batch.modes[:, :n_rs]
            )
            draw = np.concatenate([x_rs, m_star], axis=1)
        else:
            draw = batch.modes.copy()
        v_r[ok] = draw[ok]
    else:
        raise ValueError(f"unknown proposal kind {kind!r}")
    log_prior = _log_normal_diag(v_r[ok], f_r[ok], delta_r)
    log_q = _log_normal_chol(v_r[ok], batch.modes[ok], batch.chol[ok])
    log_ratio[ok] = log_prior - log_q
    batch.ok = ok
    return v_r, log_ratio, batch


def _finish_step(pset, c_new, v_new, log_w, streams, scheme, rec: StepRecord):
    weights, degenerate = _normalize_log_weights(log_w)
    rec.mean = weights @ c_new
    rec.n_eff = effective_size(weights)
    rec.degenerate = degenerate
    idx = resample(weights, weights.size, scheme=scheme, rng=streams.resample())
    new_set = ParticleSet(
        c=c_new[idx],
        v=v_new[idx],
        weights=np.full(weights.size, 1.0 / weights.size),
    )
    return new_set, rec


def pf_original_step(pset, model, y, streams, scheme=SYSTEMATIC):
    part = StatePartition.from_sizes(model.m, model.m)
    return pf_step(PF_ORIGINAL, pset, model, part, y, streams, scheme)


def pf_eis_step(pset, model, partition, y, streams, scheme=SYSTEMATIC):
    kind = PF_DOUCET if partition.k == 0 else PF_EIS
    return pf_step(kind, pset, model, partition, y, streams, scheme)


def pf_eis_mt_step(pset, model, partition, y, streams, scheme=SYSTEMATIC):
    if partition.m_rr == 0:
        return pf_eis_step(pset, model, partition, y, streams, scheme)
    return pf_step(PF_EIS_MT, pset, model, partition, y, streams, scheme)


def pf_mt_step(pset, model, partition, y, streams, scheme=SYSTEMATIC):
    if partition.m_rr == 0:
        return pf_step(PF_ORIGINAL, pset, model, partition, y, streams, scheme)
    return pf_step(PF_MT, pset, model, partition, y, streams, scheme)


@dataclass
class FilterRun:
    """Per-step posterior means and diagnostics for one filter on one run."""

    means: np.ndarray           # (T, M)
    n_eff: np.ndarray           # (T,)
    records: list[StepRecord] = field(default_factory=list)


def run_filter(
    spec: FilterSpec,
    model: LdssModel,
    observations,
    n_particles: int,
    key: int,
    scheme: str = SYSTEMATIC,
) -> FilterRun:
    """Run one filter over a full observation sequence."""
    pset = init_particles(model, n_particles)
    means = []
    n_eff = []
    records = []
    for t, y in enumerate(observations, start=1):
        streams = StepStreams(key=key, t=t)
        pset, rec = pf_step(spec.kind, pset, model, spec.partition, y, streams, scheme)
        means.append(rec.mean)
        n_eff.append(rec.n_eff)
        records.append(rec)
    return FilterRun(means=np.array(means), n_eff=np.array(n_eff), records=records)


# ---------------------------------------------------------------------------
# linear-Gaussian oracles


def _require_linear_gaussian(obs: SensorSpec, nodes=None):
    nodes = range(obs.n_nodes) if nodes is None else nodes
    for p in nodes:
        if obs.h_kind[p] != "linear" or np.any(obs.alpha[p] != 0):
            raise ValueError("oracle needs linear sensors with zero failure probability")


def kalman_filter(model: LdssModel, observations) -> tuple[np.ndarray, np.ndarray]:
    """Exact filter for the zero-failure linear model; state z = [C; v].

    Returns filtered means (T, 2M) and covariances (T, 2M, 2M). Raises on a
    non-positive-definite innovation covariance.
    """
    if model.obs is None:
        raise ValueError("model carries no observation spec")
    obs = model.obs
    _require_linear_gaussian(obs)
    m = model.m
    j = obs.n_sensors
    a = model.a
    b = model.b_mat

    f_mat = np.zeros((2 * m, 2 * m))
    f_mat[:m, :m] = np.eye(m)
    f_mat[:m, m:] = a * b
    f_mat[m:, m:] = a * np.eye(m)
    g_mat = np.vstack([b, np.eye(m)])
    q_mat = (g_mat * model.delta_nu) @ g_mat.T

    h_mat = np.zeros((m * j, 2 * m))
    for p in range(m):
        for jj in range(j):
            h_mat[p * j + jj, p] = 1.0
    r_diag = np.repeat(obs.sigma_obs2, j)

    mean = np.concatenate([model.c0, model.v0])
    cov = np.zeros((2 * m, 2 * m))
    means, covs = [], []
    for y in observations:
        y_flat = _observation_array(y).ravel()
        mean = f_mat @ mean
        cov = f_mat @ cov @ f_mat.T + q_mat
        s_mat = h_mat @ cov @ h_mat.T + np.diag(r_diag)
        try:
            s_factor = sla.cho_factor(s_mat, lower=True, check_finite=False)
        except sla.LinAlgError as exc:
            raise NumericalError("innovation covariance not positive definite") from exc
        gain = sla.cho_solve(s_factor, h_mat @ cov, check_finite=False).T
        mean = mean + gain @ (y_flat - h_mat @ mean)
        cov = cov - gain @ h_mat @ cov
        cov = 0.5 * (cov + cov.T)
        means.append(mean.copy())
        covs.append(cov.copy())
    return np.array(means), np.array(covs)


def rbpf_filter(
    model: LdssModel,
    partition: StatePartition,
    observations,
    n_particles: int,
    key: int,
    scheme: str = SYSTEMATIC,
) -> FilterRun:
    """Marginalized oracle: prior sampling on the sampled block, Kalman
    recursion on the mode-tracked block.

    Restricted to an identity basis with linear zero-failure sensors on the
    tracked nodes, which makes the tracked block exactly conditionally
    linear-Gaussian. Consumes the same stream addresses as pf-mt with the
    same partition, so the two runs are draw-for-draw comparable.
    """
    if model.obs is None:
        raise ValueError("filtering needs an observation model")
    if np.abs(model.b_mat - np.eye(model.m)).max() > 1e-12:
        raise ValueError("marginalized oracle requires an identity basis")
    obs = model.obs
    sampled = np.array(partition.s_idx + partition.rs_idx, dtype=int)
    tracked = np.array(partition.rr_idx, dtype=int)
    if tracked.size == 0:
        raise ValueError("nothing to marginalize (empty tracked block)")
    _require_linear_gaussian(obs, tracked)

    a = model.a
    j = obs.n_sensors
    r = tracked.size
    obs_s = SensorSpec(
        alpha=obs.alpha[sampled],
        sigma_obs2=obs.sigma_obs2[sampled],
        h_kind=tuple(obs.h_kind[p] for p in sampled),
        fail=obs.fail,
    ) if sampled.size else None

    # tracked-block state [C_rr; v_rr]
    f_mat = np.zeros((2 * r, 2 * r))
    f_mat[:r, :r] = np.eye(r)
    f_mat[:r, r:] = a * np.eye(r)
    f_mat[r:, r:] = a * np.eye(r)
    g_mat = np.vstack([np.eye(r), np.eye(r)])
    q_mat = (g_mat * model.delta_nu[tracked]) @ g_mat.T
    h_mat = np.zeros((r * j, 2 * r))
    for k, _p in enumerate(tracked):
        for jj in range(j):
            h_mat[k * j + jj, k] = 1.0
    r_diag = np.repeat(obs.sigma_obs2[tracked], j)

    n = n_particles
    c_s = np.tile(model.c0[sampled], (n, 1))
    v_s = np.tile(model.v0[sampled], (n, 1))
    z_mean = np.tile(np.concatenate([model.c0[tracked], model.v0[tracked]]), (n, 1))
    z_cov = np.zeros((2 * r, 2 * r))
    weights = np.full(n, 1.0 / n)

    means = []
    n_eff_hist = []
    for t, y in enumerate(observations, start=1):
        y_arr = _observation_array(y)
        streams = StepStreams(key=key, t=t)
        if sampled.size:
            z = streams.stp().standard_normal((n, sampled.size))
            v_s = a * v_s + np.sqrt(model.delta_nu[sampled]) * z
            c_s = c_s + v_s

        z_mean = z_mean @ f_mat.T
        z_cov = f_mat @ z_cov @ f_mat.T + q_mat
        s_mat = h_mat @ z_cov @ h_mat.T + np.diag(r_diag)
        s_factor = sla.cho_factor(s_mat, lower=True, check_finite=False)
        log_det = 2.0 * np.sum(np.log(np.diag(s_factor[0])))
        innov = y_arr[tracked].reshape(1, -1) - z_mean @ h_mat.T
        solved = sla.cho_solve(s_factor, innov.T, check_finite=False).T
        log_w = np.log(weights) - 0.5 * (
            innov.shape[1] * LOG_2PI + log_det + np.sum(innov * solved, axis=1)
        )
        if sampled.size:
            log_w += ol_loglik(obs_s, y_arr[sampled], c_s)
        gain = sla.cho_solve(s_factor, h_mat @ z_cov, check_finite=False).T
        z_mean = z_mean + innov @ gain.T
        z_cov = z_cov - gain @ h_mat @ z_cov
        z_cov = 0.5 * (z_cov + z_cov.T)

        weights, _ = _normalize_log_weights(log_w)
        mean_full = np.zeros(model.m)
        if sampled.size:
            mean_full[sampled] = weights @ c_s
        mean_full[tracked] = weights @ z_mean[:, :r]
        means.append(mean_full)
        n_eff_hist.append(effective_size(weights))

        idx = resample(weights, n, scheme=scheme, rng=streams.resample())
        c_s = c_s[idx] if sampled.size else c_s
        v_s = v_s[idx] if sampled.size else v_s
        z_mean = z_mean[idx]
        weights = np.full(n, 1.0 / n)
    return FilterRun(means=np.array(means), n_eff=np.array(n_eff_hist))
