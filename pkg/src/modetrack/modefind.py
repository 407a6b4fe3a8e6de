"""Mode finding and Laplace approximation for the conditional posterior.

Given a particle's predicted state and the sampled multimodal coordinates,
the residual velocity block v_r has conditional negative log-posterior

    L(v_r) = E(C_tilde + B_r v_r) + sum_p (v_r - f_r)_p^2 / (2 Delta_r_p),

with E the sensor energy. The proposal used by the sampling filters is the
Gaussian N(m, Sigma) with m the minimizer of L and Sigma the inverse Hessian
at m (Laplace approximation).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg as sla

from .sensors import SensorSpec, energy_parts

GRAD_TOL = 1e-8
MAX_ITER = 200
ARMIJO_C = 1e-4


class NumericalError(RuntimeError):
    """Raised when an operation hits non-finite values or a singular matrix."""


@dataclass(frozen=True)
class CondPosteriorSpec:
    """Inputs fixing one particle's conditional posterior over v_r.

    c_tilde: predicted state before the residual update, C_{t-1} + B_s v_s.
    f_r: residual prior mean a * v_{t-1, r}.
    delta_r: residual prior variances (strictly positive).
    b_r: M x M_r block of basis columns for the residual coordinates.
    """

    obs: SensorSpec
    y: np.ndarray
    c_tilde: np.ndarray
    f_r: np.ndarray
    delta_r: np.ndarray
    b_r: np.ndarray

    def __post_init__(self):
        for name in ("y", "c_tilde", "f_r", "delta_r", "b_r"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        m, m_r = self.b_r.shape
        if self.c_tilde.shape != (m,):
            raise ValueError("c_tilde length must match rows of b_r")
        if self.f_r.shape != (m_r,) or self.delta_r.shape != (m_r,):
            raise ValueError("f_r and delta_r must match the residual dimension")
        if np.any(self.delta_r <= 0):
            raise ValueError("residual prior variances must be positive")
        if np.abs(self.b_r.T @ self.b_r - np.eye(m_r)).max() > 1e-8:
            raise ValueError("b_r columns must be orthonormal")

    @property
    def m_r(self) -> int:
        return self.b_r.shape[1]


def neg_log_cond_posterior(spec: CondPosteriorSpec, v_r: np.ndarray, order: int = 0):
    """L(v_r) with optional gradient and Hessian.

    Returns (value, grad, hess); entries beyond `order` are None.
    grad = B_r' grad_C E + (v_r - f_r) / Delta_r,
    hess = B_r' hess_C E B_r + diag(1 / Delta_r).
    """
    v_r = np.asarray(v_r, dtype=float)
    c = spec.c_tilde + spec.b_r @ v_r
    e, g_c, h_c = energy_parts(spec.obs, spec.y, c, order=order)
    dv = v_r - spec.f_r
    value = float(e + 0.5 * np.sum(dv * dv / spec.delta_r))
    if order == 0:
        return value, None, None
    grad = spec.b_r.T @ g_c + dv / spec.delta_r
    if order == 1:
        return value, grad, None
    # sensor Hessian is diagonal in C, so this is (B_r' diag(h) B_r)
    hess = (spec.b_r.T * h_c) @ spec.b_r + np.diag(1.0 / spec.delta_r)
    return value, grad, hess


@dataclass
class ModeDiagnostics:
    iterations: int
    grad_norm: float
    converged: bool
    pd_repairs: int = 0


def find_mode(spec: CondPosteriorSpec, x0: Optional[np.ndarray] = None):
    """Minimize L by safeguarded Newton descent from the residual prior mean.

    Newton steps are taken whenever the Hessian is positive definite,
    otherwise steepest descent; an Armijo backtracking line search keeps the
    iteration monotone. Deterministic: no randomness anywhere.

    Returns (m, ModeDiagnostics). Raises NumericalError if L is non-finite
    at the starting point or becomes non-finite with a degenerate gradient.
    """
    x = np.array(spec.f_r if x0 is None else x0, dtype=float)
    value, grad, hess = neg_log_cond_posterior(spec, x, order=2)
    if not np.isfinite(value):
        raise NumericalError("conditional posterior is non-finite at the initial point")
    pd_repairs = 0
    it = 0
    for it in range(1, MAX_ITER + 1):
        gnorm = float(np.abs(grad).max())
        if gnorm < GRAD_TOL:
            return x, ModeDiagnostics(it - 1, gnorm, True, pd_repairs)
        try:
            c_factor = sla.cho_factor(hess, lower=True, check_finite=False)
            direction = -sla.cho_solve(c_factor, grad, check_finite=False)
        except (sla.LinAlgError, ValueError):
            direction = -grad
            pd_repairs += 1
        descent = float(grad @ direction)
        if descent >= 0 or not np.all(np.isfinite(direction)):
            direction = -grad
            descent = -float(grad @ grad)
            pd_repairs += 1
        step = 1.0
        new_value = np.inf
        for _ in range(40):
            cand = x + step * direction
            new_value, _, _ = neg_log_cond_posterior(spec, cand, order=0)
            if np.isfinite(new_value) and new_value <= value + ARMIJO_C * step * descent:
                break
            step *= 0.5
        else:
            # no decrease found: stop at the best iterate
            return x, ModeDiagnostics(it, float(np.abs(grad).max()), False, pd_repairs)
        x = x + step * direction
        value = new_value
        _, grad, hess = neg_log_cond_posterior(spec, x, order=2)
        if not np.all(np.isfinite(grad)):
            raise NumericalError("gradient became non-finite during mode search")
    return x, ModeDiagnostics(MAX_ITER, float(np.abs(grad).max()), False, pd_repairs)


@dataclass
class BatchModes:
    """Vectorized mode search over particles sharing one observation.

    ok marks rows where the search and covariance repair succeeded; failed
    rows carry no usable mode and callers fall back to prior sampling.
    """

    modes: np.ndarray            # (N, M_r)
    cov: Optional[np.ndarray]    # (N, M_r, M_r) or None when not requested
    chol: Optional[np.ndarray]
    ok: np.ndarray               # (N,) bool
    iterations: np.ndarray       # (N,)
    grad_norm: np.ndarray        # (N,)
    converged: np.ndarray        # (N,) bool
    pd_repairs: int = 0


def _batch_l(obs, y, c_tilde, f_r, delta_r, b_r, x, order):
    """L, grad, Hessian for a batch of residual points, one per particle."""
    c = c_tilde + x @ b_r.T
    e, g_c, h_c = energy_parts(obs, y, c, order=order)
    dv = x - f_r
    value = e + 0.5 * np.sum(dv * dv / delta_r, axis=-1)
    if order == 0:
        return value, None, None
    grad = g_c @ b_r + dv / delta_r
    if order == 1:
        return value, grad, None
    hess = np.einsum("pi,np,pj->nij", b_r, h_c, b_r)
    idx = np.arange(b_r.shape[1])
    hess[:, idx, idx] += 1.0 / delta_r
    return value, grad, hess


def batch_find_modes(
    obs,
    y: np.ndarray,
    c_tilde: np.ndarray,
    f_r: np.ndarray,
    delta_r: np.ndarray,
    b_r: np.ndarray,
    with_cov: bool = True,
) -> BatchModes:
    """Safeguarded Newton descent run in lockstep over all particles.

    Modified-Newton directions (Hessian eigenvalues floored to keep the
    direction a well-scaled descent direction in concave stretches of the
    energy), Armijo backtracking, 1e-8 gradient tolerance, 200 iteration
    cap. Each iteration evaluates only the still-active particles.
    """
    n, d = f_r.shape
    x = f_r.copy()
    value, grad, hess = _batch_l(obs, y, c_tilde, f_r, delta_r, b_r, x, order=2)
    ok = np.isfinite(value)
    grad = np.where(np.isfinite(grad), grad, np.inf)
    converged = np.zeros(n, dtype=bool)
    stalled = np.zeros(n, dtype=bool)
    iterations = np.zeros(n, dtype=int)
    gnorm_all = np.abs(grad).max(axis=-1)
    pd_repairs = 0

    for _ in range(MAX_ITER):
        converged |= ok & (gnorm_all < GRAD_TOL)
        idx = np.nonzero(ok & ~converged & ~stalled)[0]
        if idx.size == 0:
            break
        iterations[idx] += 1
        h_sub = hess[idx]
        g_sub = grad[idx]
        finite_h = np.isfinite(h_sub).all(axis=(-2, -1))
        h_sub = np.where(finite_h[:, None, None], h_sub, np.eye(d))
        evals, evecs = np.linalg.eigh(h_sub)
        floor = np.maximum(1e-8 * np.abs(evals).max(axis=-1, keepdims=True), 1e-12)
        repaired = evals < floor
        pd_repairs += int(np.any(repaired, axis=-1).sum())
        evals = np.maximum(evals, floor)
        # direction = -(V diag(1/evals) V') g  (modified Newton, always descent)
        direction = -np.einsum(
            "nik,nk,njk,nj->ni", evecs, 1.0 / evals, evecs, g_sub
        )
        descent = np.einsum("nd,nd->n", g_sub, direction)

        x_sub = x[idx]
        val_sub = value[idx]
        ct_sub = c_tilde[idx]
        fr_sub = f_r[idx]
        step = np.ones(idx.size)
        remaining = np.ones(idx.size, dtype=bool)
        for _ls in range(40):
            rem_idx = np.nonzero(remaining)[0]
            if rem_idx.size == 0:
                break
            cand = x_sub[rem_idx] + step[rem_idx, None] * direction[rem_idx]
            cand_val, _, _ = _batch_l(
                obs, y, ct_sub[rem_idx], fr_sub[rem_idx], delta_r, b_r, cand, order=0
            )
            # strict decrease: progress below float resolution stalls the row
            accept = (
                np.isfinite(cand_val)
                & (cand_val <= val_sub[rem_idx] + ARMIJO_C * step[rem_idx] * descent[rem_idx])
                & (cand_val < val_sub[rem_idx])
            )
            acc_rows = rem_idx[accept]
            x_sub[acc_rows] = cand[accept]
            val_sub[acc_rows] = cand_val[accept]
            remaining[acc_rows] = False
            step[remaining] *= 0.5
        stalled[idx[remaining]] = True
        moved = idx[~remaining]
        x[moved] = x_sub[~remaining]
        value[moved] = val_sub[~remaining]
        if moved.size:
            _, g_new, h_new = _batch_l(
                obs, y, c_tilde[moved], f_r[moved], delta_r, b_r, x[moved], order=2
            )
            bad = ~np.isfinite(g_new).all(axis=-1)
            ok[moved[bad]] = False
            grad[moved] = np.where(np.isfinite(g_new), g_new, np.inf)
            hess[moved] = h_new
            gnorm_all[moved] = np.abs(grad[moved]).max(axis=-1)

    result = BatchModes(
        modes=x,
        cov=None,
        chol=None,
        ok=ok,
        iterations=iterations,
        grad_norm=np.where(np.isfinite(gnorm_all), gnorm_all, np.inf),
        converged=converged & ok,
        pd_repairs=pd_repairs,
    )
    if not with_cov:
        return result

    hess = 0.5 * (hess + np.swapaxes(hess, -1, -2))
    finite_h = np.isfinite(hess).all(axis=(-2, -1))
    safe_h = np.where(finite_h[:, None, None], hess, np.eye(d))
    evals, evecs = np.linalg.eigh(safe_h)
    nonzero = ~np.any(evals == 0, axis=-1)
    with np.errstate(divide="ignore"):
        cov_evals = 1.0 / evals
    floor = 1e-12 * float(np.max(delta_r))
    cov_evals = np.maximum(cov_evals, floor)
    cov = np.einsum("nik,nk,njk->nij", evecs, cov_evals, evecs)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    ok = result.ok & finite_h & nonzero & np.isfinite(cov).all(axis=(-2, -1))
    chol = np.empty_like(cov)
    try:
        chol[ok] = np.linalg.cholesky(cov[ok])
    except np.linalg.LinAlgError:
        for i in np.nonzero(ok)[0]:
            try:
                chol[i] = np.linalg.cholesky(cov[i])
            except np.linalg.LinAlgError:
                ok[i] = False
    result.cov = cov
    result.chol = chol
    result.ok = ok
    return result


def laplace_covariance(spec: CondPosteriorSpec, m_t: np.ndarray) -> np.ndarray:
    """Inverse Hessian of L at the mode, symmetrized and eigenvalue-floored.

    At a certified mode the Hessian is positive definite in exact
    arithmetic; the floor (1e-12 * max Delta_r) only repairs rounding so
    Cholesky sampling never fails. A singular Hessian raises NumericalError.
    """
    _, _, hess = neg_log_cond_posterior(spec, m_t, order=2)
    hess = 0.5 * (hess + hess.T)
    if not np.all(np.isfinite(hess)):
        raise NumericalError("Hessian non-finite at mode")
    evals, evecs = np.linalg.eigh(hess)
    if np.any(evals == 0):
        raise NumericalError("singular Hessian at mode")
    cov_evals = 1.0 / evals
    floor = 1e-12 * float(np.max(spec.delta_r))
    cov_evals = np.maximum(cov_evals, floor)
    cov = (evecs * cov_evals) @ evecs.T
    cov = 0.5 * (cov + cov.T)
    if not np.all(np.isfinite(cov)):
        raise NumericalError("covariance non-finite after repair")
    return cov


@dataclass(frozen=True)
class GaussianProposal:
    """Gaussian proposal N(m, cov) over the residual block [r_s; r_r].

    n_rs marks the split: the first n_rs coordinates are sampled, the rest
    assigned to the conditional mode by the mode-tracking filters.
    """

    m: np.ndarray
    cov: np.ndarray
    n_rs: int

    def __post_init__(self):
        object.__setattr__(self, "m", np.asarray(self.m, dtype=float))
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=float))
        d = self.m.size
        if self.cov.shape != (d, d):
            raise ValueError("covariance shape must match the mode vector")
        if np.abs(self.cov - self.cov.T).max() > 1e-8:
            raise ValueError("covariance must be symmetric")
        if not 0 <= self.n_rs <= d:
            raise ValueError("invalid split position")

    @property
    def m_s(self) -> np.ndarray:
        return self.m[: self.n_rs]

    @property
    def m_r(self) -> np.ndarray:
        return self.m[self.n_rs:]

    @property
    def cov_ss(self) -> np.ndarray:
        return self.cov[: self.n_rs, : self.n_rs]

    @property
    def cov_rs(self) -> np.ndarray:
        return self.cov[self.n_rs:, : self.n_rs]

    @property
    def cov_rr(self) -> np.ndarray:
        return self.cov[self.n_rs:, self.n_rs:]


def conditional_gaussian_split(proposal: GaussianProposal, x_rs: np.ndarray):
    """Condition the proposal's r_r block on a sampled r_s value.

    Returns (m_star, sigma_star) with
        m_star = m_r + cov_rs cov_ss^-1 (x_rs - m_s),
        sigma_star = cov_rr - cov_rs cov_ss^-1 cov_rs'.
    sigma_star never exceeds cov_rr (checked). Raises NumericalError when
    the sampled block covariance is numerically singular.
    """
    x_rs = np.asarray(x_rs, dtype=float)
    if x_rs.shape != (proposal.n_rs,):
        raise ValueError("x_rs must match the sampled block dimension")
    if proposal.n_rs == 0:
        return proposal.m_r.copy(), proposal.cov_rr.copy()
    try:
        factor = sla.cho_factor(proposal.cov_ss, lower=True, check_finite=False)
    except (sla.LinAlgError, ValueError) as exc:
        raise NumericalError("sampled-block covariance is singular") from exc
    gain = sla.cho_solve(factor, proposal.cov_rs.T, check_finite=False).T
    m_star = proposal.m_r + gain @ (x_rs - proposal.m_s)
    sigma_star = proposal.cov_rr - gain @ proposal.cov_rs.T
    sigma_star = 0.5 * (sigma_star + sigma_star.T)
    if sigma_star.size:
        gap = np.linalg.eigvalsh(proposal.cov_rr - sigma_star)
        if gap.size and gap.min() < -1e-8 * max(1.0, np.abs(proposal.cov_rr).max()):
            raise NumericalError("conditioning increased the residual covariance")
    return m_star, sigma_star
