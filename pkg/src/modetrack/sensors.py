"""Sensor-network observation model with per-sensor failure mixtures.

Each node p carries J sensors. A working sensor reads h_p(C_p) plus Gaussian
noise; with probability alpha[p, j] the sensor fails and the reading comes
from a failure density instead. The likelihood of a full reading matrix Y is
the product over (p, j) of two-component mixtures, so its negative log
("energy") decomposes node-wise and has a diagonal Hessian in C.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))

H_LINEAR = "linear"
H_SQUARED = "squared"


@dataclass(frozen=True)
class UniformFailure:
    """Failed sensor reads uniformly on [lo, hi], independent of temperature."""

    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("uniform failure needs lo < hi")


@dataclass(frozen=True)
class GaussIndepFailure:
    """Failed sensor reads N(mu, var), independent of temperature."""

    mu: float
    var: float

    def __post_init__(self):
        if self.var <= 0:
            raise ValueError("failure variance must be positive")


@dataclass(frozen=True)
class GaussDepFailure:
    """Failed sensor reads N(slope * C_p, var): weak temperature dependence."""

    slope: float
    var: float

    def __post_init__(self):
        if self.var <= 0:
            raise ValueError("failure variance must be positive")


FailureModel = Union[UniformFailure, GaussIndepFailure, GaussDepFailure]


@dataclass(frozen=True)
class SensorSpec:
    """Failure probabilities, noise variances and response kinds per node.

    alpha: (M, J) failure probabilities in [0, 1].
    sigma_obs2: (M,) working-sensor noise variances.
    h_kind: length-M sequence of "linear" or "squared".
    fail: shared failure model for all sensors.
    """

    alpha: np.ndarray
    sigma_obs2: np.ndarray
    h_kind: tuple[str, ...]
    fail: FailureModel

    def __post_init__(self):
        alpha = np.atleast_2d(np.asarray(self.alpha, dtype=float))
        sig2 = np.asarray(self.sigma_obs2, dtype=float)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "sigma_obs2", sig2)
        object.__setattr__(self, "h_kind", tuple(self.h_kind))
        m, _ = alpha.shape
        if np.any(alpha < 0) or np.any(alpha > 1):
            raise ValueError("failure probabilities must lie in [0, 1]")
        if sig2.shape != (m,) or np.any(sig2 <= 0):
            raise ValueError("sigma_obs2 must be positive, one entry per node")
        if len(self.h_kind) != m:
            raise ValueError("h_kind must have one entry per node")
        for kind in self.h_kind:
            if kind not in (H_LINEAR, H_SQUARED):
                raise ValueError(f"unknown sensor kind {kind!r}")
        object.__setattr__(self, "_squared", np.array([k == H_SQUARED for k in self.h_kind]))

    @property
    def n_nodes(self) -> int:
        return self.alpha.shape[0]

    @property
    def n_sensors(self) -> int:
        return self.alpha.shape[1]


@dataclass
class Observation:
    """One time step of readings, y[p, j]; `failed` is a latent diagnostic."""

    y: np.ndarray
    failed: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if not np.all(np.isfinite(self.y)):
            raise ValueError("observations must be finite")


def _h_and_derivs(spec: SensorSpec, c: np.ndarray):
    """h(C), h'(C), h''(C) per node; c has shape (..., M)."""
    sq = spec._squared
    h = np.where(sq, c * c, c)
    h1 = np.where(sq, 2.0 * c, 1.0)
    h2 = np.where(sq, 2.0, 0.0)
    return h, h1, h2


def sample_observation(spec: SensorSpec, c_t: np.ndarray, rng: np.random.Generator) -> Observation:
    """Draw one reading matrix from the mixture model.

    Always consumes the same number of random variates regardless of which
    sensors fail, so streams stay aligned across models that share a seed.
    """
    c_t = np.asarray(c_t, dtype=float)
    m, j = spec.alpha.shape
    h, _, _ = _h_and_derivs(spec, c_t)
    failed = rng.random((m, j)) < spec.alpha
    working = h[:, None] + np.sqrt(spec.sigma_obs2)[:, None] * rng.standard_normal((m, j))
    fail = spec.fail
    if isinstance(fail, UniformFailure):
        fail_vals = rng.uniform(fail.lo, fail.hi, size=(m, j))
    elif isinstance(fail, GaussIndepFailure):
        fail_vals = fail.mu + np.sqrt(fail.var) * rng.standard_normal((m, j))
    else:
        fail_vals = fail.slope * c_t[:, None] + np.sqrt(fail.var) * rng.standard_normal((m, j))
    return Observation(y=np.where(failed, fail_vals, working), failed=failed)


def _mixture_terms(spec: SensorSpec, y: np.ndarray, c: np.ndarray, order: int):
    """Log-likelihood of each (p, j) term and its C_p-derivatives.

    c: (..., M). Returns (loglik, d1, d2) arrays of shape (..., M, J);
    d1/d2 are None below the requested order. Mixture derivatives use the
    component responsibilities, evaluated through log-sum-exp so far tails
    stay finite.
    """
    c = np.asarray(c, dtype=float)
    h, h1, h2 = _h_and_derivs(spec, c)
    sig2 = spec.sigma_obs2
    resid = y - h[..., :, None]                                  # (..., M, J)
    log_nw = -0.5 * (LOG_2PI + np.log(sig2))[:, None] - 0.5 * resid**2 / sig2[:, None]

    fail = spec.fail
    if isinstance(fail, UniformFailure):
        in_range = (y >= fail.lo) & (y <= fail.hi)
        log_pf = np.where(in_range, -np.log(fail.hi - fail.lo), -np.inf)
        log_pf = np.broadcast_to(log_pf, resid.shape)
        gf1 = gf2 = 0.0
    elif isinstance(fail, GaussIndepFailure):
        log_pf = -0.5 * (LOG_2PI + np.log(fail.var)) - 0.5 * (y - fail.mu) ** 2 / fail.var
        log_pf = np.broadcast_to(log_pf, resid.shape)
        gf1 = gf2 = 0.0
    else:
        fresid = y - fail.slope * c[..., :, None]
        log_pf = -0.5 * (LOG_2PI + np.log(fail.var)) - 0.5 * fresid**2 / fail.var
        gf1 = fail.slope * fresid / fail.var
        gf2 = -fail.slope**2 / fail.var

    with np.errstate(divide="ignore", invalid="ignore"):
        lw = np.log1p(-spec.alpha) + log_nw
        lf = np.log(spec.alpha) + log_pf
        lw = np.where(np.isnan(lw), -np.inf, lw)    # alpha == 1 with -inf log_nw
        lf = np.where(np.isnan(lf), -np.inf, lf)
        top = np.maximum(lw, lf)
        both_dead = ~np.isfinite(top)
        safe_top = np.where(both_dead, 0.0, top)
        total = np.exp(lw - safe_top) + np.exp(lf - safe_top)
        loglik = np.where(both_dead, -np.inf, safe_top + np.log(np.maximum(total, 1e-300)))
    if order == 0:
        return loglik, None, None

    rw = np.exp(lw - safe_top) / np.maximum(total, 1e-300)
    rw = np.where(both_dead, 0.0, rw)
    rf = 1.0 - rw
    gw1 = resid * h1[..., :, None] / sig2[:, None]
    mean1 = rw * gw1 + rf * gf1
    d1 = mean1
    if order == 1:
        return loglik, d1, None
    gw2 = (-(h1**2)[..., :, None] + resid * h2[..., :, None]) / sig2[:, None]
    # second derivative of log-mixture: E[g'' + g'^2] - (E[g'])^2
    d2 = rw * (gw2 + gw1**2) + rf * (gf2 + np.square(gf1)) - mean1**2
    return loglik, d1, d2


def _check_obs(spec: SensorSpec, y: np.ndarray) -> np.ndarray:
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if y.shape != spec.alpha.shape:
        raise ValueError(f"observation shape {y.shape} does not match (M, J) {spec.alpha.shape}")
    return y


def ol_loglik(spec: SensorSpec, y: np.ndarray, c_t: np.ndarray) -> np.ndarray:
    """Log observation likelihood; c_t may be batched with shape (..., M)."""
    y = _check_obs(spec, y)
    loglik, _, _ = _mixture_terms(spec, y, c_t, order=0)
    return loglik.sum(axis=(-2, -1))


def energy(spec: SensorSpec, y: np.ndarray, c_t: np.ndarray) -> np.ndarray:
    """Negative log observation likelihood (additive constant fixed to zero)."""
    return -ol_loglik(spec, y, c_t)


def energy_parts(spec: SensorSpec, y: np.ndarray, c_t: np.ndarray, order: int = 2):
    """Energy with node-wise gradient and diagonal Hessian in one pass.

    Returns (E, grad, hess_diag) with shapes ((...,), (..., M), (..., M));
    entries beyond `order` are None. The Hessian of the energy is diagonal
    because each mixture term depends on a single node temperature.
    """
    y = _check_obs(spec, y)
    loglik, d1, d2 = _mixture_terms(spec, y, c_t, order)
    e = -loglik.sum(axis=(-2, -1))
    grad = -d1.sum(axis=-1) if d1 is not None else None
    hess = -d2.sum(axis=-1) if d2 is not None else None
    return e, grad, hess


def grad_energy(spec: SensorSpec, y: np.ndarray, c_t: np.ndarray) -> np.ndarray:
    """Gradient of the energy with respect to C_t."""
    _, grad, _ = energy_parts(spec, y, c_t, order=1)
    return grad


def hess_energy(spec: SensorSpec, y: np.ndarray, c_t: np.ndarray) -> np.ndarray:
    """Hessian of the energy; diagonal by the node-wise product structure."""
    _, _, hd = energy_parts(spec, y, c_t, order=2)
    hd = np.asarray(hd)
    if hd.ndim == 1:
        return np.diag(hd)
    out = np.zeros(hd.shape + (hd.shape[-1],))
    idx = np.arange(hd.shape[-1])
    out[..., idx, idx] = hd
    return out


def observation_rows(t: int, obs: Observation):
    """Flatten one observation into (t, p, j, y) CSV rows."""
    m, j = obs.y.shape
    for p in range(m):
        for jj in range(j):
            yield (t, p, jj, obs.y[p, jj])
