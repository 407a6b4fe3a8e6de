"""Linear state-space model with basis-projected velocity increments.

The hidden state is a pair (C_t, v_t): C_t accumulates basis-weighted
velocity coefficients,

    C_t = C_{t-1} + B v_t,        v_t = a v_{t-1} + nu_t,

with nu_t ~ N(0, diag(delta_nu)) and B orthonormal. Most state change
concentrates in the few directions with large delta_nu, which is what the
mode-tracking filters exploit.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .sensors import Observation, SensorSpec, sample_observation


def eigen_basis(sigma_n: np.ndarray, tol: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Decompose a symmetric PSD covariance into (B, delta_nu).

    Returns an orthonormal B and variance vector delta_nu with
    B @ diag(delta_nu) @ B.T == sigma_n. Eigenvalues are sorted descending
    and each column's first nonzero entry is made positive, so the
    decomposition is deterministic.
    """
    sigma_n = np.asarray(sigma_n, dtype=float)
    if sigma_n.ndim != 2 or sigma_n.shape[0] != sigma_n.shape[1]:
        raise ValueError("covariance must be a square matrix")
    if not np.allclose(sigma_n, sigma_n.T, atol=tol):
        raise ValueError("covariance must be symmetric")
    evals, evecs = np.linalg.eigh(0.5 * (sigma_n + sigma_n.T))
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    # rounding can push a zero eigenvalue slightly negative
    evals = np.maximum(evals, 0.0)
    for k in range(evecs.shape[1]):
        col = evecs[:, k]
        nz = np.nonzero(np.abs(col) > 1e-12)[0]
        if nz.size and col[nz[0]] < 0:
            evecs[:, k] = -col
    return evecs, evals


def householder_basis(first_column: Sequence[float]) -> np.ndarray:
    """Orthonormal matrix whose first column is the given direction.

    The input is normalized, then completed to a full basis by the
    Householder reflector mapping e_1 onto it. Deterministic completion for
    models where only the leading basis direction is specified.
    """
    b = np.asarray(first_column, dtype=float)
    norm = np.linalg.norm(b)
    if norm == 0:
        raise ValueError("first column must be nonzero")
    b = b / norm
    m = b.size
    e1 = np.zeros(m)
    e1[0] = 1.0
    w = e1 - b
    wn2 = w @ w
    if wn2 < 1e-30:
        return np.eye(m)
    return np.eye(m) - 2.0 * np.outer(w, w) / wn2


def nearest_orthonormal(b: np.ndarray) -> np.ndarray:
    """Project a nearly orthonormal matrix onto the orthonormal manifold.

    Uses the polar factor from the SVD, which is the closest orthonormal
    matrix in Frobenius norm. Used when a basis is given to low precision.
    """
    u, _, vt = np.linalg.svd(np.asarray(b, dtype=float))
    return u @ vt


@dataclass(frozen=True)
class StatePartition:
    """Split of the velocity coordinates for the sampling/tracking filters.

    s_idx: coordinates sampled from the state-transition prior (the ones
        whose conditioning makes the residual posterior unimodal).
    rs_idx: residual coordinates handled by Gaussian-proposal sampling.
    rr_idx: residual coordinates assigned to the conditional-posterior mode.
    """

    m: int
    s_idx: tuple[int, ...]
    rs_idx: tuple[int, ...]
    rr_idx: tuple[int, ...]

    def __post_init__(self):
        all_idx = self.s_idx + self.rs_idx + self.rr_idx
        if sorted(all_idx) != list(range(self.m)):
            raise ValueError("partition indices must be disjoint and cover 0..M-1")

    @classmethod
    def from_sizes(cls, m: int, k: int, m_rr: int = 0) -> "StatePartition":
        """Contiguous partition: first K sampled, last m_rr mode-tracked."""
        if not (0 <= k <= m and 0 <= m_rr <= m - k):
            raise ValueError(f"invalid partition sizes K={k}, M_rr={m_rr} for M={m}")
        s = tuple(range(k))
        rr = tuple(range(m - m_rr, m))
        rs = tuple(range(k, m - m_rr))
        return cls(m=m, s_idx=s, rs_idx=rs, rr_idx=rr)

    @property
    def k(self) -> int:
        return len(self.s_idx)

    @property
    def m_rs(self) -> int:
        return len(self.rs_idx)

    @property
    def m_rr(self) -> int:
        return len(self.rr_idx)

    @property
    def r_idx(self) -> tuple[int, ...]:
        """Residual coordinates, proposal-sampled block first."""
        return self.rs_idx + self.rr_idx


@dataclass(frozen=True)
class LdssModel:
    """Model constants: dimension, AR coefficient, basis, noise variances.

    Immutable after construction; all simulation and filtering operations
    are pure functions of a model plus explicit noise or seeds.
    """

    m: int
    a: float
    b_mat: np.ndarray
    delta_nu: np.ndarray
    obs: Optional[SensorSpec] = None
    c0: np.ndarray = field(default=None)
    v0: np.ndarray = field(default=None)

    def __post_init__(self):
        b = np.asarray(self.b_mat, dtype=float)
        dn = np.asarray(self.delta_nu, dtype=float)
        object.__setattr__(self, "b_mat", b)
        object.__setattr__(self, "delta_nu", dn)
        if b.shape != (self.m, self.m):
            raise ValueError(f"B must be {self.m}x{self.m}, got {b.shape}")
        if np.abs(b.T @ b - np.eye(self.m)).max() > 1e-10:
            raise ValueError("B must be orthonormal (B'B = I to 1e-10)")
        if dn.shape != (self.m,):
            raise ValueError("delta_nu must have length M")
        # zero variances are allowed so degenerate (noise-free) dynamics can
        # be simulated; operations that divide by them check positivity
        if np.any(dn < 0):
            raise ValueError("delta_nu entries must be nonnegative")
        if not (0 < self.a <= 1):
            raise ValueError("AR coefficient must satisfy 0 < a <= 1")
        c0 = np.zeros(self.m) if self.c0 is None else np.asarray(self.c0, dtype=float)
        v0 = np.zeros(self.m) if self.v0 is None else np.asarray(self.v0, dtype=float)
        if c0.shape != (self.m,) or v0.shape != (self.m,):
            raise ValueError("C0 and v0 must have length M")
        object.__setattr__(self, "c0", c0)
        object.__setattr__(self, "v0", v0)


@dataclass
class Trajectory:
    """Simulated ground truth: states C[0..T], velocities v[0..T].

    observations[t-1] is the sensor record produced at state C[t]; entry
    None when the model carries no observation spec.
    """

    c: np.ndarray
    v: np.ndarray
    observations: Optional[list[Observation]]


def propagate_velocity(model: LdssModel, v_prev: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """One velocity step a*v_prev + noise; deterministic given the noise."""
    v_prev = np.asarray(v_prev, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if v_prev.shape != (model.m,) or noise.shape != (model.m,):
        raise ValueError("v_prev and noise must have length M")
    return model.a * v_prev + noise


def propagate_state(model: LdssModel, c_prev: np.ndarray, v_t: np.ndarray) -> np.ndarray:
    """One state step C_prev + B v_t."""
    c_prev = np.asarray(c_prev, dtype=float)
    v_t = np.asarray(v_t, dtype=float)
    if c_prev.shape != (model.m,) or v_t.shape != (model.m,):
        raise ValueError("c_prev and v_t must have length M")
    return c_prev + model.b_mat @ v_t


def simulate(model: LdssModel, t_steps: int, seed: int) -> Trajectory:
    """Simulate T steps of ground truth; bit-reproducible given the seed."""
    if t_steps < 1:
        raise ValueError("t_steps must be >= 1")
    rng = np.random.Generator(np.random.Philox(key=seed))
    m = model.m
    c = np.empty((t_steps + 1, m))
    v = np.empty((t_steps + 1, m))
    c[0] = model.c0
    v[0] = model.v0
    sd = np.sqrt(model.delta_nu)
    observations = [] if model.obs is not None else None
    for t in range(1, t_steps + 1):
        noise = sd * rng.standard_normal(m)
        v[t] = propagate_velocity(model, v[t - 1], noise)
        c[t] = propagate_state(model, c[t - 1], v[t])
        if model.obs is not None:
            observations.append(sample_observation(model.obs, c[t], rng))
    return Trajectory(c=c, v=v, observations=observations)
