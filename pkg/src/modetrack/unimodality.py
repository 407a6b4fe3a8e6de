"""Grid certifier for unimodality of the residual conditional posterior.

The conditional posterior over the residual coordinates is proportional to
exp(-L) with L = E + D, where E is the sensor energy through the residual
basis and D the Gaussian prior term. The certifier locates the largest
locally convex box around the prior mean f_r, classifies the complement into
per-coordinate regions (prior gradient opposing the energy gradient, or
energy gradient below a threshold eps0), and computes the variance bound

    delta_star = inf over the feasible region of max_p gamma_p,

with gamma_p = |v - f_r|_p / (eps0 + |grad E_p|) on opposing points and
|v - f_r|_p / (eps0 - |grad E_p|) on small-gradient points. The conditional
posterior is unimodal whenever max_p Delta_r_p < delta_star.

Gradients on the grid are finite differences of the tabulated energy, so a
numerically flat far field has exactly zero gradient; eps0 is tied to the
grid resolution for the same reason. The stationary-point counter is an
independent oracle built on analytic derivatives and Newton polishing.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from itertools import product
from typing import Optional

import numpy as np

from .ldss import eigen_basis
from .modefind import CondPosteriorSpec, neg_log_cond_posterior
from .sensors import energy_parts

MAX_RESIDUAL_DIM = 3


class CertificateError(RuntimeError):
    """Raised when a certificate precondition fails (e.g. no convex region)."""


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned evaluation grid over the residual coordinates."""

    lo: np.ndarray
    hi: np.ndarray
    n_points: np.ndarray
    max_points: int = 1_000_000

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        n = np.atleast_1d(np.asarray(self.n_points, dtype=int))
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "n_points", n)
        if not (lo.shape == hi.shape == n.shape):
            raise ValueError("lo, hi, n_points must have matching shapes")
        if np.any(lo >= hi):
            raise ValueError("grid needs lo < hi on every axis")
        if np.any(n < 21):
            raise ValueError("grid needs at least 21 points per axis")
        if int(np.prod(n)) > self.max_points:
            raise ValueError(f"grid size {int(np.prod(n))} exceeds cap {self.max_points}")

    @property
    def dim(self) -> int:
        return self.lo.size

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(self.lo[d], self.hi[d], self.n_points[d]) for d in range(self.dim)]

    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (self.n_points - 1)


def default_grid(spec: CondPosteriorSpec, delta_nu_max: float, n: int = 201) -> GridSpec:
    """Default box: f_r +/- 6 sqrt(max state-noise variance), n points per axis."""
    half = 6.0 * float(np.sqrt(max(delta_nu_max, 1e-12)))
    lo = spec.f_r - half
    hi = spec.f_r + half
    return GridSpec(lo=lo, hi=hi, n_points=np.full(spec.m_r, n))


@dataclass
class UnimodalityCertificate:
    """Output of the certifier for one conditional-posterior instance."""

    epsilon0: float
    rlc_lo: np.ndarray
    rlc_hi: np.ndarray
    region_minima: dict[str, float]
    delta_star: float
    certified: Optional[bool]
    condition2_ok: bool
    reason: str = ""
    grid_shape: tuple[int, ...] = ()
    box_truncated: bool = False
    sensitivity: list[tuple[float, float]] = field(default_factory=list)


def _grid_fields(spec: CondPosteriorSpec, grid: GridSpec):
    """Tabulate E on the mesh with finite-difference gradient and Hessian."""
    if spec.m_r != grid.dim:
        raise ValueError("grid dimension must match the residual dimension")
    if spec.m_r > MAX_RESIDUAL_DIM:
        raise ValueError(f"certifier supports residual dimension <= {MAX_RESIDUAL_DIM}")
    axes = grid.axes()
    mesh = np.meshgrid(*axes, indexing="ij")
    v = np.stack(mesh, axis=-1)                        # (*grid, M_r)
    c = spec.c_tilde + v @ spec.b_r.T                  # (*grid, M)
    e_vals, _, _ = energy_parts(spec.obs, spec.y, c, order=0)
    if not np.all(np.isfinite(e_vals)):
        raise CertificateError("energy is non-finite on the grid")
    grads = np.gradient(e_vals, *axes, edge_order=1) if grid.dim > 1 else [
        np.gradient(e_vals, axes[0], edge_order=1)
    ]
    g = np.stack(grads, axis=-1)                       # (*grid, M_r)
    dim = grid.dim
    hess = np.empty(e_vals.shape + (dim, dim))
    for i in range(dim):
        gi = np.gradient(g[..., i], *axes, edge_order=1) if dim > 1 else [
            np.gradient(g[..., i], axes[0], edge_order=1)
        ]
        for j in range(dim):
            hess[..., i, j] = gi[j]
    hess = 0.5 * (hess + np.swapaxes(hess, -1, -2))
    min_eig = np.linalg.eigvalsh(hess)[..., 0]
    return axes, v, g, min_eig


def _anchor_index(axes: list[np.ndarray], f_r: np.ndarray) -> list[int]:
    idx = []
    for d, ax in enumerate(axes):
        if not (ax[0] <= f_r[d] <= ax[-1]):
            raise CertificateError("f_r lies outside the grid box")
        idx.append(int(np.argmin(np.abs(ax - f_r[d]))))
    return idx


def _grow_box(ok: np.ndarray, anchor: list[int]):
    """Largest axis-aligned index box of convex points containing the anchor.

    Greedy face-by-face expansion in a fixed direction order, so the result
    is deterministic.
    """
    dim = ok.ndim
    lo = list(anchor)
    hi = list(anchor)
    if not ok[tuple(anchor)]:
        raise CertificateError("energy is not locally convex at f_r (condition 2 fails)")
    grew = True
    while grew:
        grew = False
        for d in range(dim):
            for sgn in (-1, 1):
                cand = lo[d] - 1 if sgn < 0 else hi[d] + 1
                if cand < 0 or cand >= ok.shape[d]:
                    continue
                slab = tuple(
                    cand if dd == d else slice(lo[dd], hi[dd] + 1) for dd in range(dim)
                )
                if ok[slab].all():
                    if sgn < 0:
                        lo[d] = cand
                    else:
                        hi[d] = cand
                    grew = True
    return lo, hi


def compute_rlc(spec: CondPosteriorSpec, grid: GridSpec):
    """Largest axis-aligned grid box around f_r where E is locally convex.

    Convexity is tested as the finite-difference Hessian having minimum
    eigenvalue >= -1e-10 at every grid point of the box. Raises
    CertificateError when f_r is not in a convex neighborhood.
    """
    axes, _, _, min_eig = _grid_fields(spec, grid)
    anchor = _anchor_index(axes, spec.f_r)
    ok = min_eig >= -1e-10
    lo, hi = _grow_box(ok, anchor)
    box_lo = np.array([axes[d][lo[d]] for d in range(grid.dim)])
    box_hi = np.array([axes[d][hi[d]] for d in range(grid.dim)])
    return box_lo, box_hi


def _region_masks(v, g, in_rlc, f_r, eps0):
    """Per-coordinate opposing-sign (A) and small-gradient (Z) masks."""
    comp = ~in_rlc
    dv = v - f_r
    prod = dv * g
    a_mask = comp[..., None] & (prod < 0)
    z_mask = comp[..., None] & (prod >= 0) & (np.abs(g) < eps0)
    return a_mask, z_mask, dv


def default_epsilon0(g: np.ndarray) -> float:
    """Grid-resolution threshold: twice the largest change of |grad E_p|
    between adjacent grid points. Large enough that a sign change of the
    gradient cannot jump the [-eps0, eps0] band within one cell."""
    dim = g.shape[-1]
    worst = 0.0
    for p in range(dim):
        ag = np.abs(g[..., p])
        for d in range(dim):
            diffs = np.abs(np.diff(ag, axis=d))
            if diffs.size:
                worst = max(worst, float(diffs.max()))
    return 2.0 * worst


def classify_regions(spec: CondPosteriorSpec, grid: GridSpec, epsilon0: float):
    """A_p / Z_p masks over grid points outside the convex box.

    A_p: the prior pull (v - f_r)_p opposes the energy gradient component.
    Z_p: same-or-zero sign and |grad E_p| < eps0. Masks are disjoint per p.
    """
    if epsilon0 <= 0:
        raise ValueError("epsilon0 must be positive")
    axes, v, g, min_eig = _grid_fields(spec, grid)
    anchor = _anchor_index(axes, spec.f_r)
    lo, hi = _grow_box(min_eig >= -1e-10, anchor)
    in_rlc = np.zeros(min_eig.shape, dtype=bool)
    in_rlc[tuple(slice(lo[d], hi[d] + 1) for d in range(grid.dim))] = True
    a_mask, z_mask, _ = _region_masks(v, g, in_rlc, spec.f_r, epsilon0)
    return a_mask, z_mask


def _region_key(bits: tuple[int, ...]) -> str:
    return "".join("Z" if b else "A" for b in bits)


def delta_star(
    spec: CondPosteriorSpec,
    grid: Optional[GridSpec] = None,
    epsilon0: Optional[float] = None,
    delta_r: Optional[np.ndarray] = None,
) -> UnimodalityCertificate:
    """Compute the variance bound delta_star and per-region minima.

    With an empty feasible region (energy convex everywhere it matters) the
    bound is +inf. When delta_r is given the certificate records whether
    max_p delta_r_p < delta_star.
    """
    if grid is None:
        grid = default_grid(spec, float(np.max(spec.delta_r)))
    axes, v, g, min_eig = _grid_fields(spec, grid)
    anchor = _anchor_index(axes, spec.f_r)
    dim = grid.dim
    try:
        lo, hi = _grow_box(min_eig >= -1e-10, anchor)
    except CertificateError as exc:
        return UnimodalityCertificate(
            epsilon0=float("nan"),
            rlc_lo=np.full(dim, np.nan),
            rlc_hi=np.full(dim, np.nan),
            region_minima={},
            delta_star=float("nan"),
            certified=False if delta_r is not None else None,
            condition2_ok=False,
            reason=str(exc),
            grid_shape=tuple(int(n) for n in grid.n_points),
        )
    in_rlc = np.zeros(min_eig.shape, dtype=bool)
    in_rlc[tuple(slice(lo[d], hi[d] + 1) for d in range(dim))] = True

    if epsilon0 is None:
        epsilon0 = default_epsilon0(g)
    eps_values = [float(epsilon0), 2.0 * float(epsilon0)]
    sensitivity = []
    main_minima: dict[str, float] = {}
    main_star = np.inf
    for k, eps in enumerate(eps_values):
        star, minima = _delta_star_at(v, g, in_rlc, spec.f_r, eps)
        sensitivity.append((eps, star))
        if k == 0:
            main_star, main_minima = star, minima

    rlc_lo = np.array([axes[d][lo[d]] for d in range(dim)])
    rlc_hi = np.array([axes[d][hi[d]] for d in range(dim)])
    truncated = np.isfinite(main_star) or any(
        lo[d] == 0 or hi[d] == grid.n_points[d] - 1 for d in range(dim)
    )
    certified = None
    if delta_r is not None:
        certified = bool(np.max(np.asarray(delta_r, dtype=float)) < main_star)
    return UnimodalityCertificate(
        epsilon0=float(epsilon0),
        rlc_lo=rlc_lo,
        rlc_hi=rlc_hi,
        region_minima=main_minima,
        delta_star=float(main_star),
        certified=certified,
        condition2_ok=True,
        grid_shape=tuple(int(n) for n in grid.n_points),
        box_truncated=bool(truncated),
        sensitivity=sensitivity,
    )


def _delta_star_at(v, g, in_rlc, f_r, eps0):
    a_mask, z_mask, dv = _region_masks(v, g, in_rlc, f_r, eps0)
    feasible = (a_mask | z_mask).all(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = np.where(
            a_mask,
            np.abs(dv) / (eps0 + np.abs(g)),
            np.where(z_mask, np.abs(dv) / np.maximum(eps0 - np.abs(g), 1e-300), np.inf),
        )
    worst = gamma.max(axis=-1)
    dim = dv.shape[-1]
    minima: dict[str, float] = {}
    star = np.inf
    for bits in product((0, 1), repeat=dim):
        sel = feasible.copy()
        for p, b in enumerate(bits):
            sel &= z_mask[..., p] if b else a_mask[..., p]
        val = float(worst[sel].min()) if sel.any() else np.inf
        minima[_region_key(bits)] = val
        star = min(star, val)
    return star, minima


def certify(delta_star_value: float, delta_r: np.ndarray) -> bool:
    """Sufficient condition: every residual prior variance is below the bound."""
    delta_r = np.asarray(delta_r, dtype=float)
    return bool(np.max(delta_r) < delta_star_value)


def nondiag_transform(spec: CondPosteriorSpec, sigma_r: np.ndarray):
    """Rotate a non-diagonal residual prior into certifier coordinates.

    For sigma_r = U diag(d) U', the rotated problem has residual basis
    B_r U, prior mean U' f_r and diagonal variances d; every downstream
    operation runs unchanged on it. Returns (rotated_spec, U).
    """
    sigma_r = np.asarray(sigma_r, dtype=float)
    if sigma_r.shape != (spec.m_r, spec.m_r):
        raise ValueError("sigma_r must be square with the residual dimension")
    u, d = eigen_basis(sigma_r)
    if np.any(d <= 0):
        raise ValueError("sigma_r must be positive definite")
    rotated = dataclasses.replace(
        spec,
        b_r=spec.b_r @ u,
        f_r=u.T @ spec.f_r,
        delta_r=d,
    )
    return rotated, u


@dataclass
class StationaryPoints:
    """Oracle output: polished stationary points of L inside the grid box."""

    points: np.ndarray        # (k, M_r)
    kinds: list[str]          # "minimum" | "maximum" | "saddle"
    grid_too_coarse: bool

    @property
    def count(self) -> int:
        return len(self.kinds)

    @property
    def n_minima(self) -> int:
        return sum(k == "minimum" for k in self.kinds)


def count_stationary_points(
    spec: CondPosteriorSpec,
    delta_r: np.ndarray,
    grid: Optional[GridSpec] = None,
) -> StationaryPoints:
    """Count stationary points of L on the grid box (1-D or 2-D oracle).

    Detects cells where every component of the analytic gradient changes
    sign, polishes each candidate with Newton iterations, classifies by the
    Hessian, and deduplicates. Flags the grid as too coarse when two
    distinct stationary points are separated by fewer than two cells.
    """
    delta_r = np.asarray(delta_r, dtype=float)
    work = dataclasses.replace(spec, delta_r=delta_r)
    if work.m_r > 2:
        raise ValueError("stationary-point oracle supports 1-D and 2-D residuals")
    if grid is None:
        grid = default_grid(work, float(np.max(delta_r)))
    axes = grid.axes()
    mesh = np.meshgrid(*axes, indexing="ij")
    v = np.stack(mesh, axis=-1)
    c = work.c_tilde + v @ work.b_r.T
    _, g_c, _ = energy_parts(work.obs, work.y, c, order=1)
    grad_l = g_c @ work.b_r + (v - work.f_r) / delta_r

    dim = grid.dim
    crosses = np.ones(tuple(n - 1 for n in grad_l.shape[:-1]), dtype=bool)
    for p in range(dim):
        comp = grad_l[..., p]
        if dim == 1:
            lo_val = np.minimum(comp[:-1], comp[1:])
            hi_val = np.maximum(comp[:-1], comp[1:])
        else:
            c00 = comp[:-1, :-1]
            c10 = comp[1:, :-1]
            c01 = comp[:-1, 1:]
            c11 = comp[1:, 1:]
            lo_val = np.minimum(np.minimum(c00, c10), np.minimum(c01, c11))
            hi_val = np.maximum(np.maximum(c00, c10), np.maximum(c01, c11))
        crosses &= (lo_val <= 0) & (hi_val >= 0)

    spacing = grid.spacing()
    roots: list[np.ndarray] = []
    kinds: list[str] = []
    for cell in np.argwhere(crosses):
        x0 = np.array([axes[d][cell[d]] + 0.5 * spacing[d] for d in range(dim)])
        root = _newton_polish(work, x0)
        if root is None:
            continue
        if np.any(root < grid.lo - spacing) or np.any(root > grid.hi + spacing):
            continue
        if any(np.all(np.abs(root - r) < 1e-5 * (grid.hi - grid.lo)) for r in roots):
            continue
        _, _, hess = neg_log_cond_posterior(work, root, order=2)
        evals = np.linalg.eigvalsh(hess)
        scale = max(np.abs(evals).max(), 1e-12)
        if evals.min() > 1e-8 * scale:
            kind = "minimum"
        elif evals.max() < -1e-8 * scale:
            kind = "maximum"
        else:
            kind = "saddle"
        roots.append(root)
        kinds.append(kind)

    too_coarse = False
    for i in range(len(roots)):
        for j in range(i + 1, len(roots)):
            if np.all(np.abs(roots[i] - roots[j]) < 2 * spacing):
                too_coarse = True
    pts = np.array(roots) if roots else np.empty((0, dim))
    return StationaryPoints(points=pts, kinds=kinds, grid_too_coarse=too_coarse)


def _newton_polish(spec: CondPosteriorSpec, x0: np.ndarray, tol: float = 1e-10):
    """Newton iteration on grad L = 0; returns None if it fails to settle."""
    x = np.array(x0, dtype=float)
    for _ in range(60):
        _, grad, hess = neg_log_cond_posterior(spec, x, order=2)
        if not np.all(np.isfinite(grad)):
            return None
        if np.abs(grad).max() < tol:
            return x
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(step)):
            return None
        # damp very large steps so the polish stays near its cell
        norm = np.abs(step).max()
        if norm > 1.0:
            step = step / norm
        x = x - step
    return None
