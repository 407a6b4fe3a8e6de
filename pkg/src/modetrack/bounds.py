"""Tail bounds for the mode-tracking approximation and the dimension chooser.

Replacing a Gaussian proposal draw by its mean is justified when the draw
would have been close to the mean with high probability. Three published
bounds quantify this for an error vector e with per-direction variances at
most delta_m (or spectrum lambda):

  * a Vysochanskij-Petunin bound on the max norm,
  * a Chernoff bound on the Euclidean norm,
  * a trace-budget bound via the union bound plus Vysochanskij-Petunin.

All are exposed side by side; they carry different constants for the same
qualitative guarantee and no single one is canonical.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NORM_MAX = "max"
NORM_EUCLIDEAN = "euclidean"


@dataclass(frozen=True)
class BoundQuery:
    """Inputs for one tail-bound evaluation.

    eps: error radius; eps2: probability budget; m_rr: mode-tracked
    dimension; delta_m: largest per-direction variance (or largest proposal
    eigenvalue for the online form); norm: which error norm the bound
    controls.
    """

    eps: float
    m_rr: int
    delta_m: float
    eps2: float = 0.05
    norm: str = NORM_MAX

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < self.eps2 < 1:
            raise ValueError("eps2 must lie in (0, 1)")
        if self.m_rr < 1:
            raise ValueError("m_rr must be at least 1")
        if self.delta_m <= 0:
            raise ValueError("delta_m must be positive")
        if self.norm not in (NORM_MAX, NORM_EUCLIDEAN):
            raise ValueError(f"unknown norm {self.norm!r}")


def kappa(x: float) -> float:
    """Piecewise Vysochanskij-Petunin/Chebyshev constant: 4x/9 below 3/8, else x."""
    if x < 0:
        raise ValueError("kappa is defined for nonnegative arguments")
    return 4.0 * x / 9.0 if x < 0.375 else float(x)


def vp_tail_bound(q: BoundQuery) -> float:
    """Max-norm tail bound 1 - [1 - min(1, kappa(m_rr delta_m / eps^2))]^m_rr."""
    if q.norm != NORM_MAX:
        raise ValueError("the Vysochanskij-Petunin bound controls the max norm")
    ratio = q.m_rr * q.delta_m / (q.eps * q.eps)
    per_coord = min(1.0, kappa(ratio))
    value = 1.0 - (1.0 - per_coord) ** q.m_rr
    return float(min(max(value, 0.0), 1.0))


def chernoff_tail_bound(q: BoundQuery) -> float:
    """Euclidean-norm Chernoff bound [rho e^{-(rho - 1)}]^{m_rr / 2}.

    rho = eps^2 / (m_rr delta_m). The optimizing exponent is positive only
    for rho > 1; below that the bound is vacuous and clamps to 1.
    """
    if q.norm != NORM_EUCLIDEAN:
        raise ValueError("the Chernoff bound controls the Euclidean norm")
    rho = q.eps * q.eps / (q.m_rr * q.delta_m)
    if rho <= 1.0:
        return 1.0
    value = (rho * np.exp(-(rho - 1.0))) ** (0.5 * q.m_rr)
    return float(min(max(value, 0.0), 1.0))


def trace_threshold(eps1: float, eps2: float, m: int) -> float:
    """Trace budget eps1^2 eps2 / M guaranteeing Pr(||e|| > eps1) < eps2."""
    if eps1 <= 0 or not 0 < eps2 < 1 or m < 1:
        raise ValueError("need eps1 > 0, eps2 in (0, 1), m >= 1")
    return eps1 * eps1 * eps2 / m


def trace_tail_bound(trace: float, eps1: float, m: int) -> float:
    """Exact bound form 4 M trace / (9 eps1^2), clamped to [0, 1]."""
    if trace < 0 or eps1 <= 0 or m < 1:
        raise ValueError("need trace >= 0, eps1 > 0, m >= 1")
    return float(min(1.0, 4.0 * m * trace / (9.0 * eps1 * eps1)))


MODE_OFFLINE = "offline"
MODE_ONLINE = "online"


def choose_mrr(
    delta_nu_r: np.ndarray,
    eps: float,
    eps2: float,
    mode: str = MODE_OFFLINE,
    lambda_spectrum: np.ndarray | None = None,
) -> tuple[int, tuple[int, ...]]:
    """Largest mode-tracked dimension whose tail bound stays below eps2.

    Starts from the full residual dimension and shrinks: at each candidate
    size the coordinates with the smallest prior variances are tracked, and
    the max-norm bound is evaluated with delta_m = largest tracked variance
    (offline) or the matching largest proposal eigenvalue (online, from
    lambda_spectrum). Returns (m_rr, tracked coordinate indices); (0, ())
    when even one tracked coordinate violates the budget.
    """
    variances = np.asarray(delta_nu_r, dtype=float)
    if variances.ndim != 1 or variances.size == 0 or np.any(variances <= 0):
        raise ValueError("delta_nu_r must be a vector of positive variances")
    if mode not in (MODE_OFFLINE, MODE_ONLINE):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == MODE_ONLINE:
        if lambda_spectrum is None:
            raise ValueError("online mode needs the proposal eigenvalue spectrum")
        spectrum = np.sort(np.asarray(lambda_spectrum, dtype=float))
        if spectrum.size != variances.size or np.any(spectrum <= 0):
            raise ValueError("lambda_spectrum must be positive with one entry per coordinate")
    order = np.argsort(variances, kind="stable")
    m_r = variances.size
    for m_rr in range(m_r, 0, -1):
        chosen = order[:m_rr]
        if mode == MODE_OFFLINE:
            delta_m = float(variances[chosen].max())
        else:
            delta_m = float(spectrum[:m_rr].max())
        bound = vp_tail_bound(BoundQuery(eps=eps, m_rr=m_rr, delta_m=delta_m, eps2=eps2))
        if bound < eps2:
            return m_rr, tuple(int(i) for i in np.sort(chosen))
    return 0, ()
