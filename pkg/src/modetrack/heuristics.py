"""Selection of the sampled ("multimodal") coordinates and related rules.

Conditioning on the right few velocity coordinates is what makes the
residual posterior unimodal. These heuristics pick them a priori from the
basis geometry and noise variances, or on the fly from disagreeing sensor
pairs, and estimate how often the observation likelihood is multimodal at
all.
"""
from __future__ import annotations

from itertools import combinations

import numpy as np
from scipy import stats

EXHAUSTIVE_LIMIT = 12


def choose_vts_single(b_mat: np.ndarray, delta_nu: np.ndarray, p0: int, k: int) -> tuple[int, ...]:
    """Sampled coordinates for a single suspected-multimodal node.

    Minimizing the conditional variance of C_{p0} given the sampled block
    amounts to keeping the K coordinates with the largest B[p0, k]^2 *
    delta_nu[k]. Ties break toward the lower index.
    """
    b_mat = np.asarray(b_mat, dtype=float)
    delta_nu = np.asarray(delta_nu, dtype=float)
    m = b_mat.shape[0]
    if not 1 <= k < m:
        raise ValueError("need 1 <= K < M")
    if not 0 <= p0 < m:
        raise ValueError("node index out of range")
    scores = b_mat[p0, :] ** 2 * delta_nu
    order = np.argsort(-scores, kind="stable")
    return tuple(sorted(int(i) for i in order[:k]))


def residual_variance(b_mat: np.ndarray, delta_nu: np.ndarray, p0: int, chosen) -> float:
    """Conditional variance of C_{p0}: sum over unchosen k of B[p0,k]^2 delta_nu[k]."""
    rest = [k for k in range(b_mat.shape[0]) if k not in set(chosen)]
    return float(np.sum(b_mat[p0, rest] ** 2 * np.asarray(delta_nu, dtype=float)[rest]))


def _spectral_radius(b_mat, delta_nu, p0_set, chosen):
    rest = [k for k in range(b_mat.shape[0]) if k not in set(chosen)]
    rows = b_mat[np.ix_(p0_set, rest)]
    mat = (rows * np.asarray(delta_nu, dtype=float)[rest]) @ rows.T
    return float(np.linalg.eigvalsh(mat)[-1]) if len(p0_set) else 0.0


def choose_vts_set(
    b_mat: np.ndarray, delta_nu: np.ndarray, p0: tuple[int, ...], k: int
) -> tuple[tuple[int, ...], bool]:
    """Sampled coordinates for a set of suspected nodes.

    Minimizes the spectral radius of the residual covariance block seen by
    the suspect nodes. Exhaustive over K-subsets up to M=12 (ties to the
    lexicographically smallest subset); greedy beyond that, flagged by the
    second return value.
    """
    b_mat = np.asarray(b_mat, dtype=float)
    delta_nu = np.asarray(delta_nu, dtype=float)
    m = b_mat.shape[0]
    p0 = tuple(sorted(set(int(p) for p in p0)))
    if not 1 <= k < m:
        raise ValueError("need 1 <= K < M")
    if any(not 0 <= p < m for p in p0) or not p0:
        raise ValueError("p0 must be a nonempty set of node indices")
    if m <= EXHAUSTIVE_LIMIT:
        best = None
        for subset in combinations(range(m), k):
            rho = _spectral_radius(b_mat, delta_nu, p0, subset)
            if best is None or rho < best[0] - 1e-15:
                best = (rho, subset)
        return best[1], False
    chosen: list[int] = []
    for _ in range(k):
        cands = [c for c in range(m) if c not in chosen]
        rhos = [_spectral_radius(b_mat, delta_nu, p0, chosen + [c]) for c in cands]
        chosen.append(cands[int(np.argmin(rhos))])
    return tuple(sorted(chosen)), True


def ol_multimodal_prob(alpha) -> float:
    """Probability that at least one sensor fails: 1 - prod(1 - alpha)."""
    alpha = np.asarray(alpha, dtype=float).ravel()
    if np.any(alpha < 0) or np.any(alpha > 1):
        raise ValueError("failure probabilities must lie in [0, 1]")
    return float(1.0 - np.prod(1.0 - alpha))


def default_onfly_threshold(n_nodes: int, family_fpr: float = 0.05) -> float:
    """Threshold on (Y1 - Y2)^2 / sigma^2 with a family false-positive rate.

    Under no failures the statistic at each node is 2 * chi-square(1), so
    the per-node level that keeps the probability of any node crossing at
    family_fpr is 1 - (1 - family_fpr)^(1/M).
    """
    if n_nodes < 1 or not 0 < family_fpr < 1:
        raise ValueError("need n_nodes >= 1 and family_fpr in (0, 1)")
    per_node = 1.0 - (1.0 - family_fpr) ** (1.0 / n_nodes)
    return float(2.0 * stats.chi2.isf(per_node, df=1))


def onfly_select(y: np.ndarray, sigma_obs2: np.ndarray, threshold: float | None = None):
    """Pick the node whose two sensors disagree the most, if any does.

    y: (M, 2) readings from two sensors per node. Returns the arg-max node
    of (Y1 - Y2)^2 / sigma^2 when the statistic reaches the threshold, else
    None (meaning: sample nothing this step). The default threshold is
    calibrated to a 5% family false-positive rate under no failures.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    sigma_obs2 = np.asarray(sigma_obs2, dtype=float)
    if y.shape[1] != 2:
        raise ValueError("on-the-fly selection needs exactly two sensors per node")
    if threshold is None:
        threshold = default_onfly_threshold(y.shape[0])
    stat = (y[:, 0] - y[:, 1]) ** 2 / sigma_obs2
    p0 = int(np.argmax(stat))
    if stat[p0] >= threshold:
        return p0
    return None
