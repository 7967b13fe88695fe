"""Comparison scorers: analytic graph/moment detectors, MB+CI and DGE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .stats import ParameterError, SummaryStats, gaussian_cmi, log_fold_change, markov_boundary, summary_stats, wilcoxon_bh


@dataclass
class NodeScores:
    scores: np.ndarray
    method: str

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(self.scores)):
            raise ValueError(f"{self.method}: non-finite scores")

    def __len__(self) -> int:
        return len(self.scores)


def analytic_hard_detector(adj_obs: np.ndarray, adj_int: np.ndarray) -> NodeScores:
    """Per node, the number of incoming edges present in ``adj_obs`` but not in ``adj_int``."""
    a = np.asarray(adj_obs, dtype=np.int64)
    b = np.asarray(adj_int, dtype=np.int64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ParameterError(f"adjacency shapes differ or are not square: {a.shape} vs {b.shape}")
    return NodeScores((np.clip(a - b, 0, None) != 0).sum(axis=0), "analytic-hard")


def analytic_soft_detector(stats_obs: SummaryStats, stats_int: SummaryStats, eps_r, eps_s) -> NodeScores:
    """Per node i, count j (including i) where the covariance moved by more than
    ``eps_s`` while the correlation moved by less than ``eps_r``.

    Both thresholds may be scalars or N x N arrays.
    """
    if stats_obs.cov.shape != stats_int.cov.shape:
        raise ParameterError(f"shape mismatch: {stats_obs.cov.shape} vs {stats_int.cov.shape}")
    if np.any(np.asarray(eps_r) <= 0) or np.any(np.asarray(eps_s) <= 0):
        raise ParameterError("thresholds must be positive")
    d_cov = np.abs(stats_int.cov - stats_obs.cov)
    d_rho = np.abs(stats_int.rho - stats_obs.rho)
    hit = (d_cov > eps_s) & (d_rho < eps_r)
    return NodeScores(hit.sum(axis=1), "analytic-soft")


def bootstrap_cov_se(D: np.ndarray, B: int = 50, seed: int = 0) -> np.ndarray:
    """Entrywise bootstrap standard error of the sample covariance."""
    D = np.asarray(D, dtype=np.float64)
    rng = np.random.default_rng(seed)
    m = D.shape[0]
    draws = np.stack([np.cov(D[rng.integers(0, m, m)], rowvar=False) for _ in range(B)])
    return draws.std(axis=0, ddof=1)


def default_soft_thresholds(obs: np.ndarray, int_: np.ndarray, B: int = 50, seed: int = 0) -> tuple[float, np.ndarray]:
    """``eps_r = 3 / sqrt(min(M_obs, M_int))`` and ``eps_s = 3 * SE(delta cov)`` per entry."""
    m = min(obs.shape[0], int_.shape[0])
    eps_r = 3.0 / np.sqrt(m)
    s_obs, s_int = np.random.SeedSequence(seed).spawn(2)
    se = np.sqrt(bootstrap_cov_se(obs, B, s_obs) ** 2 + bootstrap_cov_se(int_, B, s_int) ** 2)
    # a constant column pair has zero spread; keep the threshold positive
    return eps_r, 3.0 * np.maximum(se, 1e-12)


def soft_scores(obs: np.ndarray, int_: np.ndarray, B: int = 50, seed: int = 0) -> NodeScores:
    eps_r, eps_s = default_soft_thresholds(obs, int_, B, seed)
    return analytic_soft_detector(summary_stats(obs), summary_stats(int_), eps_r, eps_s)


def joint_with_domain(obs: np.ndarray, int_: np.ndarray) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    int_ = np.asarray(int_, dtype=np.float64)
    if obs.ndim != 2 or int_.ndim != 2 or obs.shape[1] != int_.shape[1]:
        raise ParameterError(f"column mismatch: {obs.shape} vs {int_.shape}")
    dom = np.concatenate([np.zeros(obs.shape[0]), np.ones(int_.shape[0])])
    return np.column_stack([np.vstack([obs, int_]), dom])


def mb_ci_scores(obs: np.ndarray, int_: np.ndarray, lam: float = 0.05) -> NodeScores:
    """Markov boundary of the domain indicator, each member scored by its
    conditional mutual information with the domain given the rest of the boundary."""
    D = joint_with_domain(obs, int_)
    dom = D.shape[1] - 1
    boundary = markov_boundary(D, lam)
    scores = np.zeros(dom)
    for v in boundary:
        rest = [u for u in boundary if u != v]
        val, degenerate = gaussian_cmi(D, dom, v, rest)
        # a deterministic dependence is the strongest possible signal
        scores[v] = val if np.isfinite(val) else 1e6
    return NodeScores(scores, "mbci")


def dge_scores(obs: np.ndarray, int_: np.ndarray) -> NodeScores:
    """``-log10`` of the BH-adjusted rank-sum p-value; tied values are ordered
    by absolute mean shift through an offset smaller than any gap between
    distinct p-value levels."""
    p = wilcoxon_bh(obs, int_)
    base = -np.log10(np.clip(p, 1e-300, 1.0))
    base = np.where(base == 0, 0.0, base)  # drop -0.0
    lfc = np.abs(log_fold_change(obs, int_))
    levels = np.unique(base)
    gap = np.diff(levels).min() if levels.size > 1 else 1.0
    delta = min(0.5 * gap, 1e-6)
    tiebreak = lfc / (1.0 + lfc)  # in [0, 1)
    return NodeScores(base + delta * tiebreak, "dge")


METHODS = ("mbci", "dge", "analytic-hard", "analytic-soft")
