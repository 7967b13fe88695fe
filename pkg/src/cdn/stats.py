"""Summary statistics and classical tests shared across the package."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy import stats as sps


class ParameterError(ValueError):
    """Invalid argument to a library routine."""


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, precision: np.ndarray, objective_trace: list[float]):
        super().__init__(message)
        self.precision = precision
        self.objective_trace = objective_trace


@dataclass
class SummaryStats:
    rho: np.ndarray
    cov: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    m: int


def summary_stats(D: np.ndarray) -> SummaryStats:
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2:
        raise ParameterError(f"expected a 2-D matrix, got shape {D.shape}")
    m = D.shape[0]
    if m < 2:
        raise ParameterError(f"need at least 2 samples, got {m}")
    mean = D.mean(axis=0)
    Xc = D - mean
    cov = Xc.T @ Xc / (m - 1)
    cov = (cov + cov.T) / 2
    var = np.clip(np.diag(cov).copy(), 0.0, None)
    return SummaryStats(correlation_from_cov(cov), cov, mean, var, m)


def correlation_from_cov(cov: np.ndarray) -> np.ndarray:
    """Pearson correlation; zero-variance columns get 0 off-diagonal, 1 on the diagonal."""
    sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    ok = sd > 0
    safe = np.where(ok, sd, 1.0)
    rho = cov / safe[:, None] / safe[None, :]
    rho[~ok, :] = 0.0
    rho[:, ~ok] = 0.0
    rho = np.clip(rho, -1.0, 1.0)
    np.fill_diagonal(rho, 1.0)
    return rho


# ---------------------------------------------------------------------------
# Conditional independence
# ---------------------------------------------------------------------------


@dataclass
class CITestResult:
    statistic: float
    p_value: float
    independent: bool
    degenerate: bool = False


def partial_correlation(corr: np.ndarray, i: int, j: int, S=()) -> float | None:
    """Partial correlation of i and j given S from a correlation (or covariance) matrix.

    Returns ``None`` when the submatrix over {i, j} + S is singular.
    """
    idx = [i, j, *S]
    sub = corr[np.ix_(idx, idx)]
    if len(idx) == 2:
        denom = sub[0, 0] * sub[1, 1]
        if denom <= 0:
            return None
        return float(sub[0, 1] / math.sqrt(denom))
    try:
        prec = np.linalg.inv(sub)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(prec)) or np.abs(prec).max() > 1e12:
        return None
    d = prec[0, 0] * prec[1, 1]
    if not d > 0:
        return None
    return float(-prec[0, 1] / math.sqrt(d))


def _check_ci_args(n_vars: int, m: int, i: int, j: int, S) -> None:
    if i == j:
        raise ParameterError("i and j must differ")
    if i in S or j in S:
        raise ParameterError("conditioning set must exclude i and j")
    for v in (i, j, *S):
        if not 0 <= v < n_vars:
            raise ParameterError(f"variable index {v} out of range")
    if len(S) > m - 4:
        raise ParameterError(f"|S|={len(S)} too large for m={m}")


def fisher_z_from_corr(corr: np.ndarray, m: int, i: int, j: int, S=(), alpha: float = 0.05) -> CITestResult:
    S = tuple(S)
    # a zero-variance column carries no dependence
    if corr[i, i] == 0 or corr[j, j] == 0:
        return CITestResult(0.0, 1.0, True)
    r = partial_correlation(corr, i, j, S)
    if r is None:
        return CITestResult(math.inf, 0.0, False, degenerate=True)
    r = min(max(r, -1.0), 1.0)
    if abs(r) >= 1.0:
        return CITestResult(math.inf, 0.0, False)
    stat = math.sqrt(m - len(S) - 3) * math.atanh(r)
    p = float(2.0 * special.ndtr(-abs(stat)))
    return CITestResult(stat, p, p > alpha)


def fisher_z_test(D: np.ndarray, i: int, j: int, S=(), alpha: float = 0.05) -> CITestResult:
    D = np.asarray(D, dtype=np.float64)
    S = tuple(S)
    _check_ci_args(D.shape[1], D.shape[0], i, j, S)
    idx = [i, j, *S]
    st = summary_stats(D[:, idx])
    return fisher_z_from_corr(st.rho, D.shape[0], 0, 1, tuple(range(2, len(idx))), alpha)


class FisherZ:
    """Memoized Fisher-z CI oracle bound to one dataset's correlation matrix."""

    def __init__(self, corr: np.ndarray, m: int, alpha: float = 0.05):
        self.corr = np.asarray(corr, dtype=np.float64)
        self.m = m
        self.alpha = alpha
        self._cache: dict[tuple, CITestResult] = {}

    def test(self, i: int, j: int, S=()) -> CITestResult:
        a, b = (i, j) if i < j else (j, i)
        key = (a, b, tuple(sorted(S)))
        res = self._cache.get(key)
        if res is None:
            res = fisher_z_from_corr(self.corr, self.m, a, b, key[2], self.alpha)
            self._cache[key] = res
        return res

    def __call__(self, i: int, j: int, S=()) -> bool:
        return self.test(i, j, S).independent


def gaussian_cmi(D: np.ndarray, x: int, y: int, S=()) -> tuple[float, bool]:
    """Gaussian plug-in CMI ``-0.5 ln(1 - r^2)`` in nats.

    Returns ``(value, degenerate)``; a singular conditioning covariance or
    |r| = 1 gives ``(inf, True)``.
    """
    D = np.asarray(D, dtype=np.float64)
    S = tuple(S)
    _check_ci_args(D.shape[1], D.shape[0], x, y, S)
    idx = [x, y, *S]
    st = summary_stats(D[:, idx])
    if st.var[0] == 0 or st.var[1] == 0:
        return 0.0, False
    r = partial_correlation(st.cov, 0, 1, tuple(range(2, len(idx))))
    if r is None or abs(r) >= 1.0 - 1e-15:
        return math.inf, True
    return cmi_from_partial_corr(r), False


def cmi_from_partial_corr(r: float) -> float:
    return max(0.0, -0.5 * math.log1p(-r * r))


# ---------------------------------------------------------------------------
# Two-sample testing
# ---------------------------------------------------------------------------


def rank_sum_pvalue(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sided Wilcoxon rank-sum p-value.

    Exact null distribution when the pooled sample has at most 25 items and
    no ties, tie-corrected normal approximation otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    pooled = np.concatenate([a, b])
    has_ties = np.unique(pooled).size < pooled.size
    method = "exact" if pooled.size <= 25 and not has_ties else "asymptotic"
    if np.all(pooled == pooled[0]):
        return 1.0
    res = sps.mannwhitneyu(a, b, alternative="two-sided", method=method, use_continuity=True)
    return float(min(1.0, res.pvalue))


def benjamini_hochberg(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0:
        return p.copy()
    return np.clip(sps.false_discovery_control(p, method="bh"), 0.0, 1.0)


def wilcoxon_bh(obs: np.ndarray, int_: np.ndarray) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    int_ = np.asarray(int_, dtype=np.float64)
    if obs.ndim != 2 or int_.ndim != 2 or obs.shape[1] != int_.shape[1]:
        raise ParameterError(f"column mismatch: {obs.shape} vs {int_.shape}")
    if obs.shape[0] == 0 or int_.shape[0] == 0:
        raise ParameterError("empty matrix")
    raw = np.array([rank_sum_pvalue(obs[:, v], int_[:, v]) for v in range(obs.shape[1])])
    return benjamini_hochberg(raw)


def log_fold_change(obs: np.ndarray, int_: np.ndarray) -> np.ndarray:
    """Mean difference per column; inputs are treated as already log-scale."""
    return np.asarray(int_, dtype=np.float64).mean(axis=0) - np.asarray(obs, dtype=np.float64).mean(axis=0)


# ---------------------------------------------------------------------------
# Graphical lasso
# ---------------------------------------------------------------------------


def glasso_objective(theta: np.ndarray, S: np.ndarray, lam: float) -> float:
    sign, logdet = np.linalg.slogdet(theta)
    if sign <= 0:
        return math.inf
    off = np.abs(theta).sum() - np.abs(np.diag(theta)).sum()
    return float(-logdet + np.sum(S * theta) + lam * off)


def _block_lasso(A: np.ndarray, b: np.ndarray, scale: float, lam: float, x: np.ndarray,
                 tol: float, max_iter: int = 10_000) -> np.ndarray:
    """Minimize ``scale * x'Ax + 2 b'x + 2 lam |x|_1`` by cyclic exact coordinate steps from ``x``."""
    x = x.copy()
    Ax = A @ x
    for _ in range(max_iter):
        delta = 0.0
        for k in range(len(x)):
            akk = scale * A[k, k]
            r = b[k] + scale * (Ax[k] - A[k, k] * x[k])
            new = -math.copysign(max(abs(r) - lam, 0.0), r) / akk
            d = new - x[k]
            if d != 0.0:
                Ax += A[:, k] * d
                x[k] = new
                delta = max(delta, abs(d))
        if delta < tol:
            break
    return x


@dataclass
class GlassoResult:
    precision: np.ndarray
    objective_trace: list[float]
    sweeps: int


def graphical_lasso(S: np.ndarray, lam: float, max_sweeps: int = 500, tol: float = 1e-8) -> GlassoResult:
    """Sparse precision estimate minimizing

    ``-log det(Theta) + tr(S Theta) + lam * sum_{i != j} |Theta_ij|``

    by exact block coordinate descent over columns. With the rest of Theta
    fixed, the optimal diagonal entry has a closed form and the off-diagonal
    column solves a lasso, so every column update lowers the objective.
    """
    S = np.asarray(S, dtype=np.float64)
    p = S.shape[0]
    if lam <= 0:
        raise ParameterError("lambda must be positive")
    diag = np.diag(S).copy()
    if np.any(diag <= 0):
        raise ParameterError("covariance diagonal must be positive")
    theta = np.diag(1.0 / diag)
    W = np.diag(diag)
    trace = [glasso_objective(theta, S, lam)]
    max_change = math.inf
    for sweep in range(1, max_sweeps + 1):
        max_change = 0.0
        for j in range(p):
            rest = np.r_[0:j, j + 1:p]
            w22 = W[j, j]
            w12 = W[rest, j]
            A = W[np.ix_(rest, rest)] - np.outer(w12, w12) / w22  # inverse of Theta without row/col j
            old = theta[rest, j].copy()
            t12 = _block_lasso(A, S[rest, j], S[j, j], lam, old, tol * 1e-2)
            c = 1.0 / S[j, j]
            At = A @ t12
            theta[rest, j] = theta[j, rest] = t12
            theta[j, j] = c + t12 @ At
            # block inverse with the new column
            W[np.ix_(rest, rest)] = A + np.outer(At, At) / c
            W[rest, j] = W[j, rest] = -At / c
            W[j, j] = 1.0 / c
            max_change = max(max_change, float(np.abs(t12 - old).max(initial=0.0)))
        trace.append(glasso_objective(theta, S, lam))
        if max_change < tol * max(1.0, np.abs(theta).max()):
            return GlassoResult(theta, trace, sweep)
    raise ConvergenceError(
        f"graphical lasso did not converge in {max_sweeps} sweeps (last change {max_change:.3g})", theta, trace
    )


def markov_boundary(D_joint: np.ndarray, lam: float = 0.05, max_sweeps: int = 500) -> list[int]:
    """Variables whose precision entry against the last (domain) column is nonzero."""
    D = np.asarray(D_joint, dtype=np.float64)
    if lam <= 0:
        raise ParameterError("lambda must be positive")
    st = summary_stats(D)
    keep = st.var > 0
    if not keep[-1]:
        return []
    idx = np.flatnonzero(keep)
    res = graphical_lasso(st.rho[np.ix_(idx, idx)], lam, max_sweeps=max_sweeps)
    col = res.precision[:-1, -1]
    return sorted(int(idx[k]) for k in np.flatnonzero(np.abs(col) > 1e-8))
