"""Ranking metrics and the benchmark harness.

Tie policy: tied scores share the mean 1-based position of their group for
rank-type metrics. For average precision a positive inside a tie group gets
the precision measured at the end of that group, so ties never help.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import stats as sps

from .corpus import Corpus, RegimeRecord

logger = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise MetricError(f"scores {s.shape} and labels {y.shape} must be equal-length vectors")
    return s, y


def average_precision(scores, labels) -> float:
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("average precision needs at least one positive label")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # end index (exclusive) of each item's tie group
    _, start, counts = np.unique(-s, return_index=True, return_counts=True)
    group_end = np.repeat(start + counts, counts)
    hits = np.cumsum(y)
    prec = hits[group_end - 1] / group_end
    return float(prec[y].sum() / n_pos)


def auroc(scores, labels) -> float:
    s, y = _check(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both positive and negative labels")
    ranks = sps.rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def regime_auroc(scores, labels) -> float:
    """AUC, or NaN when every candidate is a target (no negatives to rank against)."""
    y = np.asarray(labels).astype(bool)
    return math.nan if y.all() else auroc(scores, labels)


def positions(scores) -> np.ndarray:
    """1-based descending positions; ties take the mean position of their group."""
    s = np.asarray(scores, dtype=np.float64)
    return sps.rankdata(-s)


def normalized_rank(scores, target_index: int) -> float:
    s = np.asarray(scores, dtype=np.float64)
    C = s.shape[0]
    if C < 2:
        raise MetricError("normalized rank needs at least two candidates")
    pos = positions(s)[target_index]
    return float((C - pos) / (C - 1))


@dataclass
class RegimeResult:
    dataset: str
    regime: int
    targets: tuple[int, ...]
    scores: np.ndarray
    method: str
    seconds: float
    family: str = ""
    intervention: str = ""

    def labels(self) -> np.ndarray:
        y = np.zeros(len(self.scores), dtype=bool)
        y[list(self.targets)] = True
        return y

    def target_positions(self) -> np.ndarray:
        return positions(self.scores)[list(self.targets)]


def default_grid(n: int = 101) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


def recall_curve(results: Sequence[RegimeResult], grid: Iterable[float] | None = None) -> list[tuple[float, float]]:
    """Fraction of (regime, target) pairs found within the top ``ceil(p*C)`` candidates."""
    if not results:
        raise MetricError("recall curve needs at least one result")
    grid = default_grid() if grid is None else np.asarray(list(grid), dtype=np.float64)
    pos, C = [], []
    for r in results:
        tp = r.target_positions()
        pos.extend(tp)
        C.extend([len(r.scores)] * len(tp))
    pos, C = np.asarray(pos), np.asarray(C)
    # guard against float noise in p*C landing just above an integer
    return [(float(p), float(np.mean(pos <= np.ceil(p * C - 1e-9)))) for p in grid]


def curve_integral(curve: Sequence[tuple[float, float]]) -> float:
    p = np.array([c[0] for c in curve])
    r = np.array([c[1] for c in curve])
    return float(np.trapezoid(r, p))


def mean_normalized_rank(results: Sequence[RegimeResult]) -> float:
    vals = [normalized_rank(r.scores, t) for r in results for t in r.targets]
    return float(np.mean(vals))


def effect_correlation(pred_effect, true_effect) -> tuple[float, float]:
    """(Spearman, Pearson); NaN when either input is constant."""
    a = np.asarray(pred_effect, dtype=np.float64)
    b = np.asarray(true_effect, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 3:
        raise MetricError("effect vectors must be equal-length with at least 3 entries")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return math.nan, math.nan
    return float(sps.spearmanr(a, b).statistic), float(sps.pearsonr(a, b).statistic)


# ---------------------------------------------------------------------------
# Harness
# ---------------------------------------------------------------------------

Scorer = Callable[[RegimeRecord], np.ndarray]


@dataclass
class GroupMetrics:
    family: str
    intervention: str
    n_targets: int
    count: int
    mAP: float
    AUC: float
    mean_rank: float


@dataclass
class Report:
    method: str
    aggregation: str
    groups: list[GroupMetrics]
    mean_rank: float
    recall: list[tuple[float, float]]
    runtime: dict
    n_regimes: int
    n_failed: int = 0
    failures: list[dict] = field(default_factory=list)

    def group(self, family: str, intervention: str, n_targets: int | None = None) -> dict:
        """Metrics pooled over target counts when ``n_targets`` is None (regime-weighted)."""
        sel = [g for g in self.groups if g.family == family and g.intervention == intervention
               and (n_targets is None or g.n_targets == n_targets)]
        if not sel:
            raise KeyError((family, intervention, n_targets))
        w = np.array([g.count for g in sel], dtype=float)
        out = {}
        for k in ("mAP", "AUC", "mean_rank"):
            v = np.array([getattr(g, k) for g in sel])
            ok = ~np.isnan(v)
            out[k] = float(np.average(v[ok], weights=w[ok])) if ok.any() else math.nan
        return out

    def to_json(self) -> dict:
        return asdict(self)


def runtime_stats(seconds: Sequence[float]) -> dict:
    a = np.asarray(seconds, dtype=np.float64)
    if a.size == 0:
        return {"min": math.nan, "max": math.nan, "mean": math.nan, "std": math.nan}
    return {"min": float(a.min()), "max": float(a.max()), "mean": float(a.mean()), "std": float(a.std())}


def aggregate(results: Sequence[RegimeResult], method: str, aggregation: str = "per-regime",
              grid: Iterable[float] | None = None) -> Report:
    if aggregation not in ("per-regime", "pooled"):
        raise MetricError(f"unknown aggregation {aggregation!r}")
    buckets: dict[tuple, list[RegimeResult]] = defaultdict(list)
    for r in results:
        buckets[(r.family, r.intervention, len(r.targets))].append(r)
    groups = []
    for key in sorted(buckets):
        rs = buckets[key]
        if aggregation == "per-regime":
            ap = float(np.mean([average_precision(r.scores, r.labels()) for r in rs]))
            aucs = [regime_auroc(r.scores, r.labels()) for r in rs]
            auc = float(np.nanmean(aucs)) if not np.all(np.isnan(aucs)) else math.nan
        else:
            s = np.concatenate([r.scores for r in rs])
            y = np.concatenate([r.labels() for r in rs])
            ap, auc = average_precision(s, y), regime_auroc(s, y)
        groups.append(GroupMetrics(*key, len(rs), ap, auc, mean_normalized_rank(rs)))
    return Report(
        method=method,
        aggregation=aggregation,
        groups=groups,
        mean_rank=mean_normalized_rank(results) if results else math.nan,
        recall=recall_curve(results, grid) if results else [],
        runtime=runtime_stats([r.seconds for r in results]),
        n_regimes=len(results),
    )


def run_scorer(scorer: Scorer, regimes: Iterable[RegimeRecord], method: str) -> tuple[list[RegimeResult], list[dict]]:
    results, failures = [], []
    for reg in regimes:
        ds = reg.dataset
        t0 = time.perf_counter()
        try:
            scores = np.asarray(scorer(reg), dtype=np.float64)
            if scores.shape != (ds.n,) or not np.all(np.isfinite(scores)):
                raise MetricError(f"scorer returned invalid scores of shape {scores.shape}")
        except Exception as exc:  # a failing regime is recorded and skipped
            logger.warning("%s %s regime %d failed: %s", method, ds.id, reg.index, exc)
            failures.append({"dataset": ds.id, "regime": reg.index, "error": str(exc)})
            continue
        results.append(RegimeResult(ds.id, reg.index, tuple(reg.targets), scores, method,
                                    time.perf_counter() - t0, ds.family, ds.intervention))
    return results, failures


def evaluate_suite(scorer: Scorer, corpus: Corpus, method: str, grid: Iterable[float] | None = None,
                   aggregation: str = "per-regime", datasets: Sequence[str] | None = None) -> tuple[Report, list[RegimeResult]]:
    chosen = [d for d in corpus.datasets if datasets is None or d.id in set(datasets)]
    regimes = (reg for d in chosen for reg in d.regimes)
    results, failures = run_scorer(scorer, regimes, method)
    report = aggregate(results, method, aggregation, grid)
    report.n_failed = len(failures)
    report.failures = failures
    return report, results


def write_outputs(report: Report, results: Sequence[RegimeResult], report_path: str | Path) -> None:
    """report.json plus per_regime.csv and recall_curve.csv next to it."""
    rp = Path(report_path)
    rp.parent.mkdir(parents=True, exist_ok=True)
    rp.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    with open(rp.parent / "per_regime.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "regime", "method", "mAP", "AUC", "rank", "seconds"])
        for r in results:
            y = r.labels()
            rank = np.mean([normalized_rank(r.scores, t) for t in r.targets])
            w.writerow([r.dataset, r.regime, r.method, f"{average_precision(r.scores, y):.6f}",
                        f"{regime_auroc(r.scores, y):.6f}", f"{rank:.6f}", f"{r.seconds:.6f}"])
    with open(rp.parent / "recall_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["p", "recall"])
        for p, rec in report.recall:
            w.writerow([f"{p:.6f}", f"{rec:.6f}"])
