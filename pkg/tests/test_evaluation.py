import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cdn.corpus import Corpus
from cdn.evaluation import (
    MetricError,
    RegimeResult,
    aggregate,
    auroc,
    average_precision,
    curve_integral,
    default_grid,
    effect_correlation,
    evaluate_suite,
    mean_normalized_rank,
    normalized_rank,
    recall_curve,
    write_outputs,
)
from cdn.scm_sim import CorpusConfig, generate_corpus

from oracles import ap_bruteforce, auc_bruteforce, expected_ap_no_ties

# small integer grids make ties common
scored = st.integers(2, 12).flatmap(
    lambda n: st.tuples(hnp.arrays(np.float64, n, elements=st.integers(0, 4).map(float)),
                        hnp.arrays(np.bool_, n)))


class TestAveragePrecision:
    def test_examples(self):
        assert average_precision([0.9, 0.1, 0.8], [1, 0, 0]) == 1.0
        assert abs(average_precision([0.9, 0.8, 0.1], [0, 1, 1]) - (1 / 2 + 2 / 3) / 2) < 1e-15
        assert average_precision([0.3, 0.2, 0.1], [1, 1, 1]) == 1.0

    def test_no_positive(self):
        with pytest.raises(MetricError):
            average_precision([0.1, 0.2], [0, 0])

    def test_random_instances(self, rng):
        for _ in range(100):
            n = rng.integers(2, 13)
            s = rng.integers(0, 5, n).astype(float)
            y = rng.random(n) < 0.4
            y[rng.integers(n)] = True
            assert abs(average_precision(s, y) - ap_bruteforce(s, y)) < 1e-12

    @given(scored)
    def test_matches_bruteforce(self, case):
        s, y = case
        if y.any():
            assert abs(average_precision(s, y) - ap_bruteforce(s, y)) < 1e-12

    def test_no_ties_standard(self, rng):
        for _ in range(20):
            s, y = rng.random(9), rng.random(9) < 0.5
            y[0] = True
            assert abs(average_precision(s, y) - expected_ap_no_ties(s, y)) < 1e-12


class TestAuroc:
    def test_examples(self):
        assert auroc([0.9, 0.8, 0.1, 0.05], [1, 1, 0, 0]) == 1.0
        assert auroc([0.9, 0.8, 0.1], [1, 0, 1]) == 0.5

    def test_single_class(self):
        with pytest.raises(MetricError):
            auroc([0.1, 0.2], [1, 1])

    def test_random_instances(self, rng):
        for _ in range(100):
            n = rng.integers(2, 13)
            s = rng.integers(0, 5, n).astype(float)
            y = rng.random(n) < 0.5
            y[0], y[1] = True, False
            assert abs(auroc(s, y) - auc_bruteforce(s, y)) < 1e-12

    def test_null_is_half(self, rng):
        s, y = rng.random(20_000), rng.random(20_000) < 0.3
        assert abs(auroc(s, y) - 0.5) < 0.02


class TestRank:
    def test_examples(self):
        assert normalized_rank([0.9, 0.1, 0.5], 0) == 1.0
        assert normalized_rank([0.9, 0.1, 0.5], 1) == 0.0
        assert normalized_rank([0.9, 0.1, 0.5], 2) == 0.5

    def test_tie_takes_mean_position(self):
        assert normalized_rank([0.5, 0.5, 0.1], 0) == 0.75

    def test_too_few(self):
        with pytest.raises(MetricError):
            normalized_rank([1.0], 0)


def result(scores, targets, **kw):
    return RegimeResult("d", 0, tuple(targets), np.asarray(scores, float), "m", 0.0, **kw)


class TestRecall:
    def test_step_function(self):
        r = result([10.0] + list(range(9)), [0])
        curve = dict(recall_curve([r]))
        assert curve[1.0] == 1.0
        assert all(v == 1.0 for p, v in curve.items() if p >= 0.1 - 1e-12)
        assert curve[0.0] == 0.0

    def test_integral_matches_rank(self, rng):
        res = [result(rng.random(10), rng.choice(10, rng.integers(1, 4), replace=False)) for _ in range(200)]
        curve = recall_curve(res, default_grid(1001))
        assert abs(curve_integral(curve) - mean_normalized_rank(res)) <= 1 / 10

    # integer scores keep the transform exactly order-preserving in floating point
    @given(st.lists(hnp.arrays(np.float64, 6, elements=st.integers(-50, 50).map(float)), min_size=1, max_size=5))
    def test_monotone_invariance(self, arrays):
        res = [result(a, [0, 3]) for a in arrays]
        moved = [result(a**3 + 2 * a + 7, [0, 3]) for a in arrays]
        assert recall_curve(res) == recall_curve(moved)
        assert mean_normalized_rank(res) == mean_normalized_rank(moved)
        for a, b in zip(res, moved):
            assert average_precision(a.scores, a.labels()) == average_precision(b.scores, b.labels())
            assert auroc(a.scores, a.labels()) == auroc(b.scores, b.labels())


class TestEffectCorrelation:
    def test_examples(self):
        a = np.array([1.0, 2.0, 3.0, 5.0])
        assert effect_correlation(a, a) == pytest.approx((1.0, 1.0))
        assert effect_correlation(a, -a) == pytest.approx((-1.0, -1.0))
        sp, pe = effect_correlation([1, 2, 3], [1, 4, 9])
        x, y = np.array([1, 2, 3.0]), np.array([1, 4, 9.0])
        direct = ((x - x.mean()) * (y - y.mean())).sum() / np.sqrt(((x - x.mean()) ** 2).sum() * ((y - y.mean()) ** 2).sum())
        assert sp == pytest.approx(1.0) and pe == pytest.approx(direct, abs=1e-12)
        assert abs(pe - 0.9897) < 1e-4

    def test_constant(self):
        assert all(math.isnan(v) for v in effect_correlation([1, 1, 1], [1, 2, 3]))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("evalcorpus")
    generate_corpus(CorpusConfig(node_counts=[10], datasets_per_config=10, m_obs=20, m_int=20, seed=3), root)
    return Corpus(root)


class TestSuite:
    def test_oracle_scorer(self, corpus):
        report, results = evaluate_suite(lambda reg: reg.target_mask(), corpus, "oracle")
        assert report.n_failed == 0 and report.n_regimes == sum(len(d.regimes) for d in corpus.datasets)
        for g in report.groups:
            assert g.mAP == 1.0 and g.AUC == 1.0
        assert report.mean_rank > 0.9

    def test_group_accounting(self, corpus):
        report, _ = evaluate_suite(lambda reg: reg.target_mask(), corpus, "oracle")
        counts = {g.n_targets: g.count for g in report.groups}
        assert counts == {1: 100, 2: 100, 3: 100}

    def test_random_scorer(self, corpus):
        rng = np.random.default_rng(0)
        report, _ = evaluate_suite(lambda reg: rng.random(reg.dataset.n), corpus, "random")
        assert abs(report.group("linear", "hard", 1)["AUC"] - 0.5) <= 0.05

    def test_failures_are_recorded(self, corpus, tmp_path):
        def flaky(reg):
            if reg.index == 0:
                raise RuntimeError("boom")
            return reg.target_mask()

        report, results = evaluate_suite(flaky, corpus, "flaky")
        assert report.n_failed == len(corpus) and report.failures[0]["error"] == "boom"
        write_outputs(report, results, tmp_path / "out" / "report.json")
        doc = json.loads((tmp_path / "out" / "report.json").read_text())
        assert doc["n_failed"] == len(corpus)
        with open(tmp_path / "out" / "per_regime.csv") as fh:
            assert len(list(csv.reader(fh))) == len(results) + 1
        with open(tmp_path / "out" / "recall_curve.csv") as fh:
            assert len(list(csv.reader(fh))) == 102

    def test_pooled(self, corpus):
        report, _ = evaluate_suite(lambda reg: reg.target_mask(), corpus, "oracle", aggregation="pooled")
        assert all(g.mAP == 1.0 for g in report.groups)
        with pytest.raises(MetricError):
            aggregate([], "x", "mean")

    def test_all_targets_regime(self):
        rep = aggregate([result([0.3, 0.2], [0, 1], family="f", intervention="hard"),
                         result([0.3, 0.2, 0.1], [1], family="f", intervention="hard")], "m")
        g = rep.group("f", "hard")
        # the all-target regime has no AUC and drops out of that average only
        assert g["AUC"] == 0.5 and g["mAP"] == pytest.approx(0.75)
