import math

import numpy as np
import pytest

from oracles import cox_partial_loglik_direct
from railhaz.errors import DataError, SingularInformationError, ValidationError
from railhaz.inference import lr_test
from railhaz.ingest import SectionRecord
from railhaz.simgen import BaselineHazard, CovariateSpec, SimConfig, simulate_cox
from railhaz.survival import (
    CoxDataset,
    CoxFit,
    StepFunction,
    fit_cox,
    partial_loglik,
    predict_survival,
    score_and_information,
)


def dataset(entry, exit, event, X, strata=None, trains=None):
    n = len(entry)
    return CoxDataset(
        np.array(trains if trains is not None else [f"t{i}" for i in range(n)], dtype=object),
        strata if strata is not None else np.ones(n, dtype=int),
        entry,
        exit,
        event,
        np.asarray(X, dtype=float).reshape(n, -1),
    )


def random_dataset(rng, n=60, p=2, n_strata=3):
    entry = rng.uniform(0, 2, n)
    exit_ = entry + rng.exponential(1.0, n)
    exit_ = np.round(exit_, 1) + 0.1  # induce ties
    return dataset(entry, exit_, rng.integers(0, 2, n), rng.normal(size=(n, p)), rng.integers(1, n_strata + 1, n))


class TestPartialLikelihood:
    def test_two_equal_subjects(self):
        d = dataset([0, 0], [1, 2], [1, 0], [[0.0], [0.0]])
        assert partial_loglik([0.3], d) == pytest.approx(math.log(0.5))
        assert math.log(0.5) == pytest.approx(-0.693147, abs=1e-6)

    def test_three_subjects_two_events(self):
        # events at 1 (3 at risk) and 2 (2 at risk), x = 0: log(1/3) + log(1/2)
        d = dataset([0, 0, 0], [1, 2, 3], [1, 1, 0], [[0.0]] * 3)
        assert partial_loglik([1.0], d) == pytest.approx(math.log(1 / 6))

    def test_late_entry_shrinks_risk_set(self):
        # second subject enters at 1.5 and is not at risk at t = 1
        d = dataset([0, 1.5, 0], [1, 3, 2], [1, 0, 1], [[0.0]] * 3)
        assert partial_loglik([0.0], d) == pytest.approx(math.log(1 / 2) + math.log(1 / 2))
        assert math.log(2 / 3) == pytest.approx(-0.405465, abs=1e-6)

    def test_breslow_ties(self):
        d = dataset([0, 0, 0], [1, 1, 2], [1, 1, 0], [[1.0], [0.0], [0.0]])
        b = 0.7
        denom = math.exp(b) + 2
        assert partial_loglik([b], d) == pytest.approx(b - 2 * math.log(denom))

    def test_score_and_information_at_zero(self):
        d = dataset([0, 0], [1, 2], [1, 0], [[1.0], [0.0]])
        g, info = score_and_information([0.0], d)
        assert g[0] == pytest.approx(0.5)
        assert info[0, 0] == pytest.approx(0.25)

    def test_against_direct_enumeration(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            d = random_dataset(rng)
            beta = rng.normal(size=2)
            expected = cox_partial_loglik_direct(beta, d.stratum, d.entry, d.exit, d.event, d.X)
            assert partial_loglik(beta, d) == pytest.approx(expected, abs=1e-10)

    def test_extreme_linear_predictor_is_stable(self):
        rng = np.random.default_rng(4)
        d = random_dataset(rng, n=40, p=1)
        beta = np.array([40.0])
        expected = cox_partial_loglik_direct(beta, d.stratum, d.entry, d.exit, d.event, d.X)
        assert partial_loglik(beta, d) == pytest.approx(expected, rel=1e-10)

    def test_strata_do_not_share_risk_sets(self):
        d = dataset([0, 0], [1, 2], [1, 1], [[0.0], [0.0]], strata=[1, 2])
        assert partial_loglik([0.0], d) == 0.0

    def test_no_events_contributes_zero(self):
        d = dataset([0, 0], [1, 2], [0, 0], [[0.5], [1.0]])
        assert partial_loglik([2.0], d) == 0.0


class TestDataset:
    def test_rejects_empty_interval(self):
        with pytest.raises(ValidationError):
            dataset([0, 1], [1, 1], [0, 0], [[0.0], [0.0]])

    def test_rejects_overlap_within_train_and_stratum(self):
        with pytest.raises(ValidationError, match="overlap"):
            dataset([0, 0.5], [1, 2], [0, 0], [[0.0], [0.0]], trains=["a", "a"])

    def test_rejects_bad_event_code(self):
        with pytest.raises(ValidationError):
            dataset([0], [1], [2], [[0.0]])

    def test_from_sections_gap_clock(self):
        recs = [
            SectionRecord("a", 0, 10, 0, covariates=(1.0,)),
            SectionRecord("a", 10, 25, 1, covariates=(2.0,)),
            SectionRecord("a", 25, 40, 0, covariates=(3.0,)),
            SectionRecord("b", 0, 40, 1, covariates=(0.0,)),
        ]
        d = CoxDataset.from_sections(recs, ["x"], layout="gap")
        assert d.stratum.tolist() == [1, 1, 2, 1]
        assert d.entry.tolist() == [0, 10, 0, 0]
        assert d.exit.tolist() == [10, 25, 15, 40]
        cal = CoxDataset.from_sections(recs, ["x"], layout="calendar")
        assert cal.entry.tolist() == [0, 10, 25, 0]

    def test_from_sections_checks_strata(self):
        recs = [SectionRecord("a", 0, 10, 0, stratum=1), SectionRecord("a", 10, 20, 0, stratum=2)]
        with pytest.raises(ValidationError, match="expected 1"):
            CoxDataset.from_sections(recs)

    def test_unstratified_allows_overlapping_episodes(self):
        recs = [SectionRecord("a", 0, 10, 1), SectionRecord("a", 10, 25, 0)]
        d = CoxDataset.from_sections(recs).unstratified()
        assert d.stratum.tolist() == [1, 1]
        assert d.exit.tolist() == [10, 15]

    def test_k_max(self):
        d = dataset([0, 1, 0], [1, 2, 5], [1, 1, 1], [[0.0]] * 3, strata=[1, 2, 1], trains=["a", "a", "b"])
        assert d.k_max == 2


class TestFit:
    def test_matches_statsmodels(self):
        PHReg = pytest.importorskip("statsmodels.duration.hazard_regression").PHReg
        rng = np.random.default_rng(0)
        d = random_dataset(rng, n=300, p=3)
        ref = PHReg(d.exit, d.X, status=d.event, entry=d.entry, strata=d.stratum, ties="breslow").fit()
        fit = fit_cox(d)
        assert fit.converged
        assert np.allclose(fit.beta, ref.params, atol=1e-8)
        assert np.allclose(fit.standard_errors, ref.bse, rtol=1e-6)

    def test_score_is_zero_at_estimate(self):
        d = random_dataset(np.random.default_rng(2), n=200)
        fit = fit_cox(d)
        g, _ = score_and_information(fit.beta, d)
        assert np.max(np.abs(g)) < 1e-6
        assert fit.loglik >= fit.null_loglik

    def test_breslow_baseline(self):
        d = dataset([0, 0, 0, 0], [1, 2, 2, 3], [1, 1, 0, 1], [[0.0], [1.0], [0.0], [1.0]])
        fit = fit_cox(d)
        r = np.exp(fit.beta[0] * d.X[:, 0])
        h1 = 1 / r.sum()
        h2 = 1 / r[1:].sum()
        h3 = 1 / r[3]
        H = fit.baseline[1]
        assert H.x.tolist() == [1.0, 2.0, 3.0]
        assert np.allclose(H.y, np.cumsum([h1, h2, h3]))
        assert H(0.5) == 0.0 and H(1.0) == pytest.approx(h1) and H(2.5) == pytest.approx(h1 + h2)

    def test_no_events(self):
        with pytest.raises(DataError, match="no events"):
            fit_cox(dataset([0, 0], [1, 2], [0, 0], [[0.0], [1.0]]))

    def test_constant_covariate_is_singular(self):
        d = dataset([0, 0, 0], [1, 2, 3], [1, 1, 0], [[1.0, 0.0], [1.0, 1.0], [1.0, 0.5]])
        with pytest.raises(SingularInformationError, match="ridge"):
            fit_cox(d)
        fit = fit_cox(d, ridge=0.1)
        assert np.all(np.isfinite(fit.beta))

    def test_iteration_cap(self):
        d = random_dataset(np.random.default_rng(8), n=100)
        assert not fit_cox(d, max_iter=1).converged

    def test_summary_and_roundtrip(self):
        d = random_dataset(np.random.default_rng(6), n=150)
        fit = fit_cox(d)
        row = fit.summary()[0]
        assert row["hazard_ratio"] == pytest.approx(math.exp(fit.beta[0]))
        assert row["ci_lower"] < row["hazard_ratio"] < row["ci_upper"]
        back = CoxFit.from_dict(fit.to_dict())
        assert np.array_equal(back.beta, fit.beta)
        assert np.array_equal(back.baseline[2].y, fit.baseline[2].y)


class TestPrediction:
    def test_curve_shape(self):
        d = random_dataset(np.random.default_rng(9), n=150)
        fit = fit_cox(d)
        curve = predict_survival(fit, [0.2, -0.1], 1, np.linspace(0, 5, 51))
        assert curve.survival[0] == 1.0
        assert np.all(np.diff(curve.survival) <= 0)
        H = fit.baseline[1](curve.grid) * math.exp(fit.beta @ [0.2, -0.1])
        assert np.allclose(curve.survival, np.exp(-H))

    def test_unknown_stratum(self):
        fit = fit_cox(random_dataset(np.random.default_rng(9), n=50))
        with pytest.raises(DataError):
            predict_survival(fit, [0.0, 0.0], 99, [0.0, 1.0])

    def test_step_function_is_right_continuous(self):
        f = StepFunction([1.0, 2.0], [0.5, 0.7])
        assert f([0.999, 1.0, 1.5, 2.0, 9.0]).tolist() == [0.0, 0.5, 0.5, 0.7, 0.7]


def test_stratification_detected_by_lr_test():
    # distinct per-stratum baselines: the stratified partial likelihood should win clearly
    covs = (CovariateSpec("x1", "normal", (0.0, 1.0)), CovariateSpec("x2", "bernoulli", (0.4,)))
    baselines = (BaselineHazard((0.0,), (0.002,)), BaselineHazard((0.0, 20.0), (0.05, 0.004)), BaselineHazard((0.0,), (0.02,)))
    small_p = 0
    for seed in range(10):
        cfg = SimConfig(seed=seed, n_trains=300, covariates=covs, cox_beta=(0.4, -0.3), cox_baseline=baselines)
        data = simulate_cox(cfg)
        strat = fit_cox(data)
        pooled = fit_cox(data.unstratified())
        df = int(data.stratum.max()) - 1  # one extra baseline per additional stratum
        small_p += lr_test(pooled.loglik, strat.loglik, df=df).p_value < 1e-4
    assert small_p >= 9
