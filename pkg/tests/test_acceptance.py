"""Acceptance suite.

Every test carries a ``criterion`` marker with the criterion number, a short
title and its time budget in seconds; ``conftest.py`` prints one pass/fail
line per criterion at the end of the run and fails the session when a
budget is exceeded. Run it alone with ``pytest tests/test_acceptance.py``.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from oracles import cox_partial_loglik_direct, two_state_p, two_state_path_loglik
from railhaz.cli import main
from railhaz.ctmc import (
    CtmcParams,
    IntensitySpec,
    PanelPath,
    build_intensity,
    fit_ctmc,
    interval_probability,
    panel_loglik,
)
from railhaz.expm import matrix_exponential
from railhaz.inference import lr_test
from railhaz.ingest import SectionRecord, assign_strata
from railhaz.report import write_cox_table
from railhaz.simgen import BaselineHazard, CovariateSpec, SimConfig, simulate_cox, simulate_cox_sections, simulate_ctmc
from railhaz.survival import CoxDataset, CoxFit, fit_cox, partial_loglik, predict_survival, score_and_information

PROPERTY = settings(
    max_examples=1000,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.filter_too_much],
)


# -- Cox partial likelihood ----------------------------------------------------


@pytest.mark.criterion(1, "Cox partial likelihood matches direct enumeration", 1.0)
def test_partial_loglik_exhaustive_small_datasets():
    # Each row is (event, covariate level, exit distance); exits 1 and 2 give
    # tied and untied cases. Rows are exchangeable, so multisets of rows cover
    # every distinct dataset. Each one is also evaluated in reversed order.
    options = list(itertools.product((0, 1), (0.0, 1.0), (1.0, 2.0)))
    checked = 0
    for n in range(1, 5):
        for rows in itertools.combinations_with_replacement(options, n):
            entry = [0.0] * n
            strata = [1] * n
            for ordered in (rows, rows[::-1]):
                event = [r[0] for r in ordered]
                X = [[r[1]] for r in ordered]
                exit_ = [r[2] for r in ordered]
                data = CoxDataset([f"t{i}" for i in range(n)], strata, entry, exit_, event, X)
                for beta in (0.7, -1.3):
                    got = partial_loglik([beta], data)
                    want = cox_partial_loglik_direct([beta], strata, entry, exit_, event, np.array(X))
                    assert abs(got - want) <= 1e-12, (ordered, beta, got, want)
            checked += 1
    assert checked == sum(math.comb(8 + n - 1, n) for n in range(1, 5))


def _random_cox_dataset(rng: np.random.Generator, n: int = 20, p: int = 3) -> CoxDataset:
    entry = rng.choice([0.0, 0.0, 0.5, 1.0], n)
    exit_ = entry + rng.integers(1, 6, n) * 0.5  # half-unit grid so ties occur
    return CoxDataset(
        [f"t{i}" for i in range(n)],
        rng.integers(1, 3, n),
        entry,
        exit_,
        rng.integers(0, 2, n),
        rng.normal(size=(n, p)),
    )


@pytest.mark.criterion(2, "Cox score matches central finite differences", 5.0)
def test_score_against_finite_differences():
    rng = np.random.default_rng(20260101)
    h = 1e-5
    done = 0
    while done < 100:
        data = _random_cox_dataset(rng)
        if data.n_events == 0:
            continue
        beta = rng.normal(scale=0.5, size=3)
        score, _ = score_and_information(beta, data)
        fd = np.empty(3)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            fd[k] = (partial_loglik(beta + e, data) - partial_loglik(beta - e, data)) / (2 * h)
        assert np.max(np.abs(score - fd)) <= 1e-6
        done += 1


COX_TRUTH = np.array([0.5, -0.3, 0.2, 0.4])
COX_COVARIATES = (
    CovariateSpec("x1", "normal", (0.0, 1.0)),
    CovariateSpec("x2", "uniform", (-1.0, 1.0)),
    CovariateSpec("x3", "normal", (0.0, 1.0)),
    CovariateSpec("x4", "bernoulli", (0.3,)),
)
# first event: flat; second: rises after 100 km; third and later: higher flat rate
COX_BASELINES = (
    BaselineHazard((0.0,), (0.004,)),
    BaselineHazard((0.0, 100.0), (0.002, 0.006)),
    BaselineHazard((0.0,), (0.008,)),
)
SPOTS_20 = tuple(np.linspace(0.0, 711.0, 21))


@pytest.mark.criterion(3, "Cox parameter recovery within 3 SE", 60.0)
@pytest.mark.slow
def test_cox_parameter_recovery():
    covered = 0
    for seed in range(100):
        cfg = SimConfig(
            seed=seed,
            n_trains=500,
            spots=SPOTS_20,
            covariates=COX_COVARIATES,
            cox_beta=tuple(COX_TRUTH),
            cox_baseline=COX_BASELINES,
        )
        data = simulate_cox(cfg)
        assert data.k_max >= 3  # every baseline is exercised
        fit = fit_cox(data)
        assert fit.converged
        covered += bool(np.all(np.abs(fit.beta - COX_TRUTH) <= 3 * fit.standard_errors))
    print(f"beta within 3 SE in {covered}/100 seeds")
    assert covered >= 95


# -- CTMC ------------------------------------------------------------------------


@pytest.mark.criterion(4, "matrix exponential: closed form and semigroup", 5.0)
def test_matrix_exponential_closed_form_and_semigroup():
    rng = np.random.default_rng(44)
    for _ in range(1000):
        a, b = np.exp(rng.uniform(math.log(1e-3), math.log(10.0), 2))
        u = rng.uniform(0.0, 10.0)
        P = matrix_exponential(np.array([[-a, a], [b, -b]]) * u)
        assert abs(P[0, 0] - (b + a * math.exp(-(a + b) * u)) / (a + b)) <= 1e-12
        assert np.max(np.abs(P - two_state_p(a, b, u))) <= 1e-12
    for _ in range(300):
        q = int(rng.integers(2, 5))
        Q = rng.exponential(1.0, (q, q))
        np.fill_diagonal(Q, 0.0)
        np.fill_diagonal(Q, -Q.sum(axis=1))
        u, v = rng.uniform(0.0, 3.0, 2)
        lhs = matrix_exponential(Q * (u + v))
        rhs = matrix_exponential(Q * u) @ matrix_exponential(Q * v)
        assert np.max(np.abs(lhs - rhs)) <= 1e-10


@pytest.mark.criterion(5, "CTMC panel likelihood matches closed form", 1.0)
def test_panel_loglik_closed_form():
    spec = IntensitySpec()
    unit = CtmcParams([0.0, 0.0], np.zeros((2, 0)))
    worked = PanelPath("w", [0.0, math.log(2.0)], [1, 1], np.zeros((2, 0)))
    assert abs(panel_loglik(unit, [worked], spec) - math.log(0.625)) <= 1e-10
    assert round(math.log(0.625), 6) == -0.470004

    rng = np.random.default_rng(55)
    spec_cp = IntensitySpec(covariate_names=("x",), changepoint=2.0)
    for _ in range(200):
        log_q0 = rng.uniform(-2.0, 1.0, 2)
        beta = rng.normal(scale=0.5, size=(2, 1))
        z = rng.normal(scale=0.5, size=2)
        n = int(rng.integers(2, 4))
        d = np.sort(rng.uniform(0.0, 4.0, n))
        if np.any(np.diff(d) <= 1e-9):
            continue
        s = rng.integers(1, 3, n)
        x = rng.normal(size=(n, 1))
        got = panel_loglik(CtmcParams(log_q0, beta, z), [PanelPath("p", d, s, x)], spec_cp)
        # covariates of the left observation apply to each interval
        want = 0.0
        for k in range(n - 1):
            a, b = np.exp(log_q0 + beta[:, 0] * x[k, 0])
            want += two_state_path_loglik(
                a, b, a * math.exp(z[0]), b * math.exp(z[1]), d[k : k + 2], s[k : k + 2], 2.0
            )
        assert abs(got - want) <= 1e-10


CTMC_SPEC = IntensitySpec(covariate_names=("temperature_c", "precip_cat"), changepoint=330.0)
CTMC_COVARIATES = (
    CovariateSpec("temperature_c", "uniform", (-15.0, 5.0)),
    CovariateSpec("precip_cat", "bernoulli", (0.3,)),
)
CTMC_TRUTH = CtmcParams(
    np.log([0.01, 0.05]),
    [[-0.03, 0.25], [0.04, -0.1]],
    [math.log(1.5), math.log(0.7)],
)
CTMC_SPOTS = tuple(np.linspace(0.0, 711.0, 20))


def _nested_fits(paths, spec, hessian):
    """Homogeneous fit, then the changepoint model started from it with z = 0."""
    homo = fit_ctmc(paths, spec.homogeneous(), hessian=False)
    start = CtmcParams(homo.params.log_q0, homo.params.beta, np.zeros(spec.n_transitions))
    het = fit_ctmc(paths, spec, hessian=hessian, start=start)
    return homo, het


@pytest.fixture(scope="session")
def changepoint_study():
    """100 simulated datasets with a real changepoint, each fitted with and without it."""
    out = []
    k = CTMC_SPEC.param_names().index("z[1->2]")
    for seed in range(100):
        cfg = SimConfig(
            seed=seed,
            n_trains=500,
            spots=CTMC_SPOTS,
            covariates=CTMC_COVARIATES,
            ctmc_spec=CTMC_SPEC,
            ctmc_params=CTMC_TRUTH,
        )
        homo, het = _nested_fits(simulate_ctmc(cfg), CTMC_SPEC, hessian=True)
        out.append({
            "seed": seed,
            "homo_ll": homo.loglik,
            "het_ll": het.loglik,
            "z12": float(het.params.z[0]),
            "se_z12": float(het.standard_errors[k]),
            "converged": homo.converged and het.converged,
        })
    return out


@pytest.mark.criterion(6, "CTMC changepoint recovery and nesting", 600.0)
@pytest.mark.slow
def test_changepoint_recovery(changepoint_study):
    assert all(r["converged"] for r in changepoint_study)
    covered = 0
    for r in changepoint_study:
        ratio = math.exp(r["z12"])
        se_ratio = ratio * r["se_z12"]  # delta method
        covered += abs(ratio - 1.5) <= 3 * se_ratio
    print(f"exp(z12) within 3 SE of 1.5 in {covered}/100 seeds")
    assert covered >= 95


@pytest.mark.criterion(6, "CTMC changepoint recovery and nesting", 600.0)
@pytest.mark.slow
def test_changepoint_model_nests_homogeneous(changepoint_study):
    assert all(r["het_ll"] >= r["homo_ll"] for r in changepoint_study)


@pytest.mark.criterion(7, "LR test size and power", 900.0)
@pytest.mark.slow
def test_lr_test_power(changepoint_study):
    df = CTMC_SPEC.n_transitions
    small = sum(lr_test(r["homo_ll"], r["het_ll"], df).p_value < 1e-4 for r in changepoint_study)
    print(f"p < 0.0001 in {small}/100 seeds")
    assert small >= 95


@pytest.mark.criterion(7, "LR test size and power", 900.0)
@pytest.mark.slow
def test_lr_test_size():
    spec = IntensitySpec(covariate_names=("precip_cat",), changepoint=330.0)
    truth = CtmcParams(np.log([0.01, 0.05]), [[0.25], [-0.1]], [0.0, 0.0])
    df = spec.n_transitions
    rejected = 0
    for seed in range(1000):
        cfg = SimConfig(
            seed=10_000 + seed,
            n_trains=500,
            spots=CTMC_SPOTS,
            covariates=(CovariateSpec("precip_cat", "bernoulli", (0.3,)),),
            ctmc_spec=spec,
            ctmc_params=truth,
        )
        homo, het = _nested_fits(simulate_ctmc(cfg), spec, hessian=False)
        rejected += lr_test(homo.loglik, het.loglik, df).p_value < 0.05
    print(f"rejected at 5% in {rejected}/1000 null seeds")
    assert 30 <= rejected <= 70


# -- ingest ------------------------------------------------------------------------


@pytest.mark.criterion(8, "ingest reproduces the hand-traced golden files", None)
def test_ingest_golden_files(toy_dir, tmp_path):
    golden = (toy_dir / "sections.csv").read_text()
    for cls in ("DepartureOnly", "ArrivalOnly", "Both"):
        assert f",{cls}\n" in golden
    code = main([
        "ingest",
        "--operations", str(toy_dir / "operations.csv"),
        "--line", str(toy_dir / "line.csv"),
        "--weather", str(toy_dir / "weather.csv"),
        "--out", str(tmp_path),
    ])
    assert code == 0
    assert (tmp_path / "sections.csv").read_bytes() == (toy_dir / "sections.csv").read_bytes()
    assert (tmp_path / "panel.csv").read_bytes() == (toy_dir / "panel.csv").read_bytes()


# -- structural invariants -----------------------------------------------------------


@st.composite
def intensity_models(draw):
    q = draw(st.integers(2, 4))
    pairs = [(r, s) for r in range(1, q + 1) for s in range(1, q + 1) if r != s]
    transitions = draw(st.lists(st.sampled_from(pairs), min_size=1, max_size=len(pairs), unique=True))
    p = draw(st.integers(0, 2))
    m = len(transitions)
    unit = st.floats(-1.0, 1.0)
    spec = IntensitySpec(q, tuple(transitions), tuple(f"c{k}" for k in range(p)), changepoint=5.0)
    params = CtmcParams(
        np.array(draw(st.lists(st.floats(-4.0, 1.5), min_size=m, max_size=m))),
        np.array(draw(st.lists(unit, min_size=m * p, max_size=m * p))).reshape(m, p),
        np.array(draw(st.lists(unit, min_size=m, max_size=m))),
    )
    x = np.array(draw(st.lists(st.floats(-3.0, 3.0), min_size=p, max_size=p)))
    return spec, params, x


@pytest.mark.criterion(9, "structural invariants (property suite)", 30.0)
@PROPERTY
@given(intensity_models(), st.floats(0.0, 10.0))
def test_generator_rows_sum_to_zero(model, t):
    spec, params, x = model
    Q = build_intensity(params, x, t, spec)
    assert np.all(np.abs(Q.sum(axis=1)) <= 1e-13)
    assert np.all(Q[~np.eye(spec.q, dtype=bool)] >= 0)


@pytest.mark.criterion(9, "structural invariants (property suite)", 30.0)
@PROPERTY
@given(intensity_models(), st.floats(0.0, 10.0), st.floats(0.0, 10.0))
def test_transition_matrix_is_stochastic(model, t, length):
    spec, params, x = model
    P = interval_probability(params, x, t, t + length, spec)
    assert np.all(np.abs(P.sum(axis=1) - 1.0) <= 1e-10)
    assert np.all((P >= 0.0) & (P <= 1.0))


@st.composite
def small_cox_datasets(draw):
    n = draw(st.integers(2, 12))
    rows = draw(st.lists(
        st.tuples(st.integers(1, 2), st.integers(1, 8), st.integers(0, 1), st.floats(-2.0, 2.0)),
        min_size=n,
        max_size=n,
    ))
    strata, exit_, event, x = (list(c) for c in zip(*rows))
    event[0] = 1
    return CoxDataset([f"t{i}" for i in range(n)], strata, [0.0] * n, [float(e) for e in exit_], event, np.c_[x])


@pytest.mark.criterion(9, "structural invariants (property suite)", 30.0)
@PROPERTY
@given(small_cox_datasets(), st.floats(-2.0, 2.0))
def test_survival_curves_are_nonincreasing(data, x):
    # the ridge keeps the fit finite when a covariate separates events perfectly
    fit = fit_cox(data, ridge=0.1)
    grid = np.linspace(0.0, 9.0, 19)
    for stratum in fit.baseline:
        s = predict_survival(fit, [x], stratum, grid).survival
        assert np.all((s >= 0.0) & (s <= 1.0))
        assert np.all(np.diff(s) <= 0.0)


def _valid_strata(strata, events) -> bool:
    expected = 1
    for j, e in zip(strata, events):
        if j != expected:
            return False
        expected += e
    return True


@pytest.mark.criterion(9, "structural invariants (property suite)", 30.0)
@PROPERTY
@given(st.lists(st.integers(0, 1), min_size=1, max_size=30), st.integers(0, 2**32 - 1))
def test_strata_sequences_are_valid(events, seed):
    records = [SectionRecord("t", 10.0 * k, 10.0 * (k + 1), e) for k, e in enumerate(events)]
    numbered = assign_strata(records)
    assert _valid_strata([r.stratum for r in numbered], events)
    data = CoxDataset.from_sections(numbered)
    assert data.stratum.tolist() == [r.stratum for r in numbered]

    cfg = SimConfig(
        seed=seed,
        n_trains=2,
        line_length_km=60.0,
        covariates=(),
        cox_beta=(),
        cox_baseline=(BaselineHazard((0.0,), (0.05,)),),
    )
    by_train: dict[str, list[SectionRecord]] = {}
    for r in simulate_cox_sections(cfg):
        by_train.setdefault(r.train_id, []).append(r)
    for rows in by_train.values():
        assert _valid_strata([r.stratum for r in rows], [r.primary_delay for r in rows])


# -- reporting ---------------------------------------------------------------------------


@pytest.mark.criterion(10, "hazard-ratio table formatting", None)
def test_cox_table_row_format(tmp_path):
    beta = math.log(0.964)
    # SE that reproduces the published interval (0.933, 0.997) on the log scale
    se = (math.log(0.997) - math.log(0.933)) / (2 * 1.959963984540054)
    fit = CoxFit(
        beta=np.array([beta]),
        covariance=np.array([[se**2]]),
        loglik=0.0,
        null_loglik=0.0,
        baseline={},
        iterations=1,
        converged=True,
        covariate_names=["temperature_c"],
    )
    path = tmp_path / "cox_table.csv"
    write_cox_table(path, fit)
    lines = path.read_text().splitlines()
    assert lines[0] == "predictor,hazard_ratio,ci_lower,ci_upper,p_value"
    # two-sided Wald p for |beta|/se = 2.166
    assert lines[1] == "Temperature,0.964,0.933,0.997,0.0303"
