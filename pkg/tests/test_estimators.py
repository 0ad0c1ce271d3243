import math
import os
import unittest

import numpy as np
import pytest

from core.config import OutcomeKind, PipelineConfig, SolverConfig, Specification
from core.data import TrialDataset
from core.errors import DomainError, EmptySubsetError, PositivityViolationError, TooManyFailuresError
from core.estimators import (
    AllocationModel,
    AssumptionSet,
    bootstrap_cace,
    bootstrap_estimator,
    compute_stratum_probabilities,
    estimate,
    estimate_eta,
    extrapolation_share,
    fit_cace,
    percentile_interval,
    plug_in_cace,
)
from core.gating import COMPLIER, DEFIER, GatingModel, StratumSet
from core.glm_core import softmax
from core.simgen import build_params, draw_population, misspecify_view

FAST = PipelineConfig(solver=SolverConfig(n_starts=1, em_max_iter=200))
CONTINUOUS = PipelineConfig(outcome_kind=OutcomeKind.CONTINUOUS, solver=SolverConfig(n_starts=2))
MIXTURE_NAMES = ("pi", "pi_er", "pi_mo", "pi_mo_er")


class FixedGating:
    """Gating stub returning the same stratum probabilities on every row."""

    def __init__(self, rho):
        self.rho = np.asarray(rho, dtype=float)

    def predict(self, X, padded=False):
        return np.tile(self.rho, (np.asarray(X).shape[0], 1))

    def log_predict(self, X, padded=False):
        with np.errstate(divide="ignore"):
            return np.log(self.predict(X, padded))


def constant_eta(value: float) -> AllocationModel:
    return AllocationModel(mode="constant_mle", coefficients=np.array([value]))


def perfect_compliance_data(n: int, seed: int) -> TrialDataset:
    rng = np.random.default_rng(seed)
    z = rng.binomial(1, 0.5, size=n)
    y = rng.binomial(1, np.where(z == 1, 0.6, 0.4))
    return TrialDataset.from_arrays(np.empty((n, 0)), z, z, y, names=())


def monotone_continuous_trial(n: int, seed: int, shift: float = 0.0) -> TrialDataset:
    """Defier-free trial with a continuous outcome; `shift` is added to every outcome."""
    rng = np.random.default_rng(seed)
    covariates = rng.normal(size=(n, 2))
    X = np.column_stack([np.ones(n), covariates])
    delta = np.array([[0.4, 0.5, -0.3], [-0.3, -0.4, 0.6]])
    rho = softmax(np.column_stack([X @ delta.T, np.zeros(n)]), axis=1)
    strata = (rng.uniform(size=(n, 1)) > np.cumsum(rho, axis=1)).sum(axis=1)
    z = rng.binomial(1, 0.5, size=n)
    t = np.select([strata == 0, strata == 1], [z, 1], default=0)
    mean = np.select(
        [strata == 0, strata == 1],
        [1.0 + covariates[:, 0] + 2.0 * t, 6.0 + 0.5 * covariates[:, 1]],
        default=-3.0 - 0.5 * covariates[:, 0],
    )
    y = mean + rng.normal(size=n) + shift
    return TrialDataset.from_arrays(covariates, z, t, y)


class TestStratumProbabilities:
    def test_cell_complier_shares(self):
        probs = compute_stratum_probabilities(FixedGating([0.5, 0.25, 0.15, 0.10]), constant_eta(0.5), np.ones((1, 1)))

        assert probs.p_c11[0] == pytest.approx(2 / 3)
        assert probs.p_c00[0] == pytest.approx(10 / 13)

    def test_treated_arm_shares(self):
        probs = compute_stratum_probabilities(FixedGating([0.5, 0.2, 0.2, 0.1]), constant_eta(0.5), np.ones((1, 1)))

        assert probs.e[0] == pytest.approx(0.5)
        np.testing.assert_allclose([probs.p_c1[0], probs.p_a1[0], probs.p_d1[0]], [0.5, 0.4, 0.1])
        np.testing.assert_allclose([probs.p_c0[0], probs.p_n0[0], probs.p_d0[0]], [0.5, 0.4, 0.1])

    def test_monotone_gating_has_no_defier_share(self):
        gating = GatingModel(strata=StratumSet.MONO3, delta=np.array([[math.log(3)], [0.0]]))

        probs = compute_stratum_probabilities(gating, constant_eta(0.5), np.ones((3, 1)))

        np.testing.assert_allclose(probs.e, 0.5)
        assert np.all(probs.p_d1 == 0.0) and np.all(probs.p_d0 == 0.0)

    def test_arm_shares_sum_to_one(self):
        rng = np.random.default_rng(0)
        rho = rng.dirichlet(np.ones(4))
        probs = compute_stratum_probabilities(FixedGating(rho), constant_eta(0.3), np.ones((1, 1)))

        assert probs.p_c1[0] + probs.p_a1[0] + probs.p_d1[0] == pytest.approx(1.0, abs=1e-12)
        assert probs.p_c0[0] + probs.p_n0[0] + probs.p_d0[0] == pytest.approx(1.0, abs=1e-12)

    def test_everyone_assigned_to_treatment(self):
        probs = compute_stratum_probabilities(FixedGating([0.5, 0.2, 0.2, 0.1]), constant_eta(1.0), np.ones((1, 1)))

        assert probs.e[0] == pytest.approx(0.7)
        np.testing.assert_allclose([probs.p_c1[0], probs.p_a1[0], probs.p_d1[0]], [5 / 7, 2 / 7, 0.0], atol=1e-12)
        np.testing.assert_allclose([probs.p_c0[0], probs.p_n0[0], probs.p_d0[0]], [0.0, 2 / 3, 1 / 3], atol=1e-12)

    def test_cell_without_compatible_stratum_is_undefined(self):
        probs = compute_stratum_probabilities(FixedGating([0.0, 0.0, 0.6, 0.4]), constant_eta(0.5), np.ones((1, 1)))

        assert np.isnan(probs.p_c11[0])
        assert probs.p_c00[0] == 0.0
        assert probs.e[0] == pytest.approx(0.2)
        assert probs.p_d1[0] == pytest.approx(1.0)

    def test_shares_survive_underflowing_stratum_probabilities(self):
        # Prepare: a covariate value of 1000 pushes the complier probability below the smallest double
        delta = np.array([[0.0, -1.0], [0.0, -1.2], [0.0, 0.1]])
        gating = GatingModel(strata=StratumSet.FULL4, delta=delta)
        X = np.array([[1.0, 1000.0]])

        # Act
        probs = compute_stratum_probabilities(gating, constant_eta(0.5), X)

        # Assert
        assert probs.rho[0, COMPLIER] == 0.0
        assert probs.p_c11[0] == pytest.approx(1.0)
        assert 0.0 < probs.e[0] < 1.0
        assert probs.p_c1[0] + probs.p_a1[0] + probs.p_d1[0] == pytest.approx(1.0, abs=1e-12)
        assert probs.p_c0[0] + probs.p_n0[0] + probs.p_d0[0] == pytest.approx(1.0, abs=1e-12)
        for name in ("p_c11", "p_c00", "p_c1", "p_a1", "p_d1", "p_c0", "p_n0", "p_d0"):
            assert np.all(np.isfinite(getattr(probs, name)))

    def test_fit_rejects_undefined_mixing_weights(self, monkeypatch):
        monkeypatch.setattr("core.estimators.em_fit_gating", lambda *args, **kwargs: FixedGating([0, 0, 0.6, 0.4]))

        with pytest.raises(PositivityViolationError):
            fit_cace(perfect_compliance_data(200, seed=0), AssumptionSet(), FAST)


class TestPlugIn:
    @pytest.mark.parametrize(
        "rho_c,q11,q00,expected",
        [
            # TestCase1: constant effect
            ([0.2, 0.8], [0.7, 0.7], [0.2, 0.2], 0.5),

            # TestCase2: complier-weighted average
            ([0.5, 0.25], [0.1, 0.4], [0.0, 0.0], 0.2),

            # TestCase3: a single row
            ([1.0], [0.9], [0.3], 0.6),
        ],
        ids=["TestCase1", "TestCase2", "TestCase3"],
    )
    def test_examples(self, rho_c, q11, q00, expected):
        assert plug_in_cace(np.array(rho_c), np.array(q11), np.array(q00)) == pytest.approx(expected, abs=1e-12)

    def test_rescaling_the_weights_does_not_matter(self):
        rng = np.random.default_rng(1)
        rho_c, q11, q00 = rng.uniform(size=(3, 50))
        assert plug_in_cace(7.5 * rho_c, q11, q00) == pytest.approx(plug_in_cace(rho_c, q11, q00), abs=1e-12)

    def test_zero_weights(self):
        with pytest.raises(PositivityViolationError):
            plug_in_cace(np.zeros(3), np.ones(3), np.zeros(3))


class TestAllocationModel:
    def test_constant_mode_is_sample_mean(self):
        data = perfect_compliance_data(10, seed=0)
        model = estimate_eta(data)

        assert model.is_constant
        np.testing.assert_allclose(model.predict(data.X), data.z.mean())

    def test_logistic_mode_on_independent_assignment(self):
        rng = np.random.default_rng(2)
        covariates = rng.normal(size=(50_000, 2))
        z = rng.binomial(1, 0.5, size=50_000)
        data = TrialDataset.from_arrays(covariates, z, z, np.zeros(50_000))

        model = estimate_eta(data, "logistic")

        assert not model.is_constant
        assert np.max(np.abs(model.coefficients[1:])) < 0.05


class TestExtrapolationShare:
    def test_rows_outside_a_training_range(self):
        X = np.array([[0.0], [0.5], [2.0], [-1.0]])
        assert extrapolation_share(X, np.array([[0.0], [1.0]]), np.array([[-2.0], [3.0]])) == 0.5

    def test_empty_training_set_is_ignored(self):
        assert extrapolation_share(np.ones((3, 1)), np.empty((0, 1))) == 0.0


class TestAssumptionSet:
    @pytest.mark.parametrize("name", ["pi", "pi_er", "pi_mo", "pi_mo_er"])
    def test_names(self, name):
        assert AssumptionSet.from_name(name).name == name

    def test_unknown_name(self):
        with pytest.raises(DomainError):
            AssumptionSet.from_name("iv_wald")


class TestFitCace(unittest.TestCase):
    def test_perfect_compliance_recovers_difference_in_means(self):
        # Prepare
        data = perfect_compliance_data(2000, seed=3)
        difference = data.y[data.z == 1].mean() - data.y[data.z == 0].mean()

        # Act
        fit = fit_cace(data, AssumptionSet(), FAST, seed=1)

        # Assert
        self.assertAlmostEqual(fit.delta_hat, difference, delta=0.02)
        self.assertEqual(fit.extrapolation_share, 0.0)

    def test_missing_treated_cell(self):
        # Prepare: nobody assigned to treatment takes it
        rng = np.random.default_rng(4)
        z = rng.binomial(1, 0.5, size=400)
        t = np.where(z == 1, 0, rng.binomial(1, 0.3, size=400))
        data = TrialDataset.from_arrays(rng.normal(size=400), z, t, rng.binomial(1, 0.5, size=400))

        # Act / Assert
        with self.assertRaises(EmptySubsetError):
            fit_cace(data, AssumptionSet(), FAST)

    def test_unknown_estimator(self):
        with self.assertRaises(DomainError):
            estimate("late", perfect_compliance_data(20, seed=0))

    def test_iv_estimators_agree_with_constant_allocation(self):
        data = perfect_compliance_data(500, seed=5)
        wald = estimate("iv_wald", data)
        matching = estimate("iv_matching", data)

        self.assertAlmostEqual(wald.delta_hat, matching.delta_hat, delta=1e-12)
        self.assertIsNone(wald.exclusion_restriction)


class TestPipelinesOnSimulatedTrial(unittest.TestCase):
    """Every mixture pipeline on a generated trial with log-normal covariates."""

    @classmethod
    def setUpClass(cls):
        params = build_params(seed=2, scenario=1, specification=Specification.WELL)
        cls.data = misspecify_view(draw_population(params, 5000, seed=7), Specification.WELL)
        cls.fits = {name: fit_cace(cls.data, AssumptionSet.from_name(name), FAST, seed=1) for name in MIXTURE_NAMES}

    def test_every_pipeline_returns_an_estimate(self):
        for name, fit in self.fits.items():
            with self.subTest(estimator=name):
                self.assertTrue(-1.0 <= fit.delta_hat <= 1.0)
                self.assertEqual(fit.assumptions.name, name)

    def test_arm_shares_sum_to_one(self):
        for name, fit in self.fits.items():
            probs = fit.probabilities
            with self.subTest(estimator=name):
                np.testing.assert_allclose(probs.p_c1 + probs.p_a1 + probs.p_d1, 1.0, atol=1e-8)
                np.testing.assert_allclose(probs.p_c0 + probs.p_n0 + probs.p_d0, 1.0, atol=1e-8)

    def test_treatment_propensity_expansion(self):
        for name, fit in self.fits.items():
            probs = fit.probabilities
            rho_c, rho_a, _, rho_d = probs.rho.T
            with self.subTest(estimator=name):
                np.testing.assert_allclose(probs.e, rho_c * probs.eta + rho_a + rho_d * (1 - probs.eta), atol=1e-8)
                self.assertTrue(np.all((probs.e >= 0) & (probs.e <= 1)))

    def test_shares_are_probability_ratios(self):
        for name, fit in self.fits.items():
            probs = fit.probabilities
            rho_c, rho_a, rho_n, rho_d = probs.rho.T
            eta, e = probs.eta, probs.e
            with self.subTest(estimator=name):
                np.testing.assert_allclose(probs.p_c11 * (rho_c + rho_a), rho_c, atol=1e-8)
                np.testing.assert_allclose(probs.p_c00 * (rho_c + rho_n), rho_c, atol=1e-8)
                np.testing.assert_allclose(probs.p_c1 * e, rho_c * eta, atol=1e-8)
                np.testing.assert_allclose(probs.p_a1 * e, rho_a, atol=1e-8)
                np.testing.assert_allclose(probs.p_d1 * e, rho_d * (1 - eta), atol=1e-8)
                np.testing.assert_allclose(probs.p_c0 * (1 - e), rho_c * (1 - eta), atol=1e-8)
                np.testing.assert_allclose(probs.p_n0 * (1 - e), rho_n, atol=1e-8)
                np.testing.assert_allclose(probs.p_d0 * (1 - e), rho_d * eta, atol=1e-8)

    def test_monotone_pipelines_have_no_defier_shares(self):
        for name in ("pi_mo", "pi_mo_er"):
            probs = self.fits[name].probabilities
            with self.subTest(estimator=name):
                self.assertTrue(np.all(probs.rho[:, DEFIER] == 0.0))
                self.assertTrue(np.all(probs.p_d1 == 0.0))
                self.assertTrue(np.all(probs.p_d0 == 0.0))

    def test_complier_weights_of_the_plug_in(self):
        fit = self.fits["pi"]
        expected = plug_in_cace(
            fit.probabilities.rho[:, COMPLIER],
            fit.treated_experts.complier.predict(self.data.X),
            fit.control_experts.complier.predict(self.data.X),
        )
        self.assertEqual(fit.delta_hat, expected)


class TestTranslationEquivariance(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.data = monotone_continuous_trial(4000, seed=12)
        cls.shifted = monotone_continuous_trial(4000, seed=12, shift=50.0)

    def test_shifting_the_outcome_leaves_the_estimate_unchanged(self):
        for name in ("pi_mo", "pi_mo_er"):
            assumptions = AssumptionSet.from_name(name)
            with self.subTest(estimator=name):
                # Act
                base = fit_cace(self.data, assumptions, CONTINUOUS, seed=4)
                shifted = fit_cace(self.shifted, assumptions, CONTINUOUS, seed=4)

                # Assert
                self.assertAlmostEqual(shifted.delta_hat, base.delta_hat, delta=1e-6)
                intercepts = shifted.treated_experts.complier.zeta[0] - base.treated_experts.complier.zeta[0]
                self.assertAlmostEqual(intercepts, 50.0, delta=1e-6)
                self.assertAlmostEqual(
                    shifted.control_experts.complier.sigma2, base.control_experts.complier.sigma2, delta=1e-6
                )


class TestPercentileInterval:
    def test_order_statistics_of_999_samples(self):
        samples = np.random.default_rng(0).permutation(np.arange(1.0, 1000.0))
        assert percentile_interval(samples, 0.95) == (25.0, 975.0)

    def test_single_sample(self):
        assert percentile_interval(np.array([0.3]), 0.95) == (0.3, 0.3)


class TestBootstrap(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        rng = np.random.default_rng(6)
        z = rng.binomial(1, 0.5, size=300)
        t = np.where(rng.uniform(size=300) < 0.8, z, 1 - z)
        cls.data = TrialDataset.from_arrays(rng.normal(size=300), z, t, rng.normal(size=300) + t)

    def test_same_seed_same_samples(self):
        first = bootstrap_estimator("iv_wald", self.data, replicates=50, seed=4)
        second = bootstrap_estimator("iv_wald", self.data, replicates=50, seed=4)

        self.assertEqual(first.bootstrap.samples, second.bootstrap.samples)
        self.assertLessEqual(first.bootstrap.ci_low, first.bootstrap.ci_high)

    def test_threads_do_not_change_the_result(self):
        serial = bootstrap_estimator("iv_wald", self.data, PipelineConfig(threads=1), replicates=40, seed=2)
        threaded = bootstrap_estimator("iv_wald", self.data, PipelineConfig(threads=3), replicates=40, seed=2)

        self.assertEqual(serial.bootstrap.samples, threaded.bootstrap.samples)

    def test_single_replicate_interval(self):
        result = bootstrap_estimator("iv_wald", self.data, replicates=1, seed=8)

        self.assertEqual(result.bootstrap.ci_low, result.bootstrap.ci_high)
        self.assertEqual(result.bootstrap.ci_low, result.bootstrap.samples[0])

    def test_too_many_failed_replicates(self):
        # Prepare: a single treated row, lost by roughly a third of the resamples
        data = TrialDataset.from_arrays(np.zeros(6), [1, 1, 1, 0, 0, 0], [1, 0, 0, 0, 0, 0], [1, 0, 1, 0, 1, 0])

        # Act / Assert
        with self.assertRaises(TooManyFailuresError):
            bootstrap_estimator("iv_wald", data, replicates=50, seed=0)

    def test_zero_replicates(self):
        with self.assertRaises(DomainError):
            bootstrap_estimator("iv_wald", self.data, replicates=0)

    def test_mixture_estimator_bootstrap(self):
        data = perfect_compliance_data(400, seed=9)
        tolerant = FAST.model_copy(update={"max_failure_share": 1.0})
        result = bootstrap_cace(data, AssumptionSet(True, True), tolerant, replicates=3, seed=1)

        self.assertEqual(result.estimator, "pi_mo_er")
        self.assertEqual(result.bootstrap.replicates, 3)
        self.assertEqual(len(result.bootstrap.samples) + result.bootstrap.failures, 3)


@pytest.mark.slow
class TestLargeSampleBehaviour:
    def test_perfect_compliance_within_two_standard_errors(self):
        data = perfect_compliance_data(20_000, seed=10)
        treated, control = data.y[data.z == 1], data.y[data.z == 0]
        se = math.sqrt(treated.var() / treated.size + control.var() / control.size)

        fit = fit_cace(data, AssumptionSet())

        assert abs(fit.delta_hat - (treated.mean() - control.mean())) < 2 * se

    def test_scenario_four_estimate_is_close_to_population_effect(self):
        # Prepare
        population = draw_population(build_params(seed=2, scenario=4, specification=Specification.WELL), 1_000_000)
        index = np.random.default_rng(4).choice(population.n, size=20_000, replace=False)
        sample = misspecify_view(population.take(index), Specification.WELL)

        # Act
        fit = fit_cace(sample, AssumptionSet(True, True), seed=1)

        # Assert
        assert abs(fit.delta_hat - population.true_delta) < 0.03

    def test_bootstrap_intervals_cover_population_effect(self):
        # Prepare
        population = draw_population(build_params(seed=5, scenario=4, specification=Specification.WELL), 1_000_000)
        cfg = PipelineConfig(solver=SolverConfig(n_starts=1), threads=os.cpu_count() or 1, max_failure_share=0.5)

        # Act
        covered = 0
        for run in range(100):
            index = np.random.default_rng([6, run]).choice(population.n, size=5000, replace=False)
            sample = misspecify_view(population.take(index), Specification.WELL)
            result = bootstrap_cace(sample, AssumptionSet(True, True), cfg, replicates=99, seed=run)
            covered += int(result.bootstrap.ci_low <= population.true_delta <= result.bootstrap.ci_high)

        # Assert
        assert covered >= 85
