import math
import unittest

import numpy as np
import pytest

from core.config import SolverConfig
from core.data import TrialDataset
from core.errors import DegenerateDataError, EmptySubsetError, LearnerContractViolationError, NonBinaryError
from core.gating import (
    GatingModel,
    LearnedGating,
    MultinomialLearner,
    StratumSet,
    compliance_likelihoods,
    em_fit_gating,
    em_fit_gating_nonparametric,
    expert_posteriors,
    nonparametric_gating_step,
    posterior_strata,
)
from core.glm_core import softmax

PLANTED_DELTA = np.array([[0.8, 0.5, -0.4], [-0.2, -0.6, 0.3], [0.3, 0.2, 0.5]])


def compliance_data(n: int, seed: int, delta: np.ndarray = PLANTED_DELTA) -> TrialDataset:
    """Trial rows whose strata follow a reference-coded softmax in two covariates."""
    rng = np.random.default_rng(seed)
    covariates = rng.normal(size=(n, 2))
    X = np.column_stack([np.ones(n), covariates])
    rho = softmax(np.column_stack([X @ delta.T, np.zeros(n)]), axis=1)
    strata = (rng.uniform(size=(n, 1)) > np.cumsum(rho, axis=1)).sum(axis=1)
    z = rng.binomial(1, 0.5, size=n)
    t = np.select([strata == 0, strata == 1, strata == 2], [z, 1, 0], default=1 - z)
    return TrialDataset.from_arrays(covariates, z, t, rng.normal(size=n))


class UniformLearner:
    """Ignores its targets."""

    def fit(self, X, targets):
        self.k = targets.shape[1]
        return self

    def predict_proba(self, X):
        return np.full((X.shape[0], self.k), 1.0 / self.k)


class OracleLearner:
    def __init__(self, one_hot):
        self.one_hot = one_hot

    def fit(self, X, targets):
        return self

    def predict_proba(self, X):
        return self.one_hot


class LeakyLearner(UniformLearner):
    def predict_proba(self, X):
        return np.full((X.shape[0], self.k), 0.9 / self.k)


class TestComplianceLikelihoods:
    @pytest.mark.parametrize(
        "z,t,expected",
        [
            # TestCase1: assigned and treated
            (1, 1, [1, 1, 0, 0]),

            # TestCase2: assigned, not treated
            (1, 0, [0, 0, 1, 1]),

            # TestCase3: not assigned, treated
            (0, 1, [0, 1, 0, 1]),

            # TestCase4: not assigned, not treated
            (0, 0, [1, 0, 1, 0]),
        ],
        ids=["TestCase1", "TestCase2", "TestCase3", "TestCase4"],
    )
    def test_rows(self, z, t, expected):
        np.testing.assert_array_equal(compliance_likelihoods(np.array([z]), np.array([t]))[0], expected)

    def test_monotone_strata_drop_defiers(self):
        likelihoods = compliance_likelihoods(np.array([0, 1]), np.array([1, 0]), StratumSet.MONO3)
        np.testing.assert_array_equal(likelihoods, [[0, 1, 0], [0, 0, 1]])

    def test_non_binary_input(self):
        with pytest.raises(NonBinaryError):
            compliance_likelihoods(np.array([1, 2]), np.array([1, 0]))


class TestPosteriors:
    def test_uniform_prior_first_e_step(self):
        likelihoods = compliance_likelihoods(np.array([1]), np.array([1]))
        posteriors, loglik = expert_posteriors(np.full((1, 4), 0.25), likelihoods)

        np.testing.assert_allclose(posteriors, [[0.5, 0.5, 0.0, 0.0]], atol=1e-15)
        assert loglik == pytest.approx(math.log(0.5))

    def test_fitted_prior_example(self):
        # Prepare: intercept-only gating with priors (0.4, 0.4, 0.1, 0.1)
        model = GatingModel(strata=StratumSet.FULL4, delta=np.array([[math.log(4)], [math.log(4)], [0.0]]))

        # Act
        posteriors = posterior_strata(model, np.array([0]), np.array([0]), np.ones((1, 1)))

        # Assert
        np.testing.assert_allclose(posteriors, [[0.8, 0.0, 0.2, 0.0]], atol=1e-12)

    def test_monotone_always_taker(self):
        model = GatingModel.uniform(StratumSet.MONO3, cols=1)
        posteriors = posterior_strata(model, np.array([0]), np.array([1]), np.ones((1, 1)))
        np.testing.assert_allclose(posteriors, [[0.0, 1.0, 0.0]], atol=1e-15)

    def test_padded_prediction_has_zero_defier_column(self):
        model = GatingModel(strata=StratumSet.MONO3, delta=np.array([[math.log(3)], [0.0]]))
        rho = model.predict(np.ones((2, 1)), padded=True)

        np.testing.assert_allclose(rho[0], [0.6, 0.2, 0.2, 0.0], atol=1e-12)
        assert np.all(rho[:, 3] == 0.0)

    def test_incompatible_prior_falls_back_to_likelihood(self):
        priors = np.array([[0.0, 0.0, 1.0, 0.0]])
        posteriors, _ = expert_posteriors(priors, compliance_likelihoods(np.array([1]), np.array([1])))
        np.testing.assert_allclose(posteriors, [[0.5, 0.5, 0.0, 0.0]])


class TestEmFitGating(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.data = compliance_data(3000, seed=1)
        cls.model = em_fit_gating(cls.data)

    def test_log_likelihood_never_decreases(self):
        path = np.array(self.model.loglik_path)
        self.assertTrue(np.all(np.diff(path) >= -1e-10 * np.maximum(1.0, np.abs(path[:-1]))))

    def test_posteriors_respect_compliance_pattern(self):
        posteriors = posterior_strata(self.model, self.data.z, self.data.t, self.data.X)
        likelihoods = compliance_likelihoods(self.data.z, self.data.t)

        np.testing.assert_allclose(posteriors.sum(axis=1), 1.0, atol=1e-12)
        self.assertTrue(np.all(posteriors[likelihoods == 0] == 0.0))

    def test_model_metadata(self):
        self.assertEqual(self.model.delta.shape, (3, 3))
        self.assertEqual(self.model.design_columns, self.data.covariate_names)
        self.assertAlmostEqual(sum(self.model.posterior_mass), self.data.n, delta=1e-6)

    def test_implied_treatment_rates_match_sample(self):
        # Under the full strata set P(T=1 | Z=1) = rho_c + rho_a and P(T=1 | Z=0) = rho_a + rho_d.
        rho = self.model.predict(self.data.X)
        z = self.data.z == 1
        self.assertAlmostEqual((rho[z, 0] + rho[z, 1]).mean(), self.data.t[z].mean(), delta=0.03)
        self.assertAlmostEqual((rho[~z, 1] + rho[~z, 3]).mean(), self.data.t[~z].mean(), delta=0.03)

    def test_restarts_never_worsen_the_fit(self):
        restarted = em_fit_gating(self.data, cfg=SolverConfig(restarts=2), seed=3)
        self.assertGreaterEqual(restarted.final_loglik, self.model.final_loglik - 1e-8)

    def test_starved_stratum_raises_in_strict_mode(self):
        # Prepare: everyone takes treatment, so no row can be a never-taker
        rng = np.random.default_rng(2)
        data = TrialDataset.from_arrays(rng.normal(size=300), rng.binomial(1, 0.5, 300), np.ones(300), np.zeros(300))

        # Act / Assert
        with self.assertRaises(DegenerateDataError):
            em_fit_gating(data, cfg=SolverConfig(strict=True, em_max_iter=50))

    def test_empty_dataset(self):
        empty = TrialDataset(np.empty((0, 1)), np.empty(0), np.empty(0), np.empty(0))
        with self.assertRaises(EmptySubsetError):
            em_fit_gating(empty)


class TestTreatmentMechanism(unittest.TestCase):
    def test_binned_treatment_rate_matches_fitted_strata(self):
        # Prepare
        data = compliance_data(20_000, seed=12)
        model = em_fit_gating(data)
        rho = model.predict(data.X)
        bins = np.digitize(rho[:, 0], np.quantile(rho[:, 0], [0.2, 0.4, 0.6, 0.8]))

        # Act / Assert: P(T=1 | Z=1) = rho_c + rho_a and P(T=1 | Z=0) = rho_a + rho_d
        for z, implied in ((1, rho[:, 0] + rho[:, 1]), (0, rho[:, 1] + rho[:, 3])):
            for b in range(5):
                rows = (bins == b) & (data.z == z)
                with self.subTest(z=z, bin=b):
                    self.assertAlmostEqual(data.t[rows].mean(), implied[rows].mean(), delta=0.04)


class TestNonparametricGating(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.data = compliance_data(800, seed=4)

    def test_default_learner_reproduces_parametric_iterates(self):
        # Prepare
        parametric_cfg = SolverConfig(em_max_iter=3, em_tol=0.0)
        learner_cfg = SolverConfig(em_max_iter=3, posterior_tol=1e-300)

        # Act
        model = em_fit_gating(self.data, cfg=parametric_cfg)
        learned = em_fit_gating_nonparametric(self.data, cfg=learner_cfg, learner=MultinomialLearner(learner_cfg))

        # Assert
        self.assertEqual(model.iterations, 3)
        self.assertEqual(learned.iterations, 3)
        np.testing.assert_allclose(learned.learner.coef_, model.delta, atol=1e-12)
        np.testing.assert_allclose(learned.loglik_path, model.loglik_path, atol=1e-9)

    def test_constant_learner_keeps_first_e_step(self):
        learned = em_fit_gating_nonparametric(self.data, learner=UniformLearner())
        likelihoods = compliance_likelihoods(self.data.z, self.data.t)
        first_step, _ = expert_posteriors(np.full((self.data.n, 4), 0.25), likelihoods)

        self.assertTrue(learned.converged)
        self.assertEqual(learned.iterations, 1)
        np.testing.assert_allclose(posterior_strata(learned, self.data.z, self.data.t, self.data.X), first_step)

    def test_oracle_learner_gives_one_hot_posteriors(self):
        # Prepare: one row per stratum, then one row the oracle gets wrong
        z = np.array([1, 0, 0, 1, 1])
        t = np.array([1, 1, 0, 0, 1])
        one_hot = np.eye(4)[[0, 1, 2, 3, 2]]
        X = np.ones((5, 1))

        # Act
        priors = nonparametric_gating_step(OracleLearner(one_hot), np.full((5, 4), 0.25), X)
        posteriors, _ = expert_posteriors(priors, compliance_likelihoods(z, t))

        # Assert
        np.testing.assert_array_equal(posteriors[:4], np.eye(4))
        np.testing.assert_allclose(posteriors[4], [0.5, 0.5, 0.0, 0.0])

    def test_learner_contract_is_enforced(self):
        with self.assertRaises(LearnerContractViolationError):
            nonparametric_gating_step(LeakyLearner(), np.full((3, 4), 0.25), np.ones((3, 1)))

    def test_monotone_learned_gating_pads_defiers(self):
        learned = LearnedGating(strata=StratumSet.MONO3, learner=UniformLearner().fit(None, np.zeros((1, 3))))
        rho = learned.predict(np.ones((2, 1)), padded=True)
        np.testing.assert_allclose(rho, [[1 / 3, 1 / 3, 1 / 3, 0.0]] * 2)


@pytest.mark.slow
class TestGatingRecovery:
    def test_planted_complier_share_is_recovered(self):
        # Prepare
        data = compliance_data(100_000, seed=7)
        truth = softmax(np.column_stack([data.X @ PLANTED_DELTA.T, np.zeros(data.n)]), axis=1)

        # Act
        model = em_fit_gating(data)

        # Assert
        assert np.mean(np.abs(model.predict(data.X)[:, 0] - truth[:, 0])) < 0.02

    def test_monotone_fit_recovers_defier_free_population(self):
        # Prepare: three strata, never-takers as the reference
        rng = np.random.default_rng(8)
        covariates = rng.normal(size=(50_000, 2))
        X = np.column_stack([np.ones(50_000), covariates])
        delta = np.array([[0.6, 0.4, -0.3], [-0.4, 0.2, 0.5]])
        rho = softmax(np.column_stack([X @ delta.T, np.zeros(50_000)]), axis=1)
        strata = (rng.uniform(size=(50_000, 1)) > np.cumsum(rho, axis=1)).sum(axis=1)
        z = rng.binomial(1, 0.5, size=50_000)
        t = np.select([strata == 0, strata == 1], [z, 1], default=0)
        data = TrialDataset.from_arrays(covariates, z, t, np.zeros(50_000))

        # Act
        model = em_fit_gating(data, StratumSet.MONO3)

        # Assert
        assert np.max(np.abs(model.delta - delta)) < 0.1

    def test_four_strata_fit_finds_no_defiers(self):
        # Prepare: the defier-free population of the monotone fit, at twice the size
        rng = np.random.default_rng(9)
        covariates = rng.normal(size=(100_000, 2))
        X = np.column_stack([np.ones(100_000), covariates])
        delta = np.array([[0.6, 0.4, -0.3], [-0.4, 0.2, 0.5]])
        rho = softmax(np.column_stack([X @ delta.T, np.zeros(100_000)]), axis=1)
        strata = (rng.uniform(size=(100_000, 1)) > np.cumsum(rho, axis=1)).sum(axis=1)
        z = rng.binomial(1, 0.5, size=100_000)
        t = np.select([strata == 0, strata == 1], [z, 1], default=0)
        data = TrialDataset.from_arrays(covariates, z, t, np.zeros(100_000))

        # Act
        model = em_fit_gating(data, StratumSet.FULL4)

        # Assert
        assert np.mean(model.predict(data.X)[:, 3]) < 0.05
