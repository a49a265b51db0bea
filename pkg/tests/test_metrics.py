import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feddm.denoiser import MlpDenoiser, init_params
from feddm.diffusion import DiffusionConfig, build_linear_schedule
from feddm.errors import ContractionError
from feddm.metrics import (
    GaussianStats,
    estimate_lipschitz,
    fit_gaussian,
    frechet_distance,
    probe_trained_model,
    verify_contraction_bound,
)


def random_psd_stats(rng, dim):
    basis = rng.standard_normal((dim, dim))
    return GaussianStats(rng.standard_normal(dim), basis @ basis.T + 1e-6 * np.eye(dim))


class TestFitGaussian:
    def test_identical_samples_zero_cov(self):
        stats = fit_gaussian(np.tile([1.5, -2.0], (10, 1)))
        assert np.allclose(stats.cov, 0.0)
        assert np.allclose(stats.mean, [1.5, -2.0])

    def test_two_scalar_samples_unbiased(self):
        stats = fit_gaussian(np.array([[0.0], [2.0]]))
        assert stats.mean[0] == 1.0
        assert stats.cov[0, 0] == 2.0  # divisor n - 1

    def test_standard_normal_monte_carlo(self):
        rng = np.random.default_rng(0)
        stats = fit_gaussian(rng.standard_normal((100_000, 2)))
        assert np.all(np.abs(stats.mean) <= 0.02)
        assert np.max(np.abs(stats.cov - np.eye(2))) <= 0.05

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            fit_gaussian(np.zeros((1, 2)))

    def test_invariants_validated(self):
        with pytest.raises(ValueError):
            GaussianStats([0.0, 0.0], [[1.0, 0.5], [0.2, 1.0]])  # asymmetric
        with pytest.raises(ValueError):
            GaussianStats([0.0, 0.0], [[1.0, 0.0], [0.0, -0.5]])  # not PSD


class TestFrechetDistance:
    def test_self_distance_zero(self):
        rng = np.random.default_rng(1)
        for dim in (1, 2, 5):
            stats = random_psd_stats(rng, dim)
            assert frechet_distance(stats, stats) <= 1e-9

    def test_equal_cov_mean_shift(self):
        rng = np.random.default_rng(2)
        stats = random_psd_stats(rng, 3)
        shift = np.array([0.3, -1.2, 0.5])
        other = GaussianStats(stats.mean + shift, stats.cov)
        assert frechet_distance(stats, other) == pytest.approx(float(shift @ shift), abs=1e-9)

    def test_one_dimensional_closed_form(self):
        # variances 4 and 1, equal means: (sqrt(4) - sqrt(1))^2 = 1
        a = GaussianStats([0.0], [[4.0]])
        b = GaussianStats([0.0], [[1.0]])
        assert frechet_distance(a, b) == pytest.approx(1.0, abs=1e-9)

    @given(seed=st.integers(min_value=0, max_value=10_000), dim=st.integers(min_value=1, max_value=4))
    def test_symmetry(self, seed, dim):
        rng = np.random.default_rng(seed)
        a, b = random_psd_stats(rng, dim), random_psd_stats(rng, dim)
        assert abs(frechet_distance(a, b) - frechet_distance(b, a)) <= 1e-9

    @given(seed=st.integers(min_value=0, max_value=10_000), dim=st.integers(min_value=1, max_value=4))
    def test_commuting_diagonal_identity(self, seed, dim):
        rng = np.random.default_rng(seed)
        a_diag = rng.uniform(0.1, 5.0, dim)
        b_diag = rng.uniform(0.1, 5.0, dim)
        a = GaussianStats(np.zeros(dim), np.diag(a_diag))
        b = GaussianStats(np.zeros(dim), np.diag(b_diag))
        expected = float(np.sum((np.sqrt(a_diag) - np.sqrt(b_diag)) ** 2))
        assert frechet_distance(a, b) == pytest.approx(expected, abs=1e-9)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            frechet_distance(
                GaussianStats([0.0], [[1.0]]), GaussianStats([0.0, 0.0], np.eye(2))
            )

    def test_nonnegative_on_random_pairs(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a, b = random_psd_stats(rng, 3), random_psd_stats(rng, 3)
            assert frechet_distance(a, b) >= 0.0


class TestEstimateLipschitz:
    def test_linear_half_map_exact(self):
        rng = np.random.default_rng(4)
        domain = rng.standard_normal((64, 3))
        est = estimate_lipschitz(lambda x: 0.5 * x, domain, pairs=200, seed=0)
        assert est == 0.5

    def test_constant_map_zero(self):
        rng = np.random.default_rng(5)
        domain = rng.standard_normal((32, 2))
        est = estimate_lipschitz(lambda x: np.ones_like(x), domain, pairs=100, seed=0)
        assert est == 0.0

    def test_matrix_map_bounded_by_spectral_norm(self):
        a_map = np.array([[0.8, 0.3], [0.0, 0.4]])
        spectral = math.sqrt(float(np.linalg.eigvalsh(a_map.T @ a_map).max()))
        rng = np.random.default_rng(6)
        domain = rng.standard_normal((512, 2))
        few = estimate_lipschitz(lambda x: x @ a_map.T, domain, pairs=10, seed=1)
        many = estimate_lipschitz(lambda x: x @ a_map.T, domain, pairs=5000, seed=1)
        assert few <= many <= spectral + 1e-12
        assert many >= 0.98 * spectral

    def test_identical_samples_rejected(self):
        with pytest.raises(ValueError):
            estimate_lipschitz(lambda x: x, np.ones((8, 2)), pairs=10, seed=0)


class TestVerifyContractionBound:
    def test_single_half_map_exact_decay(self):
        probe = verify_contraction_bound(
            [lambda x: 0.5 * x], [1.0], noise_std=0.0, x0=[1.0], steps=20, trials=1, seed=0
        )
        expected = 0.5 ** np.arange(21) * probe.trajectory[0]
        assert np.max(np.abs(probe.trajectory - expected)) <= 1e-9
        assert probe.satisfied
        assert abs(probe.trajectory[0] - 1.0) <= 1e-9
        assert probe.aggregate_estimate == pytest.approx(0.5)

    def test_two_map_ensemble_aggregates(self):
        probe = verify_contraction_bound(
            [lambda x: 0.3 * x, lambda x: 0.7 * x],
            [0.5, 0.5],
            noise_std=0.0,
            x0=[2.0, -1.0],
            steps=10,
            trials=1,
            seed=1,
        )
        assert probe.aggregate_estimate == pytest.approx(0.5, abs=1e-12)
        assert np.linalg.norm(probe.fixed_point) <= 1e-9
        assert probe.satisfied

    def test_affine_ensemble_fixed_point(self):
        # avg map: 0.5 x + 0.065, fixed point 0.13
        maps = [
            lambda x: 0.2 * x + 0.3,
            lambda x: 0.5 * x - 0.1,
            lambda x: 0.8 * x + 0.05,
        ]
        probe = verify_contraction_bound(
            maps, [0.3, 0.4, 0.3], noise_std=0.0, x0=[1.0], steps=25, trials=1, seed=2
        )
        assert probe.fixed_point[0] == pytest.approx(0.13, abs=1e-9)
        assert probe.satisfied

    def test_noisy_ar1_stationary_level(self):
        # x' = 0.5 x + zeta, zeta ~ N(0, 0.1^2): stationary sd = 0.1 / sqrt(0.75),
        # so the late-step mean distance approaches sqrt(2/pi) * sd
        probe = verify_contraction_bound(
            [lambda x: 0.5 * x], [1.0], noise_std=0.1, x0=[1.0], steps=40, trials=10_000, seed=3
        )
        assert probe.satisfied
        stationary = math.sqrt(2 / math.pi) * 0.1 / math.sqrt(1 - 0.25)
        tail = probe.trajectory[-5:]
        assert np.all(np.abs(tail - stationary) <= 4 * probe.stderr[-5:] + 1e-3)
        assert np.all(tail <= 0.1 / (1 - 0.5))

    def test_expanding_map_raises(self):
        with pytest.raises(ContractionError):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                verify_contraction_bound(
                    [lambda x: 1.1 * x], [1.0], noise_std=0.0, x0=[1.0], steps=5, trials=1, seed=4
                )

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            verify_contraction_bound(
                [lambda x: 0.5 * x], [0.9], noise_std=0.0, x0=[1.0], steps=5, trials=1, seed=5
            )

    def test_json_round_trip(self, tmp_path):
        import json

        probe = verify_contraction_bound(
            [lambda x: 0.5 * x], [1.0], noise_std=0.0, x0=[1.0], steps=5, trials=1, seed=6
        )
        path = tmp_path / "probe.json"
        probe.save(path)
        loaded = json.loads(path.read_text())
        assert loaded["aggregate_estimate"] == pytest.approx(0.5)
        assert loaded["satisfied"] is True
        assert len(loaded["trajectory"]) == 6


class TestProbeTrainedModel:
    def test_zero_network_matches_linear_constant(self):
        # zero predictor turns the last reverse step into x / sqrt(alpha_T)
        sched = build_linear_schedule(DiffusionConfig(timesteps=10))
        arch = MlpDenoiser.for_data(2, (4,), "tanh", 1)
        theta = init_params(arch, 0).with_values(np.zeros(arch.num_params))
        probe = probe_trained_model(arch, theta, sched, samples=64, seed=0)
        expected = 1.0 / math.sqrt(float(sched.alphas[-1]))
        assert probe.aggregate_estimate == pytest.approx(expected, abs=1e-12)

    def test_deterministic_per_seed(self):
        sched = build_linear_schedule(DiffusionConfig(timesteps=10))
        arch = MlpDenoiser.for_data(2, (6,), "tanh", 1)
        theta = init_params(arch, 1)
        a = probe_trained_model(arch, theta, sched, samples=64, seed=3)
        b = probe_trained_model(arch, theta, sched, samples=64, seed=3)
        assert a.aggregate_estimate == b.aggregate_estimate

    def test_reports_estimate_for_trained_weights(self):
        sched = build_linear_schedule(DiffusionConfig(timesteps=10))
        arch = MlpDenoiser.for_data(2, (6,), "tanh", 1)
        theta = init_params(arch, 2)
        probe = probe_trained_model(arch, theta, sched, samples=64, seed=4)
        assert probe.aggregate_estimate > 0
        assert probe.satisfied == (probe.aggregate_estimate < 1.0)
