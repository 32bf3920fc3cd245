import numpy as np
import pytest
from scipy.stats import poisson

from exact_oracle import (
    JointDistribution,
    empirical_joint,
    exact_joint,
    exact_stats,
    oracle_check,
    total_variation,
)
from model_core import OracleError
from trial_sampler import run_batch


def product_of_poissons(n_max, mean_s, mean_as):
    n = np.arange(n_max + 1)
    p = np.outer(poisson.pmf(n, mean_s), poisson.pmf(n, mean_as))
    return JointDistribution(n_max=n_max, probabilities=p, tail_mass=1.0 - p.sum())


def test_single_mode_pairs_lie_on_the_diagonal(lossless):
    dist = exact_joint(lossless(per_mode_mean=1.0, mode_count=1))
    p = dist.probabilities
    assert p[0, 0] == pytest.approx(0.5, abs=1e-12)
    assert p[1, 1] == pytest.approx(0.25, abs=1e-12)
    np.testing.assert_allclose(p[~np.eye(dist.n_max + 1, dtype=bool)], 0.0, atol=1e-15)
    assert p.sum() + dist.tail_mass == pytest.approx(1.0, abs=1e-12)
    assert dist.tail_mass < 1e-6


def test_blocked_antistokes_channel_is_a_point_mass(reference_config):
    config = reference_config.replace(retrieval_model="ideal", antistokes_efficiency=0.0, antistokes_background=0.0)
    dist = exact_joint(config)
    marginal = dist.antistokes_marginal
    assert marginal[0] == pytest.approx(1.0 - dist.tail_mass, abs=1e-12)
    np.testing.assert_allclose(marginal[1:], 0.0, atol=1e-15)


def test_storage_thinning_commutes_with_mode_convolution(reference_config):
    config = reference_config.replace(retrieval_model="ideal", delay=2.0)
    after = exact_joint(config).probabilities
    before = exact_joint(config, thin_before_convolution=True).probabilities
    np.testing.assert_allclose(before, after, rtol=0, atol=1e-12)


def test_tail_mass_limit_is_enforced(lossless):
    with pytest.raises(OracleError):
        exact_joint(lossless(per_mode_mean=5.0), n_max=30)


def test_dead_time_has_no_exact_model(lossless):
    with pytest.raises(OracleError):
        exact_joint(lossless(dead_time=0.05))


def test_lossless_distribution_is_perfectly_correlated(lossless):
    stats = exact_stats(exact_joint(lossless(per_mode_mean=0.5)))
    assert stats.v_norm == pytest.approx(0.0, abs=1e-12)
    assert stats.psn_meas == stats.psn_th
    for n_s, mean in stats.mean_as_by_ns.items():
        assert mean.value == pytest.approx(n_s, abs=1e-9)


def test_independent_poissons_sit_at_shot_noise():
    stats = exact_stats(product_of_poissons(30, 1.0, 0.5))
    assert stats.v_norm == pytest.approx(1.0, abs=1e-12)
    for g2 in stats.g2_by_ns.values():
        assert g2.value == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_fock_marginal_has_exact_g2(n):
    p = np.zeros((11, 11))
    p[1, n] = 1.0
    stats = exact_stats(JointDistribution(n_max=10, probabilities=p, tail_mass=0.0))
    assert stats.g2_by_ns[1].value == pytest.approx(1 - 1 / n, abs=1e-12)
    assert stats.q_by_ns[1].value == pytest.approx(-1.0, abs=1e-12)


def test_zeta_reported_from_config(reference_config):
    stats = exact_stats(exact_joint(reference_config.replace(retrieval_model="ideal")))
    expected = reference_config.stokes_background * (1 - reference_config.stokes_efficiency) / (
        stats.mean_s * reference_config.stokes_efficiency
    )
    assert stats.zeta == pytest.approx(expected)


def test_empirical_joint_of_identical_batch_has_zero_distance(lossless):
    batch = run_batch(lossless(per_mode_mean=0.3), 10_000)
    empirical = empirical_joint(batch, 30)
    assert total_variation(empirical, empirical) == 0.0
    assert empirical.probabilities.sum() + empirical.tail_mass == pytest.approx(1.0)


@pytest.mark.slow
def test_monte_carlo_agrees_with_exact_distribution(reference_config):
    report = oracle_check(reference_config, 1_000_000)
    assert report.total_variation < 1e-2
    assert report.z_scores
    assert all(abs(z) < 4 for z in report.z_scores.values())


@pytest.mark.slow
def test_monte_carlo_agrees_with_exact_lossless_chain(lossless):
    config = lossless(per_mode_mean=0.4, stokes_efficiency=0.6, antistokes_efficiency=0.5, antistokes_background=0.1)
    report = oracle_check(config, 1_000_000, workers=2)
    assert report.total_variation < 1e-2
    assert all(abs(z) < 4 for z in report.z_scores.values())
