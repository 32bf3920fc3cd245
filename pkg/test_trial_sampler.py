import os
import time

import numpy as np
import pytest

from count_statistics import fit_decay_time, normalized_variance, unconditional_g2
from model_core import ConfigError, CountRecord, validate
from trial_sampler import BLOCK_SIZE, plan_protocol, run_batch, sample_trial, stream


def test_lossless_chain_matches_counts_every_trial(lossless):
    batch = run_batch(lossless(per_mode_mean=0.8), 20_000)
    assert np.array_equal(batch.stokes, batch.antistokes)
    assert np.array_equal(batch.column("true_stokes"), batch.column("retrieved"))


def test_single_mode_thermal_occupation(lossless):
    config = lossless(per_mode_mean=1.0, mode_count=1)
    trials = 1_000_000
    true_stokes = run_batch(config, trials).column("true_stokes")
    for n, p in ((0, 0.5), (1, 0.25)):
        observed = np.mean(true_stokes == n)
        assert abs(observed - p) < 4 * np.sqrt(p * (1 - p) / trials)


@pytest.mark.parametrize("modes", [1, 2, 4])
def test_stokes_g2_is_multimode_thermal(lossless, modes):
    config = lossless(per_mode_mean=0.5, mode_count=modes, stokes_efficiency=0.5)
    g2 = unconditional_g2(run_batch(config, 200_000), "stokes")
    assert abs(g2.value - (1 + 1 / modes)) < 4 * g2.stderr


def test_blocked_antistokes_channel_is_shot_noise_limited(make_config):
    config = make_config(
        per_mode_mean=0.025, retrieval_model="ideal", stokes_background=0.0,
        antistokes_efficiency=0.0, antistokes_background=0.0,
    )
    batch = run_batch(config, 1_000_000)
    assert batch.stokes.mean() <= 0.1
    assert batch.antistokes.sum() == 0
    assert normalized_variance(batch).value == pytest.approx(1.0, abs=0.05)


def test_antistokes_mean_decays_with_storage_time(lossless):
    config = lossless(per_mode_mean=0.5, decoherence_rate=1 / 3)
    taus = [0.0, 1.0, 2.0, 4.0, 6.0]
    means = [run_batch(config.replace(delay=tau), 200_000).antistokes.mean() for tau in taus]
    fit = fit_decay_time(taus, means)
    assert fit.decay_time == pytest.approx(3.0, rel=0.05)


def test_batch_is_independent_of_worker_count(lossless):
    config = lossless(per_mode_mean=0.5, stokes_efficiency=0.5, antistokes_background=0.1)
    trials = 2 * BLOCK_SIZE + 17
    serial = run_batch(config, trials, workers=1)
    parallel = run_batch(config, trials, workers=2)
    assert len(serial) == trials
    assert np.array_equal(serial.counts, parallel.counts)


def test_seed_controls_the_batch(lossless):
    config = lossless(per_mode_mean=0.5, stokes_efficiency=0.5)
    first = run_batch(config, 5_000, seed=1)
    assert np.array_equal(first.counts, run_batch(config, 5_000, seed=1).counts)
    assert not np.array_equal(first.counts, run_batch(config, 5_000, seed=2).counts)
    assert first.seed == 1


def test_zero_trials_is_an_error(lossless):
    with pytest.raises(ConfigError):
        run_batch(lossless(), 0)


def test_records_view(lossless):
    batch = run_batch(lossless(), 10)
    records = batch.records
    assert len(records) == 10
    assert all(isinstance(r, CountRecord) for r in records)
    assert all(r.stokes == r.antistokes for r in records)


def test_sample_trial_returns_record(reference_config):
    config = reference_config.replace(retrieval_model="ideal")
    record = sample_trial(config, stream(config.rng_seed, 0))
    assert record.true_spin == record.true_stokes
    assert record.retrieved <= record.true_spin
    assert min(record.s1, record.s2, record.as1, record.as2) >= 0


def test_dead_time_path_runs(lossless):
    config = lossless(per_mode_mean=0.5, dead_time=1e-9)
    batch = run_batch(config, 2_000)
    assert np.array_equal(batch.stokes, batch.antistokes)


def test_detected_means_follow_chain(reference_config):
    config = reference_config.replace(retrieval_model="ideal")
    batch = run_batch(config, 200_000)
    true_mean = batch.column("true_stokes").mean()
    expected = config.stokes_efficiency * true_mean + config.stokes_background
    assert batch.stokes.mean() == pytest.approx(expected, rel=0.02)


def test_dead_time_with_an_empty_write_counts_background_only():
    config = validate(dict(single_atom_rate=0.0, dead_time=0.05, retrieval_model="ideal"))
    batch = run_batch(config, 200)
    assert not batch.column("true_stokes").any()
    assert not batch.column("retrieved").any()
    assert batch.stokes.mean() < 1.0


def test_many_mode_pair_total_is_negative_binomial(lossless):
    m = 0.05
    batch = run_batch(lossless(per_mode_mean=m, mode_count=64), 200_000)
    pairs = batch.column("true_stokes").astype(float)
    mean, var = 64 * m, 64 * m * (1 + m)
    assert abs(pairs.mean() - mean) < 4 * np.sqrt(var / pairs.size)
    assert pairs.var() == pytest.approx(var, rel=0.03)


@pytest.mark.slow
def test_million_reference_trials_within_a_minute(reference_config):
    # the retrieval solve is cached per process; time the sampling
    plan_protocol(reference_config)
    started = time.perf_counter()
    batch = run_batch(reference_config, 1_000_000, workers=min(8, os.cpu_count() or 1))
    assert len(batch) == 1_000_000
    assert time.perf_counter() - started < 60.0
