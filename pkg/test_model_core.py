import json
import math

import numpy as np
import pytest

from model_core import (
    ConfigError,
    ExperimentConfig,
    PulseProfile,
    SpinWaveProfile,
    StatsSummary,
    load_config,
    validate,
)


def test_validate_derives_collective_rate():
    config = validate({"optical_depth": 20, "single_atom_rate": 0.05})
    assert config.xi == pytest.approx(1.0)
    assert config.reference_group_velocity > 0


def test_validate_names_bad_field():
    with pytest.raises(ConfigError) as info:
        validate({"stokes_efficiency": 1.2})
    assert "stokes_efficiency" in str(info.value)


def test_validate_reports_every_problem():
    with pytest.raises(ConfigError) as info:
        validate({"stokes_efficiency": 1.2, "mode_count": 0, "delay": -1})
    assert len(info.value.problems) == 3


@pytest.mark.parametrize("value", [math.nan, math.inf])
def test_validate_rejects_non_finite(value):
    with pytest.raises(ConfigError):
        validate({"optical_depth": value})


def test_validate_rejects_unknown_keys():
    with pytest.raises(ConfigError) as info:
        validate({"opticaldepth": 20})
    assert "opticaldepth" in str(info.value)


def test_validate_is_idempotent():
    once = validate({"optical_depth": 35, "delay": 2.0})
    assert validate(once) == once
    assert validate(once.experiment_config()) == once


def test_reference_config_is_accepted(reference_config):
    assert reference_config.optical_depth == 20
    assert reference_config.mode_count == 64
    assert reference_config.decoherence_rate == pytest.approx(1 / 3)


def test_cell_length_is_fixed():
    with pytest.raises(ConfigError):
        validate({"cell_length": 2.0})


@pytest.mark.parametrize("coupling", [0.0, -1.0, ((0.5, 1.0),), ((0.0, 1.0), (0.0, 2.0)), ((0.0, 0.0),)])
def test_invalid_couplings(coupling):
    with pytest.raises(ConfigError):
        validate({"retrieve_coupling": coupling})


def test_replace_revalidates():
    config = validate({})
    assert config.replace(delay=3.0).delay == 3.0
    with pytest.raises(ConfigError):
        config.replace(antistokes_efficiency=2.0)


def test_every_field_round_trips_through_file(tmp_path):
    original = ExperimentConfig(
        optical_depth=33.0,
        single_atom_rate=0.02,
        write_duration=1.2,
        mode_count=3,
        decoherence_rate=0.25,
        delay=1.5,
        retrieve_coupling=((0.0, 0.5), (2.0, 1.5)),
        stokes_efficiency=0.5,
        antistokes_efficiency=0.4,
        stokes_background=0.1,
        antistokes_background=0.05,
        dead_time=0.05,
        rng_seed=7,
        excited_state_decay=12.0,
        spatial_points=128,
        retrieve_duration=10.0,
        retrieval_model="ideal",
        afterpulsing=True,
    )
    data = json.loads(original.to_json())
    assert set(data) == set(ExperimentConfig.model_fields)

    path = tmp_path / "config.json"
    path.write_text(original.to_json(), encoding="utf-8")
    assert load_config(path).experiment_config() == original


def test_load_config_rejects_bad_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(path)


def test_pulse_profile_total_and_width():
    pulse = PulseProfile(t0=0.0, dt=0.1, flux=np.ones(10))
    assert pulse.total == pytest.approx(1.0)
    assert pulse.fwhm() == pytest.approx(1.0)
    assert pulse.time_to_fraction(0.9) == pytest.approx(0.9)


def test_pulse_profile_rejects_bad_values():
    with pytest.raises(ValueError):
        PulseProfile(t0=0.0, dt=0.0, flux=np.ones(3))
    with pytest.raises(ValueError):
        PulseProfile(t0=0.0, dt=0.1, flux=np.array([1.0, -0.1]))


def test_spin_wave_profile_checks_total():
    z = np.linspace(0.0, 1.0, 64)
    with pytest.raises(ValueError):
        SpinWaveProfile(z=z, density=np.ones(64), total=2.0)
    assert SpinWaveProfile.uniform(2.0, 64).total == pytest.approx(2.0)


def test_stats_summary_requires_consistent_psn():
    with pytest.raises(ValueError):
        StatsSummary(mean_s=1.0, mean_as=0.5, psn_meas=1.5, psn_th=1.4, v_norm=0.9, v_stderr=0.01)
    with pytest.raises(ValueError):
        StatsSummary(mean_s=1.0, mean_as=0.5, psn_meas=1.5, psn_th=1.5, v_norm=-0.1, v_stderr=0.01)
