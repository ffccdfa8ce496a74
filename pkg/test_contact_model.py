#!/usr/bin/env python3
"""
Tests for plate materials, the stylus-plate contact law and tap simulation
"""

import json

import numpy as np
import pytest

from ethd.contact_model import (
    CONTACT_GAIN, RENDERED_RANGE, ContactParams, PlateSpec, ShoreScale, TapProfile, derive_contact_params,
    equivalent_shore_a, find_plate, hertz_contact_time, load_plates, plate_contact, press_pulse,
    select_plate_subset, shore_to_modulus, simulate_session, simulate_tap, simulate_taps, write_tap_signal,
)
from ethd.dsp import DURATION_EDGES_MS, DurationClass, extract_features, features_row, read_tap_signal
from ethd.errors import ConfigError, DomainError, ProtocolError


@pytest.fixture(scope="module")
def plates():
    return {p.label: p for p in load_plates("table2")}


def test_plate_tables_load():
    table1 = load_plates("table1")
    assert len(table1) == 11
    assert table1[0].label == "10OO" and table1[-1].label == "75D"
    assert table1[-1].thickness == pytest.approx(0.003175)
    assert [p.label for p in load_plates("table2")] == ["P1", "P2", "P3", "P4", "P5"]
    assert find_plate("P3") == load_plates("table2")[2]
    with pytest.raises(DomainError):
        find_plate("10OO")
    with pytest.raises(ConfigError):
        load_plates("table3")


def test_plate_spec_validation():
    assert PlateSpec("A", 60).label == "60A"
    assert PlateSpec(ShoreScale.D, 75).shore_scale is ShoreScale.D
    with pytest.raises(DomainError):
        PlateSpec("A", 100)
    with pytest.raises(DomainError):
        PlateSpec("B", 50)


def test_shore_to_modulus_gent():
    assert shore_to_modulus(PlateSpec("A", 60)) / 1e6 == pytest.approx(3.6, abs=0.05)


def test_modulus_increases_across_scales():
    labels = [p for p in load_plates("table1")]
    moduli = [shore_to_modulus(p) for p in labels]
    assert all(b > a for a, b in zip(moduli, moduli[1:]))
    assert equivalent_shore_a(PlateSpec("OO", 30)) == pytest.approx(0.0)


def test_contact_stiffness_spans_plates(plates):
    profile = TapProfile()
    k_c = {label: plate_contact(plate, profile).k_c for label, plate in plates.items()}
    assert k_c["P1"] == pytest.approx(CONTACT_GAIN * 7551, rel=0.02)
    assert k_c["P5"] / k_c["P1"] > 100
    assert [k_c[l] for l in ("P1", "P2", "P3", "P4", "P5")] == sorted(k_c.values())


def test_every_plate_outstiffs_the_rendered_wall():
    """At 1 mm indentation each plate is 50 times stiffer than the stiffest wall"""
    profile = TapProfile()
    wall = RENDERED_RANGE[1]
    for plate in load_plates("table1"):
        assert plate_contact(plate, profile).k_c * np.sqrt(1e-3) >= 50.0 * wall, plate.label


def test_contact_params_validation():
    with pytest.raises(DomainError):
        ContactParams(k_c=0.0)
    with pytest.raises(DomainError):
        derive_contact_params(1e6, PlateSpec("A", 60), tip_radius=0.0)


def test_hertz_contact_time():
    contact = ContactParams(k_c=1e5)
    assert hertz_contact_time(contact, 0.03, 0.0) == float("inf")
    assert hertz_contact_time(contact, 0.03, 0.3) < hertz_contact_time(contact, 0.03, 0.1)


def test_tap_profile_validation():
    with pytest.raises(DomainError):
        TapProfile(tap_rate=8.0)
    with pytest.raises(DomainError):
        TapProfile(approach_velocity=-0.1)
    with pytest.raises(DomainError):
        TapProfile(press_time=0.0)
    with pytest.raises(DomainError):
        TapProfile(press_jitter=1.0)
    # a 0.18 s press cannot release within half of a 0.2 s tap period
    with pytest.raises(DomainError):
        TapProfile(tap_rate=5.0, press_time=0.15, press_jitter=0.2)
    assert TapProfile(tap_rate=5.0, press_time=0.08).press_time == 0.08
    with pytest.raises(ConfigError):
        TapProfile.from_mapping({"velocity": 0.2})
    assert TapProfile.from_mapping({"press_force": 0.0}).press_force == 0.0


def test_press_pulse_preserves_impulse():
    pulse = press_pulse(4.0, 0.1, 10000.0)
    assert pulse[0] == 0.0 and pulse[-1] == pytest.approx(0.0, abs=1e-12)
    assert pulse.sum() / 10000.0 == pytest.approx(4.0 * 0.1 / 2.0, rel=1e-9)
    assert pulse.max() == pytest.approx(4.0, rel=1e-3)


def test_tap_impulse_matches_collision(plates):
    """Without the hand press, the strike impulse lies between a plastic and an elastic collision"""
    profile = TapProfile(press_force=0.0)
    tap = simulate_tap(plates["P2"], 1000.0, profile)
    impulse = tap.samples.sum() / tap.sample_rate
    reduced = profile.stylus_mass * 1.0 / (profile.stylus_mass + 1.0)
    v = profile.approach_velocity
    assert 0.9 * reduced * v <= impulse <= 2.05 * reduced * v


def test_hardest_strike_survives_sampling(plates):
    """A strike shorter than a sample still carries its impulse into the signal"""
    profile = TapProfile(press_force=0.0)
    tap = simulate_tap(plates["P5"], 1000.0, profile)
    assert np.count_nonzero(tap.samples) <= 4
    reduced = profile.stylus_mass * 1.0 / (profile.stylus_mass + 1.0)
    assert tap.samples.sum() / tap.sample_rate >= 0.9 * reduced * profile.approach_velocity


def test_harder_plate_gives_shorter_tap(plates):
    soft = simulate_tap(plates["P1"], 1000.0)
    hard = simulate_tap(plates["P5"], 1000.0)
    soft_tap = extract_features(soft, crop_window=None).features
    hard_tap = extract_features(hard, crop_window=None).features
    assert hard_tap.duration < soft_tap.duration
    assert hard.samples.max() > soft.samples.max()
    for features in (soft_tap, hard_tap):
        assert 0.020 <= features.duration <= 0.288


@pytest.mark.parametrize("k_des", [200.0, 1000.0, 2000.0])
def test_default_taps_last_within_tapping_envelope(k_des):
    for plate in load_plates("table1"):
        for tap in simulate_taps(plate, k_des, 8, seed=3):
            features = extract_features(tap, crop_window=None).features
            assert DURATION_EDGES_MS[0] <= features.duration * 1000.0 <= DURATION_EDGES_MS[-1], plate.label
            assert isinstance(features.duration_class, DurationClass)


def test_session_durations_are_classified(plates):
    for label in ("P1", "P5"):
        row = features_row(label, 1000.0, extract_features(simulate_session(plates[label], 1000.0, seed=2)).features)
        assert 20.0 <= row["duration_ms"] <= 288.0
        assert row["duration_class"] in {c.value for c in DurationClass}


def test_zero_approach_velocity_is_null_tap(plates):
    tap = simulate_tap(plates["P3"], 500.0, TapProfile(approach_velocity=0.0))
    assert not tap.samples.any()


def test_rendered_stiffness_range(plates):
    with pytest.raises(DomainError):
        simulate_tap(plates["P3"], 150.0)
    with pytest.raises(DomainError):
        simulate_tap(plates["P3"], 2500.0)


def test_session_has_taps_in_crop_window(plates):
    signal = simulate_session(plates["P3"], 800.0, seed=5)
    assert signal.duration == pytest.approx(13.0)
    analysis = extract_features(signal)
    assert analysis.n_taps >= 10
    assert signal.meta["plate"] == "P3"


def test_session_is_deterministic(plates):
    first = simulate_session(plates["P4"], 1200.0, seed=9)
    second = simulate_session(plates["P4"], 1200.0, seed=9)
    other = simulate_session(plates["P4"], 1200.0, seed=10)
    assert np.array_equal(first.samples, second.samples)
    assert not np.array_equal(first.samples, other.samples)


def test_session_schedule_checks(plates):
    with pytest.raises(ProtocolError):
        simulate_session(plates["P1"], 500.0, n_taps=40, duration=13.0)
    with pytest.raises(ProtocolError):
        simulate_session(plates["P1"], 500.0, n_taps=0)
    with pytest.raises(ProtocolError):
        simulate_session(plates["P1"], 500.0, n_taps=30, first_tap=5.0)


def test_first_tap_pins_onset(plates):
    signal = simulate_session(plates["P2"], 600.0, n_taps=5, duration=3.0, first_tap=0.7)
    first = np.flatnonzero(signal.samples)[0] / signal.sample_rate
    assert first == pytest.approx(0.7, abs=2.0 / signal.sample_rate)


def test_select_plate_subset():
    sc = {"a": 100.0, "b": 150.0, "c": 200.0, "d": 400.0}
    assert select_plate_subset(sc, 3) == ["a", "c", "d"]
    assert sorted(select_plate_subset(sc, 4)) == ["a", "b", "c", "d"]
    with pytest.raises(DomainError):
        select_plate_subset(sc, 5)


def test_tap_signal_file(tmp_path, plates):
    signal = simulate_session(plates["P5"], 400.0, n_taps=3, duration=2.0, seed=1)
    path = write_tap_signal(tmp_path / "P5.csv", signal)
    meta = json.loads(path.with_suffix(".json").read_text())
    assert meta["plate"] == "P5"

    loaded = read_tap_signal(path)
    assert loaded.sample_rate == pytest.approx(signal.sample_rate)
    assert np.allclose(loaded.samples, signal.samples, rtol=1e-9, atol=1e-12)
