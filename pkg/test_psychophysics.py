#!/usr/bin/env python3
"""
Tests for the staircase procedure, the simulated observer and the Weber grid
"""

import warnings
from dataclasses import replace

import numpy as np
import pytest
from scipy.special import ndtr
from scipy.stats import ks_2samp

from ethd.errors import (
    DomainError, NonConvergenceError, ProtocolDeviationWarning, ProtocolError, StaircaseStateError,
)
from ethd.psychophysics import (
    DEFAULT_MASKING, GRID_COLUMNS, PLATE_ORDER, PROTOCOL_REFERENCES, TRIAL_COLUMNS, Direction, MaskingModel,
    ObserverModel, StaircaseConfig, StaircaseState, WeberResult, cell_tap_durations, grid_to_frame, p_correct,
    record_response, respond, run_cell, run_staircase, summarize_grid, trial_log_frame, weber_grid, write_trial_log,
)
from ethd.seeding import make_rng


def play(cfg, answers):
    state = StaircaseState.start(cfg)
    for answer in answers:
        record_response(state, cfg, answer == "C")
    return state


def test_forgiveness_trace():
    """C,C,C,W,C,C,C,C: the reversal is taken back after four correct answers"""
    cfg = StaircaseConfig(reference_k=1000.0)
    state = play(cfg, "CCCWCCCC")
    assert state.reversal_values == []
    assert [r.test_k for r in state.trial_log] == [200, 300, 400, 500, 400, 500, 600, 700]
    assert state.trial_log[3].reversal and state.trial_log[3].forgiven_reversal
    assert not state.pending_forgiveness


def test_trace_without_forgiveness_keeps_reversal():
    cfg = StaircaseConfig(reference_k=1000.0, forgiveness=False)
    state = play(cfg, "CCCWCCCC")
    assert state.reversal_values == [500.0]
    assert not state.trial_log[3].forgiven_reversal


def test_three_corrects_do_not_forgive():
    cfg = StaircaseConfig(reference_k=1000.0)
    state = play(cfg, "CCCWCCC")
    assert state.reversal_values == [500.0]
    assert state.pending_forgiveness


def test_error_while_descending_is_not_a_reversal():
    cfg = StaircaseConfig(reference_k=1000.0)
    state = play(cfg, "CCWW")
    assert state.reversal_values == [400.0]
    assert [r.reversal for r in state.trial_log] == [False, False, True, False]
    assert state.direction is Direction.DOWN
    assert not state.pending_forgiveness


def test_alternating_answers_stop_at_five_reversals():
    cfg = StaircaseConfig(reference_k=1000.0)
    state = play(cfg, "CWCWCWCWCW")
    assert state.terminated
    assert state.reversal_values == [300.0] * 5
    assert [r.reversal for r in state.trial_log] == [False, True] * 5
    assert not any(r.forgiven_reversal for r in state.trial_log)


def test_levels_are_clamped():
    cfg = StaircaseConfig(reference_k=500.0, step=50.0)
    low = play(cfg, "W")
    assert low.test_k == cfg.start_k
    high = play(replace(cfg, reversals_to_stop=99), "C" * 20)
    assert high.test_k == 450.0
    assert max(r.test_k for r in high.trial_log) == 450.0


def test_staircase_terminates_and_locks():
    cfg = StaircaseConfig(reference_k=1000.0, reversals_to_stop=2, forgiveness=False)
    state = play(cfg, "CCWCW")
    assert state.terminated
    assert state.reversal_values == [400.0, 400.0]
    with pytest.raises(StaircaseStateError):
        record_response(state, cfg, True)


def test_weber_fraction_from_reversals():
    result = WeberResult.from_reversals([400, 450, 400, 450, 400], 500.0)
    assert result.threshold_k == pytest.approx(420.0)
    assert result.jnd == pytest.approx(80.0)
    assert result.weber_fraction == pytest.approx(0.16)
    with pytest.raises(DomainError):
        WeberResult.from_reversals([], 500.0)


def test_staircase_config_checks():
    with pytest.raises(DomainError):
        StaircaseConfig(reference_k=200.0)
    with pytest.raises(DomainError):
        StaircaseConfig(reference_k=1000.0, step=0.0)
    assert StaircaseConfig.for_reference(500.0).step == 50.0
    assert StaircaseConfig.for_reference(1500.0).step == 100.0
    with pytest.warns(ProtocolDeviationWarning):
        StaircaseConfig.for_reference(1250.0)


def test_observer():
    observer = ObserverModel(sigma=100.0)
    assert p_correct(observer, 1000.0, 1000.0 - 1e-9) == pytest.approx(0.5)
    assert p_correct(observer, 1000.0, 200.0) == pytest.approx(1.0)
    lapsing = ObserverModel(sigma=100.0, lapse_rate=0.1)
    assert p_correct(lapsing, 1000.0, 200.0) == pytest.approx(0.95)
    with pytest.raises(ProtocolError):
        respond(observer, 1000.0, 1000.0)
    with pytest.raises(DomainError):
        ObserverModel(sigma=100.0, lapse_rate=0.3)
    with pytest.raises(DomainError):
        ObserverModel(sigma=0.0)


def test_run_staircase_is_deterministic():
    cfg = StaircaseConfig.for_reference(1000.0)
    observer = ObserverModel(sigma=100.0, seed=3)
    first, state_a = run_staircase(cfg, observer, seed=42)
    second, state_b = run_staircase(cfg, observer, seed=42)
    assert first == second
    assert [r.test_k for r in state_a.trial_log] == [r.test_k for r in state_b.trial_log]
    assert len(state_a.reversal_values) == cfg.reversals_to_stop
    assert 0 < first.weber_fraction < 1


def test_run_staircase_reports_nonconvergence():
    cfg = StaircaseConfig(reference_k=1000.0, max_trials=5)
    with pytest.raises(NonConvergenceError) as info:
        run_staircase(cfg, ObserverModel(sigma=100.0), seed=1)
    assert info.value.state.n_trials == 5


def test_noiseless_observer_never_reverses():
    """An observer that never errs climbs to the ceiling and cannot finish"""
    cfg = StaircaseConfig.for_reference(1000.0)
    with pytest.raises(NonConvergenceError) as info:
        run_staircase(cfg, ObserverModel(sigma=1e-9), seed=0)
    state = info.value.state
    assert state.reversal_values == []
    assert state.n_trials == cfg.max_trials
    assert state.test_k == cfg.ceiling


def brute_force_peak_level(reference, sigma, step, start, n_trials=100000, seed=0):
    """Mean surviving peak of one long 1-up/1-down walk with the same clamps and forgiveness"""
    u = np.random.default_rng(seed).random(n_trials)
    levels = np.arange(start, reference - step / 2.0, step)
    p = dict(zip(levels, ndtr((reference - levels) / (sigma * np.sqrt(2.0)))))
    level, going_up, pending, streak, peaks = levels[0], True, False, 0, []
    for draw in u:
        if draw < p[level]:
            if pending:
                streak += 1
                if streak >= 4:
                    peaks.pop()
                    pending, streak = False, 0
            level, going_up = min(level + step, levels[-1]), True
        else:
            if going_up:
                peaks.append(level)
            pending, streak = going_up, 0
            level, going_up = max(level - step, levels[0]), False
    return float(np.mean(peaks[10:]))


@pytest.mark.slow
def test_staircase_matches_brute_force_oracle():
    for reference in PROTOCOL_REFERENCES:
        cfg = StaircaseConfig.for_reference(reference)
        sigma = 0.1 * reference
        wf = []
        for run in range(200):
            result, _ = run_staircase(cfg, ObserverModel(sigma=sigma, seed=run), seed=run)
            wf.append(result.weber_fraction)
        oracle = 1.0 - brute_force_peak_level(reference, sigma, cfg.step, cfg.start_k) / reference
        assert np.mean(wf) == pytest.approx(oracle, rel=0.2)
        # reversal levels never pass the ceiling one step below the reference
        assert min(wf) >= cfg.step / reference - 1e-12


def test_weber_fraction_scale_invariant():
    """Proportional references, steps and noise give the same Weber fractions"""
    by_reference = {}
    for reference in (1000.0, 1500.0, 2000.0):
        cfg = StaircaseConfig(reference_k=reference, start_k=0.2 * reference, step=0.1 * reference)
        by_reference[reference] = np.array([
            run_staircase(cfg, ObserverModel(sigma=0.1 * reference, seed=run), seed=run)[0].weber_fraction
            for run in range(200)
        ])
    for reference in (1500.0, 2000.0):
        assert ks_2samp(by_reference[1000.0], by_reference[reference]).statistic < 0.1
        assert np.allclose(by_reference[1000.0], by_reference[reference])


@pytest.mark.slow
def test_forgiveness_reduces_lapse_bias():
    """Lapses drag thresholds down less when the last reversal can be forgiven"""
    with_rule = StaircaseConfig.for_reference(2000.0)
    without_rule = replace(with_rule, forgiveness=False)
    bias = {True: [], False: []}
    for run in range(400):
        for cfg in (with_rule, without_rule):
            try:
                clean, _ = run_staircase(cfg, ObserverModel(sigma=200.0, seed=run), seed=run)
                lapsed, _ = run_staircase(cfg, ObserverModel(sigma=200.0, lapse_rate=0.05, seed=run), seed=run)
            except NonConvergenceError:
                continue
            bias[cfg.forgiveness].append(abs(lapsed.threshold_k - clean.threshold_k))
    assert np.mean(bias[True]) < np.mean(bias[False])


def test_masking_model():
    assert DEFAULT_MASKING.sigma("P1", 500.0) == pytest.approx(40.0)
    assert DEFAULT_MASKING.sigma("P5", 1000.0) == pytest.approx(0.16 * 1000.0 * 8.0)
    with pytest.raises(DomainError):
        DEFAULT_MASKING.sigma("P9", 500.0)
    custom = MaskingModel.from_mapping({"weights": {"P1": 0.2}, "exponent": 0.0})
    assert custom.observer("P1", 1000.0).sigma == pytest.approx(200.0)


def test_run_cell_records_every_run():
    runs = run_cell("P2", 1000.0, DEFAULT_MASKING.observer, runs=6, seed=4)
    assert [r.run for r in runs] == list(range(6))
    assert all(20.0 <= r.tap_duration * 1000.0 <= 288.0 for r in runs)
    assert runs == run_cell("P2", 1000.0, DEFAULT_MASKING.observer, runs=6, seed=4)

    stuck = run_cell("P2", 1000.0, DEFAULT_MASKING.observer, runs=2, seed=4, staircase={"max_trials": 3})
    assert not any(r.converged for r in stuck)
    assert all(r.error for r in stuck)


def test_run_cell_is_quiet_about_protocol_references():
    with warnings.catch_warnings():
        warnings.simplefilter("error", ProtocolDeviationWarning)
        run_cell("P1", 800.0, DEFAULT_MASKING.observer, runs=1)


def test_run_cell_durations_come_from_simulated_taps():
    runs = run_cell("P5", 1000.0, DEFAULT_MASKING.observer, runs=4, seed=4)
    assert [(r.tap_duration, r.duration_class) for r in runs] == cell_tap_durations("P5", 1000.0, 4, seed=4)

    soft = cell_tap_durations("P1", 1000.0, 30, seed=1)
    hard = cell_tap_durations("P5", 1000.0, 30, seed=1)
    assert np.mean([d for d, _ in hard]) < np.mean([d for d, _ in soft])
    classes = {c for _, c in soft + hard}
    assert classes <= {"VeryShort", "Short", "Long", "VeryLong"}
    # references above the renderable range still get a tap
    assert len(cell_tap_durations("P3", 2250.0, 2)) == 2
    with pytest.raises(DomainError):
        cell_tap_durations("P9", 1000.0, 1)


def test_empty_grid():
    runs = weber_grid(runs_per_cell=0)
    assert runs == []
    frame = grid_to_frame(runs)
    assert frame.empty and list(frame.columns) == GRID_COLUMNS
    assert summarize_grid(runs).empty
    with pytest.raises(DomainError):
        weber_grid(runs_per_cell=-1)


def test_grid_frames(tmp_path):
    runs = weber_grid(plates=("P1", "P3"), references=(500.0, 1000.0), runs_per_cell=3, seed=2)
    frame = grid_to_frame(runs)
    assert len(frame) == 12
    summary = summarize_grid(runs)
    assert list(summary[["plate", "ref_k"]].itertuples(index=False, name=None)) == [
        ("P1", 500.0), ("P1", 1000.0), ("P3", 500.0), ("P3", 1000.0)]
    assert (summary["n_runs"] == 3).all()

    log = trial_log_frame(runs[0].state)
    assert list(log.columns) == TRIAL_COLUMNS
    path = write_trial_log(tmp_path / "logs" / "P1_500_0.csv", runs[0].state)
    assert path.exists()


@pytest.mark.slow
def test_harder_plates_raise_weber_fraction():
    runs = weber_grid(runs_per_cell=100, seed=0)
    frame = grid_to_frame(runs)
    converged = frame[frame["converged"]]
    by_plate = converged.groupby("plate")["weber_fraction"].mean()
    assert all(by_plate[b] > by_plate[a] for a, b in zip(PLATE_ORDER, PLATE_ORDER[1:]))
    by_reference = converged.groupby("ref_k")["weber_fraction"].mean()
    assert all(by_reference[b] >= by_reference[a]
               for a, b in zip(PROTOCOL_REFERENCES, PROTOCOL_REFERENCES[1:]))
    print(summarize_grid(runs))


def test_responses_follow_rng():
    observer = ObserverModel(sigma=50.0)
    draws = [respond(observer, 500.0, 450.0, make_rng(8)) for _ in range(3)]
    assert len(set(draws)) == 1
