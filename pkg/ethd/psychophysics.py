"""
Modified 1-up/1-down staircase for two-alternative stiffness discrimination,
simulated observers and Weber-fraction extraction.

The test stiffness starts at the minimum and climbs towards the reference
after every correct answer; a wrong answer after a climb is a reversal.
If the next four answers after a wrong one are all correct, that reversal
is forgiven (dropped). The run stops at five surviving reversals and the
threshold is their mean.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import ndtr

from .contact_model import RENDERED_RANGE, TapProfile, find_plate, simulate_taps
from .dsp import extract_features
from .errors import (
    ArtifactIOError, ConfigError, DomainError, NonConvergenceError, ProtocolDeviationWarning,
    ProtocolError, StaircaseStateError,
)
from .seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)

PROTOCOL_REFERENCES = (500.0, 1000.0, 1500.0, 2000.0)
PLATE_ORDER = ("P1", "P2", "P3", "P4", "P5")

TRIAL_COLUMNS = ["trial", "order", "test_k", "correct", "reversal", "forgiven"]
GRID_COLUMNS = ["plate", "ref_k", "run", "threshold_k", "weber_fraction", "n_trials", "converged",
                "tap_duration_ms", "duration_class", "error"]


class Direction(str, Enum):
    UP = "Up"
    DOWN = "Down"


class PresentationOrder(str, Enum):
    REF_FIRST = "RefFirst"
    TEST_FIRST = "TestFirst"


@dataclass(frozen=True)
class StaircaseConfig:
    reference_k: float
    start_k: float = 200.0
    step: float = 100.0
    reversals_to_stop: int = 5
    forgiveness_window: int = 4
    max_trials: int = 200
    forgiveness: bool = True

    def __post_init__(self):
        if self.step <= 0:
            raise DomainError(f"step must be positive, got {self.step}")
        if not self.start_k < self.reference_k:
            raise DomainError(f"start_k ({self.start_k}) must be below reference_k ({self.reference_k})")
        if self.start_k > self.reference_k - self.step:
            raise DomainError("start_k leaves no room below reference_k - step")
        if self.reversals_to_stop < 1 or self.forgiveness_window < 1 or self.max_trials < 1:
            raise DomainError("reversals_to_stop, forgiveness_window and max_trials must be positive")

    @property
    def ceiling(self) -> float:
        return self.reference_k - self.step

    @classmethod
    def for_reference(cls, reference_k: float, **overrides) -> "StaircaseConfig":
        """Protocol defaults: 50 N/m steps at 500 N/m, 100 N/m otherwise"""
        if reference_k not in PROTOCOL_REFERENCES:
            warnings.warn(f"reference {reference_k:g} N/m is not one of {PROTOCOL_REFERENCES}",
                          ProtocolDeviationWarning, stacklevel=2)
            logger.warning("Staircase reference %g N/m deviates from the protocol set", reference_k)
        values = {"step": 50.0 if reference_k == 500.0 else 100.0}
        values.update(overrides)
        return cls(reference_k=reference_k, **values)


@dataclass
class TrialRecord:
    presentation_order: PresentationOrder
    test_k: float
    response_correct: bool
    reversal: bool = False
    forgiven_reversal: bool = False


@dataclass
class StaircaseState:
    test_k: float
    direction: Direction = Direction.UP
    reversal_values: List[float] = field(default_factory=list)
    trial_log: List[TrialRecord] = field(default_factory=list)
    correct_streak_since_error: int = 0
    pending_forgiveness: bool = False
    terminated: bool = False

    @classmethod
    def start(cls, cfg: StaircaseConfig) -> "StaircaseState":
        return cls(test_k=cfg.start_k)

    @property
    def n_trials(self) -> int:
        return len(self.trial_log)


@dataclass(frozen=True)
class ObserverModel:
    sigma: float
    lapse_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise DomainError(f"observer sigma must be positive, got {self.sigma}")
        if not 0 <= self.lapse_rate <= 0.2:
            raise DomainError(f"lapse_rate must lie in [0, 0.2], got {self.lapse_rate}")


@dataclass(frozen=True)
class WeberResult:
    threshold_k: float
    jnd: float
    weber_fraction: float

    @classmethod
    def from_reversals(cls, reversal_values: Sequence[float], reference_k: float) -> "WeberResult":
        if not reversal_values:
            raise DomainError("no reversals to average")
        threshold = float(np.mean(reversal_values))
        jnd = reference_k - threshold
        return cls(threshold_k=threshold, jnd=jnd, weber_fraction=jnd / reference_k)


@dataclass
class WeberRun:
    """One staircase run in a grid cell; failed runs keep their error"""
    plate: str
    reference_k: float
    run: int
    result: Optional[WeberResult]
    n_trials: int
    tap_duration: float
    duration_class: str
    error: str = ""
    state: Optional[StaircaseState] = field(default=None, repr=False)

    @property
    def converged(self) -> bool:
        return self.result is not None


def p_correct(observer: ObserverModel, ref_k: float, test_k: float) -> float:
    d = ref_k - test_k
    return (1.0 - observer.lapse_rate) * float(ndtr(d / (observer.sigma * math.sqrt(2.0)))) + observer.lapse_rate * 0.5


def respond(observer: ObserverModel, ref_k: float, test_k: float,
            rng: Optional[np.random.Generator] = None) -> bool:
    """Whether the observer picks the reference as the harder surface"""
    if test_k >= ref_k:
        raise ProtocolError(f"test stiffness {test_k} must stay below the reference {ref_k}")
    rng = rng if rng is not None else make_rng(observer.seed)
    return bool(rng.random() < p_correct(observer, ref_k, test_k))


def record_response(state: StaircaseState, cfg: StaircaseConfig, correct: bool,
                    order: PresentationOrder = PresentationOrder.REF_FIRST) -> StaircaseState:
    """Apply one answer to the staircase (in place) and return the state"""
    if state.terminated:
        raise StaircaseStateError("staircase already terminated")

    record = TrialRecord(presentation_order=order, test_k=state.test_k, response_correct=bool(correct))
    state.trial_log.append(record)

    if correct:
        if state.pending_forgiveness:
            state.correct_streak_since_error += 1
            if state.correct_streak_since_error >= cfg.forgiveness_window:
                _forgive_last_reversal(state)
        state.test_k = min(state.test_k + cfg.step, cfg.ceiling)
        state.direction = Direction.UP
    else:
        if state.direction is Direction.UP:
            record.reversal = True
            state.reversal_values.append(record.test_k)
            state.pending_forgiveness = cfg.forgiveness
        else:
            state.pending_forgiveness = False
        state.correct_streak_since_error = 0
        state.test_k = max(state.test_k - cfg.step, cfg.start_k)
        state.direction = Direction.DOWN

    if len(state.reversal_values) >= cfg.reversals_to_stop:
        state.terminated = True
    return state


def _forgive_last_reversal(state: StaircaseState):
    for record in reversed(state.trial_log):
        if record.reversal and not record.forgiven_reversal:
            record.forgiven_reversal = True
            break
    state.reversal_values.pop()
    state.pending_forgiveness = False
    state.correct_streak_since_error = 0


def run_staircase(cfg: StaircaseConfig, observer: ObserverModel,
                  seed: int = 0) -> Tuple[WeberResult, StaircaseState]:
    order_rng = make_rng(seed, "presentation")
    response_rng = make_rng(seed, "observer", observer.seed)
    state = StaircaseState.start(cfg)

    while not state.terminated:
        if state.n_trials >= cfg.max_trials:
            raise NonConvergenceError(
                f"no convergence after {cfg.max_trials} trials "
                f"({len(state.reversal_values)}/{cfg.reversals_to_stop} reversals, ref {cfg.reference_k:g})",
                state)
        order = PresentationOrder.REF_FIRST if order_rng.random() < 0.5 else PresentationOrder.TEST_FIRST
        correct = respond(observer, cfg.reference_k, state.test_k, response_rng)
        record_response(state, cfg, correct, order)
        logger.debug("trial %d: test=%g %s -> %s", state.n_trials, state.trial_log[-1].test_k,
                     order.value, "C" if correct else "W")

    return WeberResult.from_reversals(state.reversal_values, cfg.reference_k), state


@dataclass(frozen=True)
class MaskingModel:
    """Discrimination noise growing with plate hardness and reference stiffness.

    sigma = weight[plate] * ref * (ref / ref_scale) ** exponent
    """
    weights: Tuple[Tuple[str, float], ...] = (("P1", 0.08), ("P2", 0.10), ("P3", 0.12), ("P4", 0.14), ("P5", 0.16))
    exponent: float = 3.0
    ref_scale: float = 500.0
    lapse_rate: float = 0.0

    def sigma(self, plate: str, reference_k: float) -> float:
        weights = dict(self.weights)
        if plate not in weights:
            raise DomainError(f"no masking weight for plate {plate!r}")
        return weights[plate] * reference_k * (reference_k / self.ref_scale) ** self.exponent

    def observer(self, plate: str, reference_k: float, seed: int = 0) -> ObserverModel:
        return ObserverModel(sigma=self.sigma(plate, reference_k), lapse_rate=self.lapse_rate, seed=seed)

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "MaskingModel":
        unknown = set(mapping) - {"weights", "exponent", "ref_scale", "lapse_rate", "_comment"}
        if unknown:
            raise ConfigError(f"Unknown observer keys: {sorted(unknown)}")
        values = dict(mapping)
        values.pop("_comment", None)
        if "weights" in values:
            values["weights"] = tuple((str(k), float(v)) for k, v in dict(values["weights"]).items())
        try:
            return cls(**values)
        except (TypeError, DomainError) as e:
            raise ConfigError(f"Invalid observer block: {e}") from e


DEFAULT_MASKING = MaskingModel()


def hardness_masking_observer(plate: str, reference_k: float, seed: int = 0) -> ObserverModel:
    return DEFAULT_MASKING.observer(plate, reference_k, seed)


ObserverFactory = Callable[[str, float], ObserverModel]


def cell_tap_durations(plate: str, reference_k: float, runs: int, seed: int = 0,
                       profile: Optional[TapProfile] = None) -> List[Tuple[float, str]]:
    """Duration (s) and class of one simulated tap per run.

    The taps strike `plate` while the device renders the reference (clamped
    to the renderable range) and are jittered like the taps of a session.
    """
    if runs == 0:
        return []
    k_tap = float(np.clip(reference_k, *RENDERED_RANGE))
    taps = simulate_taps(find_plate(plate), k_tap, runs, profile or TapProfile(),
                         seed=derive_seed(seed, "exp2-taps", plate, reference_k))
    out = []
    for tap in taps:
        features = extract_features(tap, crop_window=None).features
        out.append((features.duration, features.duration_class.value))
    return out


def run_cell(plate: str, reference_k: float, observer_factory: ObserverFactory, runs: int,
             seed: int = 0, staircase: Optional[Mapping] = None,
             tap_profile: Optional[TapProfile] = None) -> List[WeberRun]:
    """All Monte-Carlo runs of one (plate, reference) cell.

    Each run gets its own derived seed and the duration of a tap simulated
    on the plate; non-converging runs are recorded with their error instead
    of aborting the cell.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ProtocolDeviationWarning)
        cfg = StaircaseConfig.for_reference(reference_k, **dict(staircase or {}))
    base = observer_factory(plate, reference_k)
    durations = cell_tap_durations(plate, reference_k, runs, seed, tap_profile)

    runs_out = []
    for run, (tap_s, duration_class) in enumerate(durations):
        run_seed = derive_seed(seed, plate, reference_k, run)
        observer = replace(base, seed=run_seed)
        try:
            result, state = run_staircase(cfg, observer, run_seed)
            runs_out.append(WeberRun(plate, reference_k, run, result, state.n_trials, tap_s,
                                     duration_class, state=state))
        except NonConvergenceError as e:
            logger.warning("Run %d of %s @ %g N/m did not converge: %s", run, plate, reference_k, e)
            runs_out.append(WeberRun(plate, reference_k, run, None, e.state.n_trials, tap_s,
                                     duration_class, error=str(e), state=e.state))
    return runs_out


def weber_grid(plates: Sequence[str] = PLATE_ORDER, references: Sequence[float] = PROTOCOL_REFERENCES,
               observer_factory: ObserverFactory = hardness_masking_observer, runs_per_cell: int = 100,
               seed: int = 0, staircase: Optional[Mapping] = None,
               tap_profile: Optional[TapProfile] = None) -> List[WeberRun]:
    if runs_per_cell < 0:
        raise DomainError("runs_per_cell must be nonnegative")
    runs = []
    for plate in plates:
        for reference_k in references:
            runs.extend(run_cell(plate, reference_k, observer_factory, runs_per_cell, seed, staircase,
                                 tap_profile))
    return runs


def grid_to_frame(runs: Sequence[WeberRun]) -> pd.DataFrame:
    rows = []
    for r in runs:
        rows.append({
            "plate": r.plate,
            "ref_k": r.reference_k,
            "run": r.run,
            "threshold_k": r.result.threshold_k if r.result else float("nan"),
            "weber_fraction": r.result.weber_fraction if r.result else float("nan"),
            "n_trials": r.n_trials,
            "converged": r.converged,
            "tap_duration_ms": r.tap_duration * 1000.0,
            "duration_class": r.duration_class,
            "error": r.error,
        })
    return pd.DataFrame(rows, columns=GRID_COLUMNS)


def summarize_grid(runs: Sequence[WeberRun]) -> pd.DataFrame:
    """Per-cell mean and spread of the Weber fraction over converged runs"""
    frame = grid_to_frame(runs)
    columns = ["plate", "ref_k", "mean_wf", "std_wf", "n_runs", "n_converged"]
    if frame.empty:
        return pd.DataFrame(columns=columns)
    summary = frame.groupby(["plate", "ref_k"], sort=False).agg(
        mean_wf=("weber_fraction", "mean"),
        std_wf=("weber_fraction", "std"),
        n_runs=("run", "count"),
        n_converged=("converged", "sum"),
    ).reset_index()
    return summary[columns]


def trial_log_frame(state: StaircaseState) -> pd.DataFrame:
    return pd.DataFrame([
        (i + 1, r.presentation_order.value, r.test_k, r.response_correct, r.reversal, r.forgiven_reversal)
        for i, r in enumerate(state.trial_log)
    ], columns=TRIAL_COLUMNS)


def write_trial_log(path: Union[str, Path], state: StaircaseState) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        trial_log_frame(state).to_csv(path, index=False, float_format="%.10g")
    except OSError as e:
        raise ArtifactIOError(f"Could not write trial log {path}: {e}") from e
    return path
