"""
Shore-durometer plates and the stylus taps that strike them.

A plate's Shore hardness maps to a Young's modulus (Gent's relation, with
OO and D values first converted to equivalent Shore A), the modulus to a
Hunt-Crossley contact law, and the contact law drives a stylus against the
plate while the plate rides on the simulated device's virtual wall.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .calibration import Compensator, compensate, published_compensator
from .device_sim import DEFAULT_DEVICE, DeviceParams, DeviceState, step
from .dsp import TapSignal
from .errors import ArtifactIOError, ConfigError, DomainError, NumericError, ProtocolError
from .seeding import make_rng

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"
PLATES_FILE = DATA_DIR / "plates.json"
CONVERSION_FILE = DATA_DIR / "durometer_conversion.json"

POISSON_RATIO = 0.48
# stylus tip and plate fixture stiffening over a bare Hertz contact
CONTACT_GAIN = 500.0
DAMPING_REF = 4.0  # s/m at DAMPING_REF_MODULUS
DAMPING_REF_MODULUS = 0.1e6  # Pa
SOFT_THICKNESS = 0.0127
HARD_THICKNESS = 0.003175
RENDERED_RANGE = (200.0, 2000.0)
TAP_RATE_RANGE = (1.0, 5.0)

# integration steps per estimated contact time, and the give-up horizon
STEPS_PER_CONTACT = 400
MAX_CONTACT_MULTIPLE = 20.0
ZERO_TAP_SECONDS = 0.01


class ShoreScale(str, Enum):
    OO = "OO"
    A = "A"
    D = "D"


_SCALE_ORDER = {ShoreScale.OO: 0, ShoreScale.A: 1, ShoreScale.D: 2}


@dataclass(frozen=True)
class PlateSpec:
    shore_scale: ShoreScale
    shore_value: float
    thickness: float = SOFT_THICKNESS
    label: str = ""
    category: str = ""

    def __post_init__(self):
        try:
            object.__setattr__(self, "shore_scale", ShoreScale(self.shore_scale))
        except ValueError:
            raise DomainError(f"Unknown Shore scale {self.shore_scale!r}")
        if not 0 < self.shore_value < 100:
            raise DomainError(f"Shore value must lie in (0, 100), got {self.shore_value}")
        if self.thickness <= 0:
            raise DomainError(f"Plate thickness must be positive, got {self.thickness}")
        if not self.label:
            object.__setattr__(self, "label", f"{self.shore_value:g}{self.shore_scale.value}")

    @property
    def hardness_key(self):
        return (_SCALE_ORDER[self.shore_scale], self.shore_value)


@dataclass(frozen=True)
class ContactParams:
    """Hunt-Crossley law F = k_c * d**n_exp * (1 + damping_factor * d_dot)"""
    k_c: float
    n_exp: float = 1.5
    damping_factor: float = 0.0

    def __post_init__(self):
        if not self.k_c > 0:
            raise DomainError(f"contact stiffness must be positive, got {self.k_c}")
        if self.damping_factor < 0:
            raise DomainError(f"damping factor must be nonnegative, got {self.damping_factor}")


@dataclass(frozen=True)
class TapProfile:
    """How the hand taps: the stylus strike followed by a brief press.

    The press is a sin**2 force of `press_force` N held for `press_time` s
    after the strike; `press_jitter` spreads the hold time tap to tap.
    """
    stylus_mass: float = 0.03
    tip_radius: float = 0.002
    approach_velocity: float = 0.15
    tap_rate: float = 2.5
    velocity_jitter: float = 0.1
    press_force: float = 5.0
    press_time: float = 0.15
    press_jitter: float = 0.2

    def __post_init__(self):
        if self.stylus_mass <= 0:
            raise DomainError("stylus_mass must be positive")
        # zero approach velocity is a legal (null) tap
        if self.approach_velocity < 0:
            raise DomainError("approach_velocity must be nonnegative")
        lo, hi = TAP_RATE_RANGE
        if not lo <= self.tap_rate <= hi:
            raise DomainError(f"tap_rate {self.tap_rate} Hz outside the human tapping range [{lo:g}, {hi:g}]")
        if not 0 <= self.velocity_jitter < 1:
            raise DomainError("velocity_jitter must lie in [0, 1)")
        if self.press_force < 0:
            raise DomainError("press_force must be nonnegative")
        if self.press_time <= 0:
            raise DomainError("press_time must be positive")
        if not 0 <= self.press_jitter < 1:
            raise DomainError("press_jitter must lie in [0, 1)")
        # the hand lets go within the first half of each tap period
        if self.press_time * (1.0 + self.press_jitter) > 0.5 / self.tap_rate:
            raise DomainError(f"a {self.press_time:g} s press does not release within half "
                              f"a tap period at {self.tap_rate:g} Hz")

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "TapProfile":
        known = set(cls.__dataclass_fields__)
        unknown = set(mapping) - known - {"_comment"}
        if unknown:
            raise ConfigError(f"Unknown profile keys: {sorted(unknown)}")
        try:
            return cls(**{k: v for k, v in mapping.items() if k in known})
        except (TypeError, DomainError) as e:
            raise ConfigError(f"Invalid profile block: {e}") from e


@lru_cache(maxsize=1)
def _conversion_tables() -> Dict[str, np.ndarray]:
    with open(CONVERSION_FILE, "r", encoding="utf-8") as f:
        data = json.load(f)
    return {scale: np.asarray(points, dtype=float) for scale, points in data.items()
            if scale in ("OO", "D")}


def equivalent_shore_a(plate: PlateSpec) -> float:
    if plate.shore_scale is ShoreScale.A:
        return float(plate.shore_value)
    table = _conversion_tables()[plate.shore_scale.value]
    lo, hi = table[0, 0], table[-1, 0]
    if not lo <= plate.shore_value <= hi:
        raise DomainError(f"Shore {plate.shore_value:g} {plate.shore_scale.value} is outside the "
                          f"conversion table [{lo:g}, {hi:g}]")
    return float(np.interp(plate.shore_value, table[:, 0], table[:, 1]))


def shore_to_modulus(plate: PlateSpec) -> float:
    """Young's modulus in Pa (Gent's relation on the Shore A equivalent)"""
    s = equivalent_shore_a(plate)
    if s >= 100:
        raise DomainError(f"Gent's relation is singular at Shore 100 A (got {s:g})")
    e_mpa = 0.0981 * (56.0 + 7.62336 * s) / (0.137505 * (254.0 - 2.54 * s))
    if e_mpa <= 0:
        raise DomainError(f"Shore {plate.label} maps to a nonpositive modulus")
    return e_mpa * 1e6


def derive_contact_params(modulus: float, plate: PlateSpec, tip_radius: float = 0.002) -> ContactParams:
    if modulus <= 0:
        raise DomainError(f"modulus must be positive, got {modulus}")
    if tip_radius <= 0:
        raise DomainError(f"tip_radius must be positive (degenerate contact), got {tip_radius}")
    e_star = modulus / (1.0 - POISSON_RATIO ** 2)
    stiffening = 1.0 + 0.5 * tip_radius / plate.thickness
    return ContactParams(
        k_c=CONTACT_GAIN * (4.0 / 3.0) * e_star * math.sqrt(tip_radius) * stiffening,
        n_exp=1.5,
        damping_factor=DAMPING_REF * DAMPING_REF_MODULUS / modulus,
    )


def plate_contact(plate: PlateSpec, profile: TapProfile) -> ContactParams:
    return derive_contact_params(shore_to_modulus(plate), plate, profile.tip_radius)


def hertz_contact_time(contact: ContactParams, mass: float, velocity: float) -> float:
    """Elastic Hertz estimate of how long an impact at `velocity` lasts"""
    if velocity <= 0:
        return math.inf
    max_depth = (5.0 * mass * velocity ** 2 / (4.0 * contact.k_c)) ** 0.4
    return 2.94 * max_depth / velocity


def _bin_average(impulse: Callable[[np.ndarray], np.ndarray], end_time: float,
                 sample_rate: float) -> np.ndarray:
    """Sample k holds the mean force over ((k - 1) / fs, k / fs].

    `impulse(t)` is the force integrated from contact onset to t. Sample 0
    is the instant of contact and the last sample falls after `end_time`.
    """
    edges = np.arange(int(math.ceil(end_time * sample_rate)) + 2) / sample_rate
    return np.concatenate(([0.0], np.diff(impulse(edges)) * sample_rate))


def press_pulse(force: float, press_time: float, sample_rate: float) -> np.ndarray:
    """The hand press `force * sin(pi * t / press_time) ** 2`, bin-averaged"""
    def impulse(t):
        t = np.minimum(t, press_time)
        return force * (t / 2.0 - press_time / (4.0 * math.pi) * np.sin(2.0 * math.pi * t / press_time))
    return _bin_average(impulse, press_time, sample_rate)


def _integrate_taps(contact: ContactParams, k_cmd: float, stylus_mass: float,
                    velocities: np.ndarray, device: DeviceParams, sample_rate: float) -> List[np.ndarray]:
    """Strike one plate once per entry of `velocities`, each from rest.

    Every tap is a device lane; the plate starts at rest on the wall and the
    stylus tip just touching it. Returns each tap's force averaged over the
    intervals of `sample_rate`, from first contact until the force is back
    to zero, so the strike impulse survives even when it is shorter than a
    sample.
    """
    velocities = np.asarray(velocities, dtype=float)
    moving = velocities > 0
    pulses = [np.zeros(int(round(ZERO_TAP_SECONDS * sample_rate))) for _ in velocities]
    if not moving.any():
        return pulses

    reduced = stylus_mass * device.end_effector_mass / (stylus_mass + device.end_effector_mass)
    t_short = hertz_contact_time(contact, reduced, velocities[moving].max())
    t_long = hertz_contact_time(contact, reduced, velocities[moving].min())
    ratio = math.ceil(max(device.sim_rate, STEPS_PER_CONTACT / t_short) / device.servo_rate)
    fine = replace(device, sim_rate=device.servo_rate * ratio)
    dt = fine.dt

    n = velocities.size
    plate = DeviceState(position=np.zeros(n), velocity=np.zeros(n),
                        commanded_stiffness=np.full(n, float(k_cmd)),
                        wall_position=np.zeros(n), held_force=np.zeros(n))
    y_stylus = np.zeros(n)
    v_stylus = -velocities.copy()
    touched = np.zeros(n, dtype=bool)
    done = ~moving
    record = []

    for i in range(int(math.ceil(MAX_CONTACT_MULTIPLE * t_long / dt))):
        depth = plate.position - y_stylus
        rate = plate.velocity - v_stylus
        with np.errstate(invalid="ignore"):
            force = contact.k_c * np.maximum(depth, 0.0) ** contact.n_exp * (1.0 + contact.damping_factor * rate)
        force = np.where(depth > 0, np.maximum(force, 0.0), 0.0)
        if not np.all(np.isfinite(force)):
            raise NumericError("tap contact force diverged", {
                "step": i, "dt": dt, "depth": depth, "rate": rate, "k_c": contact.k_c,
            })
        done |= touched & (force == 0.0) & (rate <= 0.0)
        force = np.where(done, 0.0, force)
        touched |= force > 0
        record.append(force)
        if done.all():
            break
        plate = step(plate, -force, fine)
        v_stylus = v_stylus + dt * force / stylus_mass
        y_stylus = y_stylus + dt * v_stylus
    else:
        raise NumericError("stylus did not separate from the plate", {
            "steps": len(record), "dt": dt, "k_c": contact.k_c, "undone": int((~done).sum()),
        })

    record = np.asarray(record)
    times = np.arange(record.shape[0] + 1) * dt
    for lane in np.flatnonzero(moving):
        f = record[:, lane]
        nonzero = np.flatnonzero(f > 0)
        end_time = times[nonzero[-1] + 1] if nonzero.size else 0.0
        impulse = np.concatenate(([0.0], np.cumsum(f) * dt))
        pulses[lane] = _bin_average(lambda t: np.interp(t, times, impulse), end_time, sample_rate)
    logger.debug("Integrated %d taps at %.0f Hz (k_c=%.4g, %d steps)", n, fine.sim_rate, contact.k_c, len(record))
    return pulses


def _command_for(k_rendered_des: float, compensator: Optional[Compensator]) -> float:
    lo, hi = RENDERED_RANGE
    if not lo <= k_rendered_des <= hi:
        raise DomainError(f"rendered stiffness {k_rendered_des} N/m outside [{lo:g}, {hi:g}]")
    return compensate(compensator or published_compensator(), k_rendered_des)


def _draw_taps(profile: TapProfile, n: int, rng: Optional[np.random.Generator]) -> Tuple[np.ndarray, np.ndarray]:
    """Approach velocities and press times of `n` taps (nominal without a generator)"""
    if rng is None:
        return np.full(n, profile.approach_velocity), np.full(n, profile.press_time)
    velocities = profile.approach_velocity * (1.0 + profile.velocity_jitter * rng.uniform(-1.0, 1.0, n))
    press_times = profile.press_time * (1.0 + profile.press_jitter * rng.uniform(-1.0, 1.0, n))
    return velocities, press_times


def _tap_pulses(plate: PlateSpec, k_cmd: float, profile: TapProfile, velocities: np.ndarray,
                press_times: np.ndarray, device: DeviceParams, sample_rate: float) -> List[np.ndarray]:
    """Strike force of each tap with its hand press laid on top"""
    pulses = _integrate_taps(plate_contact(plate, profile), k_cmd, profile.stylus_mass,
                             velocities, device, sample_rate)
    if profile.press_force <= 0:
        return pulses
    out = []
    for velocity, press_time, strike in zip(velocities, press_times, pulses):
        if velocity <= 0:
            out.append(strike)
            continue
        press = press_pulse(profile.press_force, press_time, sample_rate)
        total = np.zeros(max(strike.size, press.size))
        total[:strike.size] += strike
        total[:press.size] += press
        out.append(total)
    return out


def simulate_taps(plate: PlateSpec, k_rendered_des: float, n_taps: int, profile: TapProfile = TapProfile(),
                  device: DeviceParams = DEFAULT_DEVICE, sample_rate: float = 10000.0,
                  seed: Optional[int] = None, compensator: Optional[Compensator] = None) -> List[TapSignal]:
    """`n_taps` separate taps on `plate`, integrated together.

    Without a seed every tap is nominal; with one, approach velocity and
    press time are jittered the way a session jitters them.
    """
    if n_taps < 0:
        raise DomainError(f"n_taps must be nonnegative, got {n_taps}")
    k_cmd = _command_for(k_rendered_des, compensator)
    if n_taps == 0:
        return []
    velocities, press_times = _draw_taps(profile, n_taps, make_rng(seed) if seed is not None else None)
    pulses = _tap_pulses(plate, k_cmd, profile, velocities, press_times, device, sample_rate)
    return [
        TapSignal(pulse, sample_rate, {
            "plate": plate.label, "k_des_Npm": k_rendered_des, "k_cmd_Npm": k_cmd, "seed": seed,
            "velocity_mps": float(v), "press_time_s": float(tp), "sample_rate": sample_rate,
        })
        for pulse, v, tp in zip(pulses, velocities, press_times)
    ]


def simulate_tap(plate: PlateSpec, k_rendered_des: float, profile: TapProfile = TapProfile(),
                 device: DeviceParams = DEFAULT_DEVICE, sample_rate: float = 10000.0,
                 seed: Optional[int] = None, compensator: Optional[Compensator] = None) -> TapSignal:
    """One stylus tap on `plate` mounted on the device wall"""
    (tap,) = simulate_taps(plate, k_rendered_des, 1, profile, device, sample_rate, seed, compensator)
    return tap


def simulate_session(plate: PlateSpec, k_rendered_des: float, n_taps: int = 30,
                     profile: TapProfile = TapProfile(), duration: float = 13.0, seed: int = 0,
                     device: DeviceParams = DEFAULT_DEVICE, sample_rate: float = 10000.0,
                     compensator: Optional[Compensator] = None,
                     first_tap: Optional[float] = None) -> TapSignal:
    """A recording of `n_taps` taps at the profile's tap rate.

    Taps are centred in the record unless `first_tap` (s) pins the first
    onset; onsets fall on the sample grid.
    """
    if n_taps < 1:
        raise ProtocolError(f"n_taps must be at least 1, got {n_taps}")
    if profile.tap_rate * duration < n_taps:
        raise ProtocolError(f"{n_taps} taps at {profile.tap_rate:g} Hz do not fit in {duration:g} s")

    span = (n_taps - 1) / profile.tap_rate
    start = (duration - span) / 2.0 if first_tap is None else first_tap
    onsets = start + np.arange(n_taps) / profile.tap_rate
    if onsets[0] < 0 or onsets[-1] >= duration:
        raise ProtocolError(f"tap onsets [{onsets[0]:g}, {onsets[-1]:g}] s fall outside the {duration:g} s record")

    velocities, press_times = _draw_taps(profile, n_taps, make_rng(seed))
    k_cmd = _command_for(k_rendered_des, compensator)
    pulses = _tap_pulses(plate, k_cmd, profile, velocities, press_times, device, sample_rate)

    samples = np.zeros(int(round(duration * sample_rate)))
    for onset, pulse in zip(onsets, pulses):
        i0 = int(round(onset * sample_rate))
        i1 = min(samples.size, i0 + pulse.size)
        samples[i0:i1] += pulse[:i1 - i0]

    return TapSignal(samples, sample_rate, {
        "plate": plate.label, "k_des_Npm": k_rendered_des, "k_cmd_Npm": k_cmd, "seed": seed,
        "n_taps": n_taps, "duration_s": duration, "sample_rate": sample_rate, "profile": asdict(profile),
    })


def load_plates(set_name: str = "table1", path: Union[str, Path, None] = None) -> List[PlateSpec]:
    """Plate set from the bundled plate tables ("table1" or "table2")"""
    path = Path(path) if path else PLATES_FILE
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Could not read plate table {path}: {e}") from e
    if set_name not in data:
        raise ConfigError(f"Unknown plate set {set_name!r}; available: "
                          f"{sorted(k for k in data if k.startswith('table'))}")
    plates = []
    for entry in data[set_name]:
        thickness = entry.get("thickness")
        if thickness is None:
            thickness = HARD_THICKNESS if entry.get("category") in ("Hard", "Extra Hard") else SOFT_THICKNESS
        plates.append(PlateSpec(entry["shore_scale"], entry["shore_value"], thickness,
                                entry["label"], entry.get("category", "")))
    return plates


def find_plate(label: str, set_name: str = "table2") -> PlateSpec:
    for plate in load_plates(set_name):
        if plate.label == label:
            return plate
    raise DomainError(f"no plate {label!r} in {set_name}")


def select_plate_subset(sc_by_plate: Mapping[str, float], n_levels: int = 5) -> List[str]:
    """Reduce plates to `n_levels` spread evenly over their spectral-centroid range"""
    if n_levels < 1 or n_levels > len(sc_by_plate):
        raise DomainError(f"cannot pick {n_levels} plates out of {len(sc_by_plate)}")
    labels = list(sc_by_plate)
    values = np.array([sc_by_plate[l] for l in labels], dtype=float)
    chosen = []
    for level in np.linspace(values.min(), values.max(), n_levels):
        order = np.argsort(np.abs(values - level), kind="stable")
        pick = next(labels[i] for i in order if labels[i] not in chosen)
        chosen.append(pick)
    return chosen


def write_tap_signal(path: Union[str, Path], signal: TapSignal) -> Path:
    """`t_s, force_N` CSV plus a JSON sidecar with the provenance"""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame({"t_s": signal.times, "force_N": signal.samples}).to_csv(
            path, index=False, float_format="%.10g")
        with open(path.with_suffix(".json"), "w", encoding="utf-8") as f:
            json.dump({**signal.meta, "sample_rate": signal.sample_rate}, f, indent=2, sort_keys=True, default=str)
    except OSError as e:
        raise ArtifactIOError(f"Could not write tap signal {path}: {e}") from e
    return path
