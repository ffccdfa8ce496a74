"""
Simulated impedance haptic device (1-DOF, vertical after the 90 degree rotation).

Renders a virtual wall through the measured stiffness saturation, quantizes
the end-effector position to encoder counts, holds the commanded force
between servo ticks and integrates the end-effector with semi-implicit Euler.

State fields may be floats or equal-shaped numpy arrays; with arrays every
element is an independent device lane.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import ArtifactIOError, ConfigError, DomainError, NumericError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

GRAVITY = 9.81
SATURATION_COEFFS = (-3.49e-4, 2.03, -147.27)
# lowest stiffness the saturation quadratic was measured at
K_FIT_MIN = 100.0

TRAJECTORY_COLUMNS = ["t_s", "position_m", "velocity_mps", "force_N"]


@dataclass(frozen=True)
class DeviceParams:
    """Simulated device description (Falcon-like defaults)"""

    servo_rate: float = 1000.0
    sim_rate: float = 10000.0
    encoder_resolution: float = 6.0e-5
    max_force: float = 9.0
    k_max: float = 2000.0
    saturation_coeffs: Tuple[float, float, float] = SATURATION_COEFFS
    end_effector_mass: float = 1.0
    viscous_damping: float = 20.0

    def __post_init__(self):
        coeffs = tuple(float(c) for c in self.saturation_coeffs)
        if len(coeffs) != 3:
            raise DomainError("saturation_coeffs must hold exactly (a, b, c)")
        object.__setattr__(self, "saturation_coeffs", coeffs)

        if self.servo_rate <= 0 or self.sim_rate <= 0:
            raise DomainError("servo_rate and sim_rate must be positive")
        ratio = self.sim_rate / self.servo_rate
        if ratio < 1 or abs(ratio - round(ratio)) > 1e-9:
            raise DomainError(
                f"sim_rate ({self.sim_rate}) must be an integer multiple of servo_rate ({self.servo_rate})")
        if self.encoder_resolution <= 0:
            raise DomainError("encoder_resolution must be positive")
        if self.max_force <= 0 or self.k_max <= 0:
            raise DomainError("max_force and k_max must be positive")
        if self.end_effector_mass <= 0:
            raise DomainError("end_effector_mass must be positive")
        if self.viscous_damping < 0:
            raise DomainError("viscous_damping must be nonnegative")

        a, b, c = coeffs
        if a * K_FIT_MIN ** 2 + b * K_FIT_MIN + c <= 0:
            raise DomainError("saturation quadratic must be positive at the lowest fitted stiffness")
        # derivative is linear, so checking both ends covers the operating range
        k_hi = self.k_max if math.isfinite(self.k_max) else None
        if 2 * a * K_FIT_MIN + b <= 0 or (k_hi is not None and 2 * a * k_hi + b <= 0) or (k_hi is None and a < 0):
            raise DomainError("saturation quadratic is not strictly increasing on the operating range")

    @property
    def servo_ratio(self) -> int:
        return int(round(self.sim_rate / self.servo_rate))

    @property
    def dt(self) -> float:
        return 1.0 / self.sim_rate

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> "DeviceParams":
        known = {f.name for f in fields(cls)}
        unknown = set(mapping) - known - {"_comment"}
        if unknown:
            raise ConfigError(f"Unknown device keys: {sorted(unknown)}")
        values = {k: v for k, v in mapping.items() if k in known}
        if "saturation_coeffs" in values:
            values["saturation_coeffs"] = tuple(values["saturation_coeffs"])
        try:
            return cls(**values)
        except (TypeError, DomainError) as e:
            raise ConfigError(f"Invalid device block: {e}") from e

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["saturation_coeffs"] = list(self.saturation_coeffs)
        return data


@dataclass(frozen=True)
class DeviceState:
    """End-effector kinematic state plus the zero-order-hold register"""

    position: ArrayLike = 0.0
    velocity: ArrayLike = 0.0
    commanded_stiffness: ArrayLike = 0.0
    wall_position: ArrayLike = 0.0
    held_force: ArrayLike = 0.0
    tick: int = 0


DEFAULT_DEVICE = DeviceParams()


def identity_device(**overrides) -> DeviceParams:
    """Device whose output stiffness equals the command (no saturation)"""
    values = dict(saturation_coeffs=(0.0, 1.0, 0.0), k_max=math.inf)
    values.update(overrides)
    return DeviceParams(**values)


def load_device_params(path: Union[str, Path]) -> DeviceParams:
    """Read a JSON key/value device description"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            mapping = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Device config not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"Device config {path} is not valid JSON: {e}")
    return DeviceParams.from_mapping(mapping.get("device", mapping))


def _as_output(value: np.ndarray, like) -> ArrayLike:
    return float(value) if np.ndim(like) == 0 else value


def read_encoder(position: ArrayLike, params: DeviceParams = DEFAULT_DEVICE) -> ArrayLike:
    """Position as reported by the encoder: rounded to whole counts"""
    res = params.encoder_resolution
    quantized = res * np.round(np.asarray(position, dtype=float) / res)
    return _as_output(quantized, position)


def actual_stiffness(k_cmd: ArrayLike, params: DeviceParams = DEFAULT_DEVICE) -> ArrayLike:
    """Stiffness the device really renders for a commanded stiffness.

    Functional inverse of the saturation quadratic on its increasing branch,
    linear to the origin below the lowest fitted stiffness and clamped at
    k_max.
    """
    k = np.asarray(k_cmd, dtype=float)
    if not np.all(np.isfinite(k)):
        raise DomainError("commanded stiffness must be finite")
    if np.any(k < 0):
        raise DomainError(f"commanded stiffness must be nonnegative, got {k_cmd}")

    a, b, c = params.saturation_coeffs
    k_low_cmd = a * K_FIT_MIN ** 2 + b * K_FIT_MIN + c
    disc = b * b + 4.0 * a * (k - c)
    with np.errstate(invalid="ignore", divide="ignore"):
        root = 2.0 * (k - c) / (b + np.sqrt(np.maximum(disc, 0.0)))
    # past the vertex the quadratic never reaches the command: saturated
    root = np.where(disc < 0, np.inf, root)
    linear = k * (K_FIT_MIN / k_low_cmd)
    out = np.clip(np.where(k < k_low_cmd, linear, root), 0.0, params.k_max)
    return _as_output(out, k_cmd)


def gravity_compensation(mass: float) -> float:
    """Constant upward force cancelling the weight of `mass`"""
    if mass < 0:
        raise DomainError(f"mass must be nonnegative, got {mass}")
    return mass * GRAVITY


def rendered_force(state: DeviceState, params: DeviceParams = DEFAULT_DEVICE) -> ArrayLike:
    """Virtual-wall force for the current state (before the hold register)"""
    quantized = np.asarray(read_encoder(state.position, params))
    penetration = np.maximum(0.0, np.asarray(state.wall_position, dtype=float) - quantized)
    k = np.asarray(actual_stiffness(state.commanded_stiffness, params))
    force = np.clip(k * penetration, 0.0, params.max_force)
    return _as_output(force, state.position)


def step(state: DeviceState, external_force: ArrayLike, params: DeviceParams = DEFAULT_DEVICE) -> DeviceState:
    """Advance the end-effector by one simulation step of 1/sim_rate.

    The wall force is latched into `held_force` only on servo ticks.
    Forces are positive upward.
    """
    if not np.all(np.isfinite(external_force)):
        raise NumericError("non-finite external force", {"tick": state.tick, "external_force": external_force})

    held = state.held_force
    if state.tick % params.servo_ratio == 0:
        held = rendered_force(state, params)

    mass = params.end_effector_mass
    net = (held + gravity_compensation(mass) + external_force
           - params.viscous_damping * state.velocity - mass * GRAVITY)
    velocity = state.velocity + params.dt * net / mass
    position = state.position + params.dt * velocity

    if not (np.all(np.isfinite(velocity)) and np.all(np.isfinite(position))):
        raise NumericError("device state diverged", {
            "tick": state.tick,
            "position": state.position,
            "velocity": state.velocity,
            "held_force": held,
        })
    return replace(state, position=position, velocity=velocity, held_force=held, tick=state.tick + 1)


def _whole_cycle_mean(latched: np.ndarray) -> np.ndarray:
    """Per-lane mean of servo-tick readings over whole chatter cycles.

    A lane's record is trimmed to run from its first rise in penetration to
    just before its last one; lanes that never rise keep the full record.
    """
    flat = latched.reshape(latched.shape[0], -1)
    out = np.empty(flat.shape[1])
    for j in range(flat.shape[1]):
        x = flat[:, j]
        rises = np.flatnonzero(np.diff(x) > 0) + 1
        out[j] = x[rises[0]:rises[-1]].mean() if rises.size >= 2 else x.mean()
    return out.reshape(latched.shape[1:])


def settle_penetration(params: DeviceParams, k_cmd: ArrayLike, load: float,
                       offsets: Sequence[float] = (0.0,), settle_time: float = 1.0,
                       window: float = 0.5) -> np.ndarray:
    """Mean encoder-reported penetration under a constant downward load.

    One lane per entry of `offsets` (start position relative to the encoder
    grid). Quantization keeps the held force chattering between counts, so
    the reading averages the latched penetration over the whole chatter
    cycles inside `window` after `settle_time`; over whole cycles the held
    force averages to the load.
    """
    offsets = np.asarray(offsets, dtype=float)
    lanes = np.broadcast_shapes(offsets.shape, np.shape(k_cmd))
    start = np.broadcast_to(offsets, lanes).astype(float)
    wall = np.asarray(read_encoder(start, params))
    state = DeviceState(
        position=start.copy(),
        velocity=np.zeros(lanes),
        commanded_stiffness=np.broadcast_to(np.asarray(k_cmd, dtype=float), lanes).copy(),
        wall_position=wall,
        held_force=np.zeros(lanes),
    )

    ratio = params.servo_ratio
    for _ in range(int(round(settle_time * params.sim_rate))):
        state = step(state, -load, params)

    latched = []
    for _ in range(int(round(window * params.sim_rate))):
        if state.tick % ratio == 0:
            latched.append(wall - np.asarray(read_encoder(state.position, params)))
        state = step(state, -load, params)
    if not latched:
        return np.zeros(lanes)
    return _whole_cycle_mean(np.asarray(latched))


def simulate_trajectory(params: DeviceParams, k_cmd: float, load: float,
                        duration: float, offset: float = 0.0) -> pd.DataFrame:
    """Record a loaded virtual-wall response at every simulation step"""
    state = DeviceState(position=offset, commanded_stiffness=k_cmd,
                        wall_position=read_encoder(offset, params))
    rows = []
    for i in range(int(round(duration * params.sim_rate))):
        state = step(state, -load, params)
        rows.append(((i + 1) * params.dt, read_encoder(state.position, params), state.velocity, state.held_force))
    return pd.DataFrame(rows, columns=TRAJECTORY_COLUMNS)


def write_trajectory_csv(trajectory: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        trajectory.to_csv(path, index=False, float_format="%.10g")
    except OSError as e:
        raise ArtifactIOError(f"Could not write trajectory {path}: {e}") from e
    logger.info("Wrote trajectory (%d rows) to %s", len(trajectory), path)
    return path
