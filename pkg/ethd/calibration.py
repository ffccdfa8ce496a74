"""
Stiffness calibration: weight-load sweep, quadratic fit and compensator.

A known weight rests on the end-effector while the commanded stiffness is
stepped; the encoder displacement gives the stiffness actually rendered.
A quadratic fitted from measured back to commanded stiffness is the
compensator that makes the device render what was asked for.
"""

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .device_sim import SATURATION_COEFFS, DeviceParams, actual_stiffness, settle_penetration
from .errors import ArtifactIOError, DomainError, ExtrapolationWarning, FitError, MeasurementSaturatedError
from .seeding import make_rng

logger = logging.getLogger(__name__)

CALIBRATION_WEIGHT = 0.981  # 100 g
SATURATION_THRESHOLD = 1900.0
VALID_RANGE = (200.0, 2000.0)
EXTRAPOLATION_RANGE = (100.0, 2500.0)

SWEEP_COLUMNS = ["k_des_Npm", "k_measured_Npm", "disp_mean_m", "disp_std_m"]


@dataclass(frozen=True)
class CalibrationSample:
    """One commanded stiffness with its repeated displacement readings"""
    k_des: float
    displacements: Tuple[float, ...]
    k_measured: float

    @property
    def disp_mean(self) -> float:
        return float(np.mean(self.displacements))

    @property
    def disp_std(self) -> float:
        return float(np.std(self.displacements, ddof=1)) if len(self.displacements) > 1 else 0.0


@dataclass(frozen=True)
class Compensator:
    """k_out = a*k_des**2 + b*k_des + c, with fit provenance"""
    coeffs: Tuple[float, float, float]
    residual_rms: float = 0.0
    n_samples: int = 0
    k_range: Tuple[float, float] = field(default=VALID_RANGE)

    def to_dict(self) -> Dict:
        a, b, c = self.coeffs
        return {
            "coeffs": {"a": a, "b": b, "c": c},
            "residual_rms_Npm": self.residual_rms,
            "n_samples": self.n_samples,
            "k_range_Npm": list(self.k_range),
        }

    def to_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding="utf-8") as f:
                json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        except OSError as e:
            raise ArtifactIOError(f"Could not write compensator {path}: {e}") from e
        return path

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "Compensator":
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        coeffs = data["coeffs"]
        return cls(
            coeffs=(coeffs["a"], coeffs["b"], coeffs["c"]),
            residual_rms=data.get("residual_rms_Npm", 0.0),
            n_samples=data.get("n_samples", 0),
            k_range=tuple(data.get("k_range_Npm", VALID_RANGE)),
        )


def published_compensator() -> Compensator:
    """The published compensator, used as-is"""
    return Compensator(coeffs=SATURATION_COEFFS)


def compensate(comp: Compensator, k_des):
    """Stiffness to command so the device renders `k_des`"""
    k = np.asarray(k_des, dtype=float)
    lo, hi = EXTRAPOLATION_RANGE
    if np.any((k < lo) | (k > hi)):
        warnings.warn(f"k_des {k_des} outside calibrated range [{lo:g}, {hi:g}] N/m; extrapolating",
                      ExtrapolationWarning, stacklevel=2)
        logger.warning("Compensating outside calibrated range: %s", k_des)
    a, b, c = comp.coeffs
    out = np.maximum(0.0, a * k * k + b * k + c)
    return float(out) if np.ndim(k_des) == 0 else out


def run_sweep(device: DeviceParams, weight: float = CALIBRATION_WEIGHT, k_start: float = 100,
              k_end: float = 4000, step: float = 100, repeats: int = 5, seed: int = 0,
              sensor_noise: float = 0.0, compensator: Optional[Compensator] = None,
              settle_time: float = 1.0, window: float = 0.5) -> List[CalibrationSample]:
    """Load the end-effector with `weight` at each stiffness and measure it.

    With `compensator` the desired stiffness is passed through it before
    being commanded (the post-calibration check run).
    """
    if step <= 0:
        raise DomainError("step must be positive")
    if repeats < 1:
        raise DomainError("repeats must be at least 1")

    k_des = np.arange(k_start, k_end + step / 2.0, step, dtype=float)
    if compensator is not None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ExtrapolationWarning)
            k_cmd = compensate(compensator, k_des)
        n_outside = int(np.sum((k_des < EXTRAPOLATION_RANGE[0]) | (k_des > EXTRAPOLATION_RANGE[1])))
        if n_outside:
            logger.warning("%d sweep stiffnesses lie outside the compensator's calibrated range", n_outside)
    else:
        k_cmd = k_des

    rng = make_rng(seed, "calibration-sweep", compensator is not None)
    offsets = rng.uniform(0.0, device.encoder_resolution, size=(len(k_des), repeats))
    logger.info("Sweeping %d stiffnesses x %d repeats (weight %.3f N)", len(k_des), repeats, weight)
    disp = settle_penetration(device, k_cmd[:, None], weight, offsets,
                              settle_time=settle_time, window=window)
    if sensor_noise > 0:
        disp = disp + rng.normal(0.0, sensor_noise, size=disp.shape)

    samples = []
    for k, row in zip(k_des, disp):
        mean = float(np.mean(row))
        if mean < device.encoder_resolution:
            raise MeasurementSaturatedError(
                f"Displacement {mean:.3g} m at k_des={k:g} N/m is below one encoder count "
                f"({device.encoder_resolution:g} m)")
        samples.append(CalibrationSample(k_des=float(k), displacements=tuple(float(d) for d in row),
                                         k_measured=weight / mean))
    return samples


def fit_quadratic(samples: Sequence[CalibrationSample],
                  saturation_threshold: float = SATURATION_THRESHOLD) -> Compensator:
    """Least-squares quadratic from measured stiffness to commanded stiffness.

    Samples on the saturated plateau are excluded. The fit is ordinary
    unweighted least squares, done on stiffness in kN/m for conditioning.
    """
    usable = [s for s in samples if s.k_measured < saturation_threshold]
    if not usable:
        raise FitError(f"All {len(samples)} samples are saturated (k_measured >= {saturation_threshold:g})")
    if len({s.k_des for s in usable}) < 3:
        raise FitError(f"Need at least 3 distinct unsaturated stiffnesses, got {len({s.k_des for s in usable})}")

    x = np.array([s.k_measured for s in usable]) / 1000.0
    y = np.array([s.k_des for s in usable])
    design = np.vander(x, 3)
    solution, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < 3:
        raise FitError(f"Rank-deficient design matrix (rank {rank}) from {len(usable)} samples")

    a_s, b_s, c = solution
    residual = y - design @ solution
    comp = Compensator(
        coeffs=(float(a_s / 1e6), float(b_s / 1e3), float(c)),
        residual_rms=float(np.sqrt(np.mean(residual ** 2))),
        n_samples=len(usable),
        k_range=(float(min(s.k_measured for s in usable)), float(max(s.k_measured for s in usable))),
    )
    logger.info("Fitted compensator a=%.4g b=%.4g c=%.4g (rms %.3g N/m, %d samples)",
                *comp.coeffs, comp.residual_rms, comp.n_samples)
    return comp


def closure_errors(device: DeviceParams, comp: Compensator,
                   k_values: Iterable[float] = range(200, 2001, 100)) -> pd.DataFrame:
    """Relative error between desired and rendered stiffness through `comp`"""
    k = np.asarray(list(k_values), dtype=float)
    rendered = np.asarray(actual_stiffness(compensate(comp, k), device))
    return pd.DataFrame({
        "k_des_Npm": k,
        "k_actual_Npm": rendered,
        "rel_error": np.abs(rendered - k) / k,
    })


def compare_before_after(device: DeviceParams, comp: Compensator,
                         k_values: Iterable[float] = range(200, 2001, 100)) -> pd.DataFrame:
    """Rendered stiffness with the raw command and through the compensator"""
    k = np.asarray(list(k_values), dtype=float)
    raw = np.asarray(actual_stiffness(k, device))
    compensated = np.asarray(actual_stiffness(compensate(comp, k), device))
    return pd.DataFrame({
        "k_des_Npm": k,
        "k_actual_uncompensated_Npm": raw,
        "k_actual_compensated_Npm": compensated,
        "rel_error_uncompensated": np.abs(raw - k) / k,
        "rel_error_compensated": np.abs(compensated - k) / k,
    })


def samples_to_frame(samples: Sequence[CalibrationSample]) -> pd.DataFrame:
    return pd.DataFrame(
        [(s.k_des, s.k_measured, s.disp_mean, s.disp_std) for s in samples],
        columns=SWEEP_COLUMNS,
    )


def before_after_table(before: Sequence[CalibrationSample], after: Sequence[CalibrationSample]) -> pd.DataFrame:
    """Measured stiffness without and with the compensator, per desired stiffness"""
    after_by_k = {s.k_des: s.k_measured for s in after}
    rows = []
    for s in before:
        if s.k_des not in after_by_k:
            continue
        k_after = after_by_k[s.k_des]
        rows.append((s.k_des, s.k_measured, k_after,
                     abs(s.k_measured - s.k_des) / s.k_des, abs(k_after - s.k_des) / s.k_des))
    return pd.DataFrame(rows, columns=[
        "k_des_Npm", "k_measured_before_Npm", "k_measured_after_Npm", "rel_error_before", "rel_error_after",
    ])
