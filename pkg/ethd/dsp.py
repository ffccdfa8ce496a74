"""
Tap-force analysis: crop, tap detection, representative tap, DFT and the
spectral features (spectral centroid, dominant frequency, tap duration).
"""

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.signal import find_peaks, get_window

from .errors import CropError, DegenerateDataError, DomainError

logger = logging.getLogger(__name__)

CROP_WINDOW = (3.0, 10.0)
CONTACT_FLOOR = 0.02
DURATION_EDGES_MS = (20.0, 87.0, 154.0, 221.0, 288.0)

FEATURE_COLUMNS = ["plate", "k_des_Npm", "sc_Hz", "sc_mag", "domfreq_Hz", "dommag", "duration_ms", "duration_class"]


class DurationClass(str, Enum):
    VERY_SHORT = "VeryShort"
    SHORT = "Short"
    LONG = "Long"
    VERY_LONG = "VeryLong"


@dataclass(frozen=True, eq=False)
class TapSignal:
    """Sampled contact force (N) with its sample rate and provenance"""
    samples: np.ndarray
    sample_rate: float
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if self.sample_rate <= 0:
            raise DomainError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise DomainError("signal contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.samples)) / self.sample_rate


@dataclass(frozen=True, eq=False)
class Spectrum:
    """One-sided DFT magnitude |X(f)|"""
    freqs: np.ndarray
    mags: np.ndarray
    n_fft: int = 0
    sample_rate: float = 0.0

    def __post_init__(self):
        freqs = np.asarray(self.freqs, dtype=float)
        mags = np.asarray(self.mags, dtype=float)
        if freqs.shape != mags.shape:
            raise DomainError("freqs and mags must have equal length")
        if len(freqs) > 1 and np.any(np.diff(freqs) <= 0):
            raise DomainError("freqs must be strictly increasing")
        if np.any(mags < 0):
            raise DomainError("magnitudes must be nonnegative")
        object.__setattr__(self, "freqs", freqs)
        object.__setattr__(self, "mags", mags)


@dataclass(frozen=True)
class Tap:
    peak_index: int
    peak_value: float
    start: int
    end: int  # exclusive

    def duration(self, sample_rate: float) -> float:
        return (self.end - self.start) / sample_rate


@dataclass(frozen=True)
class TapFeatures:
    spectral_centroid: float
    sc_magnitude: float
    dominant_freq: float
    dominant_mag: float
    duration: float
    duration_class: DurationClass


@dataclass(frozen=True)
class TapAnalysis:
    features: TapFeatures
    tap: Tap
    n_taps: int


def crop(signal: TapSignal, start: float = CROP_WINDOW[0], end: float = CROP_WINDOW[1]) -> TapSignal:
    """Keep the samples with start <= t < end"""
    if end <= start:
        raise CropError(f"Crop end ({end}) must be after start ({start})")
    if signal.duration + 1e-9 < end:
        raise CropError(f"Signal lasts {signal.duration:.3f} s, shorter than crop end {end} s")
    fs = signal.sample_rate
    i0 = int(math.ceil(start * fs - 1e-9))
    i1 = int(math.ceil(end * fs - 1e-9))
    return TapSignal(signal.samples[i0:i1].copy(), fs, dict(signal.meta))


def detect_taps(signal: TapSignal, threshold: float, min_separation: float = 0.1,
                contact_floor: float = CONTACT_FLOOR) -> List[Tap]:
    """Peaks above `threshold` at least `min_separation` seconds apart.

    Each tap spans the samples around its peak that stay at or above
    `contact_floor` times that peak, joined across dips below the floor
    shorter than `min_separation` (a strike followed by a press is one tap).
    """
    if threshold <= 0:
        raise DomainError(f"threshold must be positive, got {threshold}")
    x = signal.samples
    distance = max(1, int(round(min_separation * signal.sample_rate)))
    peaks, _ = find_peaks(x, height=threshold, distance=distance)

    taps = []
    for p in peaks:
        above = np.flatnonzero(x >= contact_floor * x[p])
        pos = int(np.searchsorted(above, p))
        gaps = np.flatnonzero(np.diff(above) > distance)
        left = gaps[gaps < pos]
        right = gaps[gaps >= pos]
        start = int(above[left[-1] + 1]) if left.size else int(above[0])
        end = int(above[right[0]]) + 1 if right.size else int(above[-1]) + 1
        taps.append(Tap(peak_index=int(p), peak_value=float(x[p]), start=start, end=end))
    return taps


def select_representative_tap(taps: Sequence[Tap]) -> Tap:
    """Tap whose peak is closest to the mean peak; earliest wins ties"""
    if not taps:
        raise DomainError("no taps to choose from")
    peaks = np.array([t.peak_value for t in taps])
    return taps[int(np.argmin(np.abs(peaks - peaks.mean())))]


def dft_magnitude(segment: Sequence[float], sample_rate: float, window: str = "boxcar") -> Spectrum:
    """One-sided DFT magnitude of a segment zero-padded to a power of two"""
    x = np.asarray(segment, dtype=float)
    if x.size < 2:
        raise DomainError("segment needs at least 2 samples")
    if window != "boxcar":
        x = x * get_window(window, x.size)
    n_fft = 1 << (x.size - 1).bit_length()
    mags = np.abs(np.fft.rfft(x, n=n_fft))
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    return Spectrum(freqs=freqs, mags=mags, n_fft=n_fft, sample_rate=sample_rate)


def spectrum_energy(spec: Spectrum) -> float:
    """Time-domain energy recovered from the one-sided spectrum (Parseval)"""
    m2 = spec.mags ** 2
    interior = m2[1:-1].sum() if spec.n_fft % 2 == 0 else m2[1:].sum()
    edges = m2[0] + (m2[-1] if spec.n_fft % 2 == 0 else 0.0)
    return float((edges + 2.0 * interior) / spec.n_fft)


def spectral_centroid(spec: Spectrum) -> float:
    total = spec.mags.sum()
    if total <= 0:
        raise DegenerateDataError("spectral centroid undefined for an all-zero spectrum")
    return float(np.dot(spec.freqs, spec.mags) / total)


def dominant_frequency(spec: Spectrum) -> Tuple[float, float]:
    """Frequency and magnitude of the largest non-DC bin (lowest on ties)"""
    if spec.mags.size < 2:
        raise DomainError("spectrum needs a non-DC bin")
    i = 1 + int(np.argmax(spec.mags[1:]))
    return float(spec.freqs[i]), float(spec.mags[i])


def classify_duration(duration: float) -> DurationClass:
    """Tap-duration category; boundaries go to the upper class"""
    ms = round(duration * 1000.0, 9)
    lo, b1, b2, b3, hi = DURATION_EDGES_MS
    if ms < lo or ms > hi:
        raise DomainError(f"tap duration {ms:g} ms outside [{lo:g}, {hi:g}] ms")
    if ms < b1:
        return DurationClass.VERY_SHORT
    if ms < b2:
        return DurationClass.SHORT
    if ms < b3:
        return DurationClass.LONG
    return DurationClass.VERY_LONG


def tap_features(segment: Sequence[float], sample_rate: float, window: str = "boxcar") -> TapFeatures:
    spec = dft_magnitude(segment, sample_rate, window)
    sc = spectral_centroid(spec)
    dom_f, dom_mag = dominant_frequency(spec)
    duration = len(segment) / sample_rate
    duration_class = classify_duration(duration)
    return TapFeatures(
        spectral_centroid=sc,
        sc_magnitude=float(np.interp(sc, spec.freqs, spec.mags)),
        dominant_freq=dom_f,
        dominant_mag=dom_mag,
        duration=duration,
        duration_class=duration_class,
    )


def extract_features(signal: TapSignal, crop_window: Optional[Tuple[float, float]] = CROP_WINDOW,
                     threshold: Optional[float] = None, min_separation: float = 0.1,
                     contact_floor: float = CONTACT_FLOOR, window: str = "boxcar") -> TapAnalysis:
    """Crop, find the taps, pick the representative one and describe it"""
    cropped = crop(signal, *crop_window) if crop_window is not None else signal
    peak = float(cropped.samples.max()) if cropped.samples.size else 0.0
    if peak <= 0:
        raise DomainError("signal has no positive force inside the analysis window")
    taps = detect_taps(cropped, threshold if threshold is not None else 0.1 * peak,
                       min_separation, contact_floor)
    if not taps:
        raise DomainError("no taps detected above threshold")
    # taps cut by the analysis window are only used when nothing else is left
    whole = [t for t in taps if t.start > 0 and t.end < len(cropped.samples)]
    taps = whole or taps
    tap = select_representative_tap(taps)
    features = tap_features(cropped.samples[tap.start:tap.end], cropped.sample_rate, window)
    logger.debug("Selected tap at %d of %d (peak %.3f N, SC %.1f Hz)",
                 tap.peak_index, len(taps), tap.peak_value, features.spectral_centroid)
    return TapAnalysis(features=features, tap=tap, n_taps=len(taps))


def features_row(plate: str, k_des: float, features: TapFeatures) -> Dict[str, Any]:
    return {
        "plate": plate,
        "k_des_Npm": k_des,
        "sc_Hz": features.spectral_centroid,
        "sc_mag": features.sc_magnitude,
        "domfreq_Hz": features.dominant_freq,
        "dommag": features.dominant_mag,
        "duration_ms": features.duration * 1000.0,
        "duration_class": features.duration_class.value,
    }


def read_tap_signal(path: Union[str, Path]) -> TapSignal:
    """Load a `t_s, force_N` CSV (and its JSON sidecar when present)"""
    path = Path(path)
    frame = pd.read_csv(path)
    missing = {"t_s", "force_N"} - set(frame.columns)
    if missing:
        raise DomainError(f"{path} lacks columns {sorted(missing)}")
    t = frame["t_s"].to_numpy(dtype=float)
    if t.size < 2:
        raise DomainError(f"{path} holds fewer than 2 samples")
    sample_rate = 1.0 / float(np.median(np.diff(t)))
    meta = {}
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        with open(sidecar, "r", encoding="utf-8") as f:
            meta = json.load(f)
        sample_rate = float(meta.get("sample_rate", sample_rate))
    return TapSignal(frame["force_N"].to_numpy(dtype=float), sample_rate, meta)
