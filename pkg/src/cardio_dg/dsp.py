"""Preprocessing: Butterworth bandpass, per-lead z-score, fixed-length windows."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import signal

SIGMA_FLOOR = 1e-8


class WindowMode(enum.Enum):
    TRAIN_RANDOM_OFFSET = "train"
    EVAL_CENTER = "eval"


@dataclass(frozen=True)
class BandpassSpec:
    low_hz: float = 0.5
    high_hz: float = 45.0
    order: int = 2
    fs: float = 500.0

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("filter order must be >= 1")
        nyquist = self.fs / 2
        if self.high_hz >= nyquist or self.low_hz >= nyquist:
            raise ValueError(f"cutoff above Nyquist ({nyquist:g} Hz)")
        if not 0 < self.low_hz < self.high_hz:
            raise ValueError("need 0 < low_hz < high_hz")


@dataclass(frozen=True)
class WindowSpec:
    length_samples: int = 5000
    mode: WindowMode = WindowMode.EVAL_CENTER

    def __post_init__(self):
        if self.length_samples < 1:
            raise ValueError("window length must be >= 1")


def design_bandpass(spec: BandpassSpec) -> np.ndarray:
    """Second-order sections of a digital Butterworth bandpass (bilinear, prewarped)."""
    sos = signal.butter(spec.order, [spec.low_hz, spec.high_hz], btype="bandpass", fs=spec.fs, output="sos")
    if not np.all(np.isfinite(sos)):
        raise ValueError("non-finite filter coefficients")
    return sos


def apply_bandpass(x: np.ndarray, sos: np.ndarray) -> np.ndarray:
    """Zero-phase (forward-backward) filtering along the last axis.

    The edges are extended by odd reflection over ``3 * ntaps`` samples, shortened
    when the record is too short to supply that many.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] == 0:
        return x.copy()
    ntaps = 2 * len(sos) + 1
    padlen = min(3 * ntaps, x.shape[-1] - 1)
    return signal.sosfiltfilt(sos, x, axis=-1, padtype="odd", padlen=padlen)


def zscore_per_lead(leads: np.ndarray) -> np.ndarray:
    leads = np.asarray(leads, dtype=np.float64)
    mu = leads.mean(axis=-1, keepdims=True)
    centered = leads - mu
    sigma = np.sqrt(np.mean(centered**2, axis=-1, keepdims=True))
    return centered / np.maximum(sigma, SIGMA_FLOOR)


def window(leads: np.ndarray, spec: WindowSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Crop or suffix-pad the time axis to exactly ``spec.length_samples``."""
    leads = np.asarray(leads)
    n_time = leads.shape[-1]
    length = spec.length_samples
    if n_time < length:
        out = np.zeros(leads.shape[:-1] + (length,), dtype=leads.dtype)
        out[..., :n_time] = leads
        return out
    if spec.mode is WindowMode.EVAL_CENTER:
        start = (n_time - length) // 2
    else:
        if rng is None:
            raise ValueError("random-offset windowing needs an rng")
        start = int(rng.integers(0, n_time - length + 1))
    return leads[..., start : start + length].copy()


def filter_and_normalize(leads: np.ndarray, bandpass: BandpassSpec, sos=None) -> np.ndarray:
    """The deterministic part of :func:`preprocess`; cacheable per record."""
    if sos is None:
        sos = design_bandpass(bandpass)
    return zscore_per_lead(apply_bandpass(leads, sos))


def preprocess(record, bandpass: BandpassSpec, winspec: WindowSpec, rng=None) -> np.ndarray:
    """filter -> z-score -> window, returning a [n_leads, L] matrix."""
    if record.fs != bandpass.fs:
        raise ValueError(f"{record.id}: sampling rate {record.fs} Hz, pipeline expects {bandpass.fs} Hz")
    return window(filter_and_normalize(record.leads, bandpass), winspec, rng)
