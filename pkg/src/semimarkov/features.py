"""Accelerometer features at one-second resolution.

Raw tri-axial acceleration (g units, nominally 40 Hz) is smoothed, turned
into per-sample VeDBA and pitch, and summarized per non-overlapping
one-second window as log mean VeDBA, mean pitch and log SD of pitch.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .model import LabeledSeries

LOG_FLOOR = 1e-8
FEATURE_NAMES = ("log_mean_vedba", "mean_pitch", "log_sd_pitch")


class FeatureWarning(UserWarning):
    pass


def moving_average(signal, window: int = 10) -> np.ndarray:
    """Centered moving average; windows shrink at the edges.

    Sample i averages indices [i - window//2, i - window//2 + window)
    clipped to the signal, so even windows lean one sample to the right.
    """
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("signal must be a non-empty 1-D array")
    if window < 1:
        raise ValueError("window must be >= 1")
    if window == 1:
        return x.copy()
    n = x.size
    c = np.concatenate(([0.0], np.cumsum(x)))
    lo = np.clip(np.arange(n) - window // 2, 0, n)
    hi = np.clip(np.arange(n) - window // 2 + window, 0, n)
    return (c[hi] - c[lo]) / (hi - lo)


def vedba(surge, sway, heave, static_window: int = 40) -> np.ndarray:
    """Vectorial dynamic body acceleration per sample.

    Each axis loses its running mean over ``static_window`` samples before
    the Euclidean norm is taken; ``static_window=0`` uses the raw axes.
    """
    axes = [np.asarray(a, dtype=float) for a in (surge, sway, heave)]
    if len({a.shape for a in axes}) != 1:
        raise ValueError("axes must have equal lengths")
    if static_window < 0:
        raise ValueError("static_window must be >= 0")
    if static_window > 0:
        axes = [a - moving_average(a, static_window) for a in axes]
    return np.sqrt(axes[0] ** 2 + axes[1] ** 2 + axes[2] ** 2)


def pitch(surge, static_window: int = 40) -> np.ndarray:
    """Head pitch in degrees from the running mean of surge (negative = head down)."""
    s = np.asarray(surge, dtype=float)
    static = moving_average(s, static_window) if static_window > 1 else s
    return np.degrees(np.arcsin(np.clip(static, -1.0, 1.0)))


@dataclass(frozen=True)
class RawAccel:
    t: np.ndarray
    surge: np.ndarray
    sway: np.ndarray
    heave: np.ndarray
    labels: np.ndarray | None = None
    rate: float = 40.0

    def __post_init__(self):
        for f in ("t", "surge", "sway", "heave"):
            object.__setattr__(self, f, np.asarray(getattr(self, f), dtype=float))
        n = self.t.size
        if any(getattr(self, f).shape != (n,) for f in ("surge", "sway", "heave")):
            raise ValueError("timestamps and axes must have equal lengths")
        if self.labels is not None:
            object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
            if self.labels.shape != (n,):
                raise ValueError("labels must have one entry per sample")
        if n > 1:
            dt = np.diff(self.t)
            if np.any(dt <= 0):
                raise ValueError("timestamps must be strictly increasing")
            observed = 1.0 / np.median(dt)
            if abs(observed - self.rate) > 0.1 * self.rate:
                warnings.warn(f"sampling rate {observed:.3g} Hz is more than 10% off {self.rate:g} Hz",
                              FeatureWarning, stacklevel=2)


@dataclass(frozen=True)
class FeatureSeries:
    """Per-window features, (n_windows, 3) in FEATURE_NAMES order."""

    start: np.ndarray
    values: np.ndarray
    labels: np.ndarray | None = None

    def column(self, name: str) -> np.ndarray:
        return self.values[:, FEATURE_NAMES.index(name)]

    def to_series(self, series_id: str = "") -> LabeledSeries:
        return LabeledSeries(obs=self.values, labels=self.labels, id=series_id)


def _floored_log(x: np.ndarray, what: str) -> np.ndarray:
    bad = ~(x > LOG_FLOOR)
    if bad.any():
        warnings.warn(f"{int(bad.sum())} window(s) with {what} <= {LOG_FLOOR:g}; floored before log",
                      FeatureWarning, stacklevel=3)
    return np.log(np.maximum(x, LOG_FLOOR))


def window_features(raw: RawAccel, rate: int = 40, smooth_window: int = 10,
                    static_window: int = 40) -> FeatureSeries:
    """Summaries over consecutive ``rate``-sample windows; a trailing partial window is dropped.

    Labels, when present, are 0-based and the window takes the most frequent
    one (ties to the lowest state).
    """
    if rate < 2:
        raise ValueError("rate must be >= 2 samples per window")
    n_win = raw.t.size // rate
    if n_win < 1:
        raise ValueError(f"need at least {rate} samples for one window")
    sm = [moving_average(a, smooth_window) for a in (raw.surge, raw.sway, raw.heave)]
    v = vedba(*sm, static_window=static_window)
    ph = pitch(sm[0], static_window=static_window)
    n = n_win * rate
    v = v[:n].reshape(n_win, rate)
    ph = ph[:n].reshape(n_win, rate)
    values = np.column_stack([
        _floored_log(v.mean(axis=1), "zero mean VeDBA"),
        ph.mean(axis=1),
        _floored_log(ph.std(axis=1, ddof=1), "zero pitch SD"),
    ])
    labels = None
    if raw.labels is not None:
        lab = raw.labels[:n].reshape(n_win, rate)
        labels = np.array([np.bincount(row).argmax() for row in lab], dtype=np.int64)
    return FeatureSeries(start=raw.t[:n:rate].copy(), values=values, labels=labels)
