"""Frame deduplication by time-series differencing and the stable/rapid wavelet split."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data_io import FeatureSequence
from .exceptions import EmptyPool, NonFiniteValue
from .validation import check_sequence, check_sequences


@dataclass
class DedupReport:
    kept_indices: list[int]
    removed_count: int
    tau: float


@dataclass
class WaveletPair:
    stable: np.ndarray
    rapid: np.ndarray


def _features(seq) -> np.ndarray:
    if isinstance(seq, FeatureSequence):
        return np.asarray(seq.features, dtype=np.float64)
    return np.asarray(seq, dtype=np.float64)


def adjacent_differences(seq) -> np.ndarray:
    """Squared Euclidean distance between every pair of consecutive frames."""
    x = _features(seq)
    if not np.all(np.isfinite(x)):
        raise NonFiniteValue("sequence contains non-finite values")
    if x.shape[0] < 2:
        return np.zeros(0)
    step = np.diff(x, axis=0)
    return np.einsum("ij,ij->i", step, step)


def select_tau(train_sequences, duplicate_fraction: float) -> float:
    """Linear-interpolated ``duplicate_fraction`` quantile of pooled adjacent differences."""
    if not 0.0 <= duplicate_fraction < 1.0:
        raise ValueError("duplicate_fraction must lie in [0, 1)")
    pooled = [adjacent_differences(s) for s in train_sequences]
    pooled = np.concatenate(pooled) if pooled else np.zeros(0)
    if pooled.size == 0:
        raise EmptyPool("no adjacent frame pairs to calibrate tau on")
    return float(np.quantile(pooled, duplicate_fraction, method="linear"))


def dedup_indices(x: np.ndarray, tau: float) -> list[int]:
    kept = [0]
    last = x[0]
    for i in range(1, x.shape[0]):
        step = x[i] - last
        if float(step @ step) >= tau:
            kept.append(i)
            last = x[i]
    return kept


def deduplicate_sequence(seq, tau: float):
    """Drop every frame closer than ``tau`` (squared L2) to the last retained frame.

    Returns the reduced sequence (same type as the input) and a DedupReport.
    """
    if tau < 0:
        raise ValueError("tau must be non-negative")
    x = _features(seq)
    kept = dedup_indices(x, tau)
    report = DedupReport(kept_indices=kept, removed_count=x.shape[0] - len(kept), tau=float(tau))
    if isinstance(seq, FeatureSequence):
        out = FeatureSequence(seq.case_id, seq.features[kept], seq.label, seq.magnification_tag)
    else:
        out = np.asarray(seq)[kept]
    return out, report


def stationary_haar_decompose(seq) -> WaveletPair:
    """Single-level undecimated Haar split with the left boundary ``x[-1] := x[0]``.

    ``stable + rapid`` reproduces the input exactly.
    """
    x = _features(seq)
    if not np.all(np.isfinite(x)):
        raise NonFiniteValue("sequence contains non-finite values")
    prev = np.concatenate([x[:1], x[:-1]], axis=0)
    return WaveletPair(stable=(x + prev) / 2.0, rapid=(x - prev) / 2.0)


class DuplicateFrameRemover(TransformerMixin, BaseEstimator):
    """Calibrate the differencing threshold on training sequences and drop near-duplicates.

    Parameters
    ----------
    duplicate_fraction : float, default=0.25
        Quantile of the pooled adjacent-difference distribution used as ``tau``.
    tau : float or None, default=None
        Fixed threshold; overrides calibration when given.
    """

    def __init__(self, duplicate_fraction=0.25, tau=None):
        self.duplicate_fraction = duplicate_fraction
        self.tau = tau

    def fit(self, X, y=None):
        X = check_sequences(X)
        if self.tau is not None:
            self.tau_ = float(self.tau)
        else:
            self.tau_ = select_tau(X, self.duplicate_fraction)
        return self

    def transform(self, X):
        check_is_fitted(self, "tau_")
        X = check_sequences(X)
        out = []
        reports = []
        for x in X:
            reduced, report = deduplicate_sequence(x, self.tau_)
            out.append(reduced)
            reports.append(report)
        self.last_reports_ = reports
        return out


class StationaryHaarSplitter(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping each sequence to its (stable, rapid) pair."""

    def fit(self, X, y=None):
        check_sequences(X)
        return self

    def transform(self, X):
        return [stationary_haar_decompose(check_sequence(x)) for x in check_sequences(X)]


@dataclass
class PreparedCase:
    """A deduplicated sequence with the three views the model consumes."""

    case_id: str
    X: np.ndarray
    X_stb: np.ndarray
    X_rpd: np.ndarray
    label: int | None
    removed: int = 0


def prepare_case(x, tau: float, use_wavelet=True, case_id="", label=None) -> PreparedCase:
    """Deduplicate with a fixed ``tau`` then split; without the wavelet both views are ``X``."""
    arr = check_sequence(x)
    kept = dedup_indices(arr, tau)
    X = arr[kept]
    if use_wavelet:
        pair = stationary_haar_decompose(X)
        X_stb, X_rpd = pair.stable, pair.rapid
    else:
        X_stb = X_rpd = X
    return PreparedCase(case_id, X, X_stb, X_rpd, label, arr.shape[0] - len(kept))
