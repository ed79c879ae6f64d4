"""Input validation for ragged sequence collections."""

from __future__ import annotations

import numpy as np

from .exceptions import DimMismatch, LengthMismatch, NonFiniteValue


def check_sequence(x, min_frames=1, dim=None) -> np.ndarray:
    """Return ``x`` as a finite float64 ``n x d`` array."""
    features = getattr(x, "features", x)
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D sequence (frames x features), got ndim={arr.ndim}")
    if arr.shape[0] < min_frames or arr.shape[1] < 1:
        raise ValueError(f"sequence of shape {arr.shape} has fewer than {min_frames} frames")
    if dim is not None and arr.shape[1] != dim:
        raise DimMismatch(f"expected {dim} features per frame, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue("sequence contains NaN or infinite values")
    return arr


def check_sequences(X, dim=None) -> list[np.ndarray]:
    """Validate a list of variable-length sequences sharing one feature width."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        raise ValueError("expected a list of sequences, got a single 2-D array; wrap it in a list")
    seqs = [check_sequence(x, dim=dim) for x in X]
    if not seqs:
        raise ValueError("empty collection of sequences")
    widths = {s.shape[1] for s in seqs}
    if len(widths) > 1:
        raise DimMismatch(f"sequences disagree on feature width: {sorted(widths)}")
    return seqs


def check_labels(y, n_expected, n_classes=None) -> np.ndarray:
    labels = np.asarray(y)
    if labels.ndim != 1:
        raise ValueError("labels must be one-dimensional")
    if labels.shape[0] != n_expected:
        raise LengthMismatch(f"{n_expected} sequences but {labels.shape[0]} labels")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise ValueError("labels must be integer class indices")
        labels = labels.astype(np.int64)
    if labels.min() < 0 or (n_classes is not None and labels.max() >= n_classes):
        raise ValueError("labels outside [0, n_classes)")
    return labels
