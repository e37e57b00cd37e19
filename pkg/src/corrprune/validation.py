"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numpy as np

from .correspondence import CorrespondenceSet
from .exceptions import ContractError


def check_scenes(X, dtype=np.float64):
    """Coerce matches to a stacked ``(S, N, 4)`` array.

    Accepts one ``(N, 4)`` array, a stacked ``(S, N, 4)`` array, or a list
    of :class:`CorrespondenceSet` of equal size.
    """
    if isinstance(X, CorrespondenceSet):
        X = [X]
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], CorrespondenceSet):
        sizes = {len(c) for c in X}
        if len(sizes) != 1:
            raise ContractError(f"scenes must share one size, got {sorted(sizes)}")
        X = np.stack([c.coords for c in X])
    X = np.asarray(X, dtype=dtype)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[-1] != 4:
        raise ContractError(f"matches must have shape (S, N, 4), got {X.shape}")
    if X.shape[0] == 0 or X.shape[1] == 0:
        raise ContractError("need at least one scene with at least one match")
    if not np.all(np.isfinite(X)):
        raise ContractError("match coordinates must be finite")
    return X


def labels_of(X):
    """Labels stored on CorrespondenceSets, or None when any set lacks them."""
    if isinstance(X, CorrespondenceSet):
        X = [X]
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], CorrespondenceSet):
        if any(c.labels is None for c in X):
            return None
        return np.stack([c.labels for c in X])
    return None


def essentials_of(X):
    if isinstance(X, CorrespondenceSet):
        X = [X]
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], CorrespondenceSet):
        if any(c.essential is None for c in X):
            return None
        return np.stack([c.essential for c in X])
    return None


def check_labels(y, shape):
    """0/1 labels reshaped to ``shape`` (S, N)."""
    y = np.asarray(y)
    if y.size != int(np.prod(shape)):
        raise ContractError(f"labels have {y.size} entries, expected shape {tuple(shape)}")
    y = y.reshape(shape)
    if not np.isin(y, (0, 1)).all():
        raise ContractError("labels must be 0 or 1")
    return y.astype(np.int8)


def check_essentials(E, count):
    E = np.asarray(E, dtype=np.float64)
    if E.shape == (3, 3):
        E = E[None]
    if E.shape != (count, 3, 3):
        raise ContractError(f"essentials must have shape ({count}, 3, 3), got {E.shape}")
    if not np.all(np.isfinite(E)):
        raise ContractError("essential matrices must be finite")
    return E


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < minimum:
        raise ContractError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)
