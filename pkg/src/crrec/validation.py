"""Input validation shared by the estimator layer."""

from __future__ import annotations

import numpy as np

from .data import Dataset, TransitionSet
from .errors import DataError


def check_states(states, window: int, n_items: int) -> np.ndarray:
    """Coerce to a contiguous ``(n, window)`` int64 array of ids in ``0..n_items``."""
    arr = np.asarray(states)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != window:
        raise DataError(f"states must have shape (n, {window}), got {np.shape(states)}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise DataError("state entries must be integer item ids")
    arr = np.ascontiguousarray(arr, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() > n_items):
        raise DataError(f"state ids must lie in 0..{n_items}")
    return arr


def check_transitions(X) -> tuple[TransitionSet, TransitionSet | None, Dataset | None]:
    """Split an estimator input into ``(train, valid, dataset)``."""
    if isinstance(X, Dataset):
        return X.train, X.valid, X
    if isinstance(X, TransitionSet):
        return X, None, None
    raise DataError(f"expected a Dataset or TransitionSet, got {type(X).__name__}")


def check_k(k, n_items: int) -> int:
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= n_items:
        raise DataError(f"k must be an integer in 1..{n_items}, got {k!r}")
    return int(k)
