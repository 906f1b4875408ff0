"""Input validation helpers for bags, survival labels and hazard curves.

These mirror the ``check_*`` helpers of scikit-learn: they coerce inputs to
canonical numpy forms and raise :class:`~pktransfer.exceptions.ContractError`
(or a subclass) on malformed data.
"""

from __future__ import annotations

import hashlib
from typing import NamedTuple

import numpy as np

from .exceptions import ContractError, DimensionError

LABEL_DTYPE = np.dtype([("time_bin", np.int64), ("event", np.bool_)])


class SurvivalLabel(NamedTuple):
    """Discrete time bin plus event indicator (False means censored)."""

    time_bin: int
    event: bool


def make_labels(time_bin, event):
    """Pack parallel arrays into a structured label array."""
    time_bin = np.asarray(time_bin)
    event = np.asarray(event)
    if time_bin.shape != event.shape or time_bin.ndim != 1:
        raise DimensionError(f"time_bin {time_bin.shape} and event {event.shape} must be equal 1-D")
    if time_bin.size and not np.all(time_bin == np.round(time_bin)):
        raise ContractError("time bins must be integers")
    y = np.empty(time_bin.shape[0], dtype=LABEL_DTYPE)
    y["time_bin"] = time_bin.astype(np.int64)
    y["event"] = event.astype(bool)
    return y


def check_labels(y, n_bins=None):
    """Return ``(time_bin, event)`` arrays from any supported label form.

    Accepts a structured array with ``time_bin``/``event`` fields, a sequence
    of :class:`SurvivalLabel` or ``(time_bin, event)`` pairs, or an
    ``(n, 2)`` numeric array.
    """
    if isinstance(y, np.ndarray) and y.dtype.names:
        time, event = y["time_bin"], y["event"]
    else:
        arr = np.asarray([tuple(item) for item in y], dtype=np.float64) if len(y) else np.empty((0, 2))
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise DimensionError(f"labels must be (n, 2), got {arr.shape}")
        time, event = arr[:, 0], arr[:, 1]
    time = np.asarray(time)
    if time.size and not np.all(time == np.round(time)):
        raise ContractError("time bins must be integers")
    time = time.astype(np.int64)
    event = np.asarray(event).astype(bool)
    if np.any(time < 0):
        raise ContractError("time bins must be >= 0")
    if n_bins is not None and np.any(time >= n_bins):
        raise ContractError(f"time bin {time.max()} outside [0, {n_bins})")
    return time, event


def check_hazards(h):
    """Validate a hazard curve (or a stack of curves along the last axis)."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 0 or h.shape[-1] == 0:
        raise DimensionError("hazard curve must have at least one bin")
    if not np.all(np.isfinite(h)):
        raise ContractError("hazards must be finite")
    if np.any(h < 0) or np.any(h > 1):
        raise ContractError("hazards must lie in [0, 1]")
    return h


def check_bag(features, d_in=None):
    """Coerce one bag to a finite float64 ``(M, d)`` matrix with M >= 1."""
    x = np.asarray(getattr(features, "features", features), dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"bag must be a non-empty (M, d) matrix, got shape {x.shape}")
    if d_in is not None and x.shape[1] != d_in:
        raise DimensionError(f"bag has d={x.shape[1]}, model expects d_in={d_in}")
    if not np.all(np.isfinite(x)):
        raise ContractError("bag features must be finite")
    return x


def check_bags(X, d_in=None):
    """Validate a sequence of bags; all must share the feature dimension."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        raise DimensionError("expected a sequence of bags, got a single 2-D array")
    bags = [check_bag(b, d_in) for b in X]
    if not bags:
        raise ContractError("need at least one bag")
    dims = {b.shape[1] for b in bags}
    if len(dims) > 1:
        raise DimensionError(f"bags disagree on feature dimension: {sorted(dims)}")
    return bags


def bag_keys(X):
    """Stable per-bag identifiers: ``bag_id`` when present, else a content hash."""
    keys = []
    for b in X:
        bag_id = getattr(b, "bag_id", None)
        if bag_id is None:
            arr = np.ascontiguousarray(np.asarray(b, dtype=np.float64))
            bag_id = "sha1:" + hashlib.sha1(arr.tobytes() + str(arr.shape).encode()).hexdigest()
        keys.append(bag_id)
    return keys
