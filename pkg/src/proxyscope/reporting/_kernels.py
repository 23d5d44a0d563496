"""Grouped (proxied, total) counting over integer-coded records.

Uses a numba kernel when numba is importable and ``PROXYSCOPE_DISABLE_NUMBA``
is unset or ``0``; otherwise a numpy implementation with identical output.
"""

from __future__ import annotations

import os

import numpy as np


def grouped_counts_numpy(codes: np.ndarray, flags: np.ndarray, n_groups: int) -> tuple[np.ndarray, np.ndarray]:
    total = np.bincount(codes, minlength=n_groups).astype(np.int64)
    proxied = np.bincount(codes[flags.astype(bool)], minlength=n_groups).astype(np.int64)
    return proxied, total


def _numba_disabled() -> bool:
    return os.environ.get("PROXYSCOPE_DISABLE_NUMBA", "0") not in ("", "0")


grouped_counts_numba = None
if not _numba_disabled():
    try:
        import numba
    except ImportError:
        numba = None
    if numba is not None:
        @numba.njit(cache=True, nogil=True)
        def grouped_counts_numba(codes, flags, n_groups):
            proxied = np.zeros(n_groups, np.int64)
            total = np.zeros(n_groups, np.int64)
            for i in range(codes.shape[0]):
                g = codes[i]
                total[g] += 1
                if flags[i]:
                    proxied[g] += 1
            return proxied, total


if grouped_counts_numba is not None:
    BACKEND = "numba"
else:
    BACKEND = "numpy"


def grouped_counts(codes: np.ndarray, flags: np.ndarray, n_groups: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-group counts of flagged and all records. ``codes`` must lie in ``[0, n_groups)``."""
    codes = np.ascontiguousarray(codes, dtype=np.int64)
    flags = np.ascontiguousarray(flags, dtype=np.bool_)
    if codes.shape != flags.shape:
        raise ValueError("codes and flags must have the same length")
    if codes.size and (codes.min() < 0 or codes.max() >= n_groups):
        raise ValueError("group code out of range")
    if grouped_counts_numba is not None:
        return grouped_counts_numba(codes, flags, n_groups)
    return grouped_counts_numpy(codes, flags, n_groups)


def warm_up() -> None:
    """Trigger JIT compilation (or cache load) ahead of timed work."""
    grouped_counts(np.zeros(1, np.int64), np.zeros(1, np.bool_), 1)
