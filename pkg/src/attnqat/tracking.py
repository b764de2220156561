"""Lightweight accounting of live tensor bytes for memory-scaling checks.

Ops register their dominant array allocations with the active tracker (a
no-op when none is active). Scopes bound the lifetime of per-tile
temporaries so the tracker sees them released at the end of each tile
iteration, mirroring what refcounting does for real.
"""

from __future__ import annotations

import numpy as np

_ACTIVE = None


class AllocationTracker:
    """Tracks live registered bytes and the peak reached."""

    def __init__(self):
        self.live = 0
        self.peak = 0
        self._scopes = []

    def add(self, nbytes):
        self.live += int(nbytes)
        self.peak = max(self.peak, self.live)
        if self._scopes:
            self._scopes[-1] += int(nbytes)

    def release(self, nbytes):
        self.live -= int(nbytes)

    def __enter__(self):
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = self._prev
        return False


class _Scope:
    def __init__(self, tracker):
        self.tracker = tracker

    def __enter__(self):
        if self.tracker is not None:
            self.tracker._scopes.append(0)
        return self

    def __exit__(self, *exc):
        if self.tracker is not None:
            self.tracker.release(self.tracker._scopes.pop())
        return False


def scope():
    """Context manager releasing everything registered inside it on exit."""
    return _Scope(_ACTIVE)


def track(arr):
    """Register an array's bytes with the active tracker; returns the array."""
    if _ACTIVE is not None and isinstance(arr, np.ndarray):
        _ACTIVE.add(arr.nbytes)
    return arr
