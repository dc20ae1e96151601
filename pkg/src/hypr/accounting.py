"""Allocation accounting for engine-owned buffers.

The constant-memory claim of the engine is about algorithmic buffers, not
process RSS, so every S-stage/P-stage workspace is allocated through a
:class:`BufferLedger`.  The ledger records the byte size of each live
buffer, the running total, the peak total, and the largest single
allocation, which lets tests assert that (a) the peak is a function of the
window length and network dimensions only, never of the total sequence
length, and (b) no dense per-step parameter-gradient tensor is ever
materialized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class BufferLedger:
    """Tracks numpy buffers owned by one engine instance."""

    current_bytes: int = 0
    peak_bytes: int = 0
    max_single_bytes: int = 0
    n_allocations: int = 0
    tags: dict = field(default_factory=dict)

    def alloc(self, shape, dtype, tag: str = "") -> np.ndarray:
        """Allocate a zeroed array and account for it."""
        arr = np.zeros(shape, dtype=dtype)
        self._register(arr.nbytes, tag)
        return arr

    def _register(self, nbytes: int, tag: str = "") -> None:
        self.current_bytes += nbytes
        self.n_allocations += 1
        self.peak_bytes = max(self.peak_bytes, self.current_bytes)
        self.max_single_bytes = max(self.max_single_bytes, nbytes)
        if tag:
            self.tags[tag] = self.tags.get(tag, 0) + nbytes

    def release(self, arr: np.ndarray) -> None:
        self.current_bytes -= arr.nbytes

    def reset_peak(self) -> None:
        self.peak_bytes = self.current_bytes
