"""Worker-count handling.

Scan kernels are data-parallel over neuron columns; each column owns a
fixed reduction tree, so results are bit-identical for any worker count.
The count defaults to the ``HYPR_WORKERS`` environment variable and is
applied via numba's threading layer.
"""

from __future__ import annotations

import os

import numba

from .errors import ConfigError


def default_workers() -> int:
    env = os.environ.get("HYPR_WORKERS", "")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"HYPR_WORKERS must be an integer, got {env!r}") from exc
    return 1


def resolve_workers(workers: int | None) -> int:
    n = default_workers() if workers is None else int(workers)
    if n < 1:
        raise ConfigError(f"worker count must be >= 1, got {n}")
    return min(n, numba.config.NUMBA_NUM_THREADS)


def apply_workers(workers: int) -> None:
    numba.set_num_threads(resolve_workers(workers))
