"""Seeding, substreams, parallel path execution and streaming statistics.

Reproducibility contract: every random draw comes from a counter-based
Philox stream keyed by ``(seed, path_index, channel)``.  Work is split into
blocks of a fixed size (:data:`BLOCK_SIZE`), each block drawing from the
streams keyed by its first path index; block boundaries never depend on the
worker count, so results are bitwise identical whether a run uses one
worker or many.  Accumulators are merged in block order.

The environment variable ``HALFGRAD_WORKERS`` overrides the worker count of
any plan.
"""

from __future__ import annotations

import multiprocessing
import os
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError

Array = np.ndarray

BLOCK_SIZE = 16384

_CHANNELS = {"gaussian": 0, "uniform": 1, "bump": 2}


def derive_substream(seed: int, path_index: int, channel: str) -> np.random.Generator:
    """Independent generator for one (seed, path, channel) triple.

    Uses the Philox counter-based generator keyed directly by the triple, so
    streams are collision-free by construction and identical across worker
    counts and platforms.
    """
    try:
        chan = _CHANNELS[channel]
    except KeyError:
        raise ConfigError(f"unknown channel {channel!r}; expected one of {sorted(_CHANNELS)}")
    if path_index < 0:
        raise ConfigError("path_index must be non-negative")
    key = np.array(
        [np.uint64(seed % (1 << 64)), np.uint64((path_index << 2) | chan)],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class RunPlan:
    """Execution plan shared by all estimators."""

    seed: int
    paths: int
    steps: int
    workers: int | str = "auto"
    estimator_tag: str = ""

    def __post_init__(self):
        if self.paths < 2:
            raise ConfigError("paths must be >= 2")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")

    def resolved_workers(self) -> int:
        env = os.environ.get("HALFGRAD_WORKERS")
        raw = env if env is not None else self.workers
        if raw == "auto":
            return os.cpu_count() or 1
        try:
            w = int(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"workers must be an integer or 'auto', got {raw!r}")
        if w < 1:
            raise ConfigError("workers must be >= 1")
        return w


@dataclass
class GradEstimate:
    """A d-vector Monte Carlo estimate with per-component standard errors."""

    estimate: Array
    stderr: Array
    paths: int
    seed: int
    estimator_tag: str = ""

    def __post_init__(self):
        self.estimate = np.atleast_1d(np.asarray(self.estimate, dtype=float))
        self.stderr = np.atleast_1d(np.asarray(self.stderr, dtype=float))


class StatAccumulator:
    """Streaming mean / variance over vector-valued samples.

    Uses the pairwise (Chan) update so that blocks can be combined; merging
    is associative, and the fixed block order used by :func:`run_paths`
    makes results reproducible bit for bit.
    """

    def __init__(self, width: int = 1):
        self.width = width
        self.count = 0
        self.mean = np.zeros(width)
        self.m2 = np.zeros(width)
        self.min = np.full(width, np.inf)
        self.max = np.full(width, -np.inf)

    def update_batch(self, samples: Array) -> None:
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        m = samples.shape[0]
        if m == 0:
            return
        batch_mean = samples.mean(axis=0)
        batch_m2 = ((samples - batch_mean) ** 2).sum(axis=0)
        self._combine(m, batch_mean, batch_m2, samples.min(axis=0), samples.max(axis=0))

    def merge(self, other: "StatAccumulator") -> None:
        if other.count == 0:
            return
        self._combine(other.count, other.mean, other.m2, other.min, other.max)

    def _combine(self, n_b: int, mean_b: Array, m2_b: Array, min_b: Array, max_b: Array) -> None:
        n_a = self.count
        n = n_a + n_b
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (n_b / n)
        self.m2 = self.m2 + m2_b + delta**2 * (n_a * n_b / n)
        self.count = n
        self.min = np.minimum(self.min, min_b)
        self.max = np.maximum(self.max, max_b)

    @property
    def stderr(self) -> Array:
        if self.count < 2:
            return np.full(self.width, np.nan)
        return np.sqrt(self.m2 / (self.count * (self.count - 1)))


def block_bounds(n_paths: int) -> list[tuple[int, int]]:
    """Fixed block partition of ``range(n_paths)``; independent of workers."""
    return [(s, min(s + BLOCK_SIZE, n_paths)) for s in range(0, n_paths, BLOCK_SIZE)]


# The active block job is handed to forked workers through module state so
# that closures over model callables never cross a pickle boundary.
_ACTIVE_JOB: Callable[[int], Array] | None = None


def _run_job(block_index: int) -> Array:
    return _ACTIVE_JOB(block_index)


def _map_blocks(job: Callable[[int], Array], n_blocks: int, workers: int) -> list[Array]:
    if workers <= 1 or n_blocks <= 1:
        return [job(b) for b in range(n_blocks)]
    global _ACTIVE_JOB
    _ACTIVE_JOB = job
    try:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(processes=min(workers, n_blocks)) as pool:
            return pool.map(_run_job, range(n_blocks))
    finally:
        _ACTIVE_JOB = None


def run_blocks(plan: RunPlan, block_fn: Callable[[int, int, int], Array]) -> StatAccumulator:
    """Run ``block_fn(block_index, start, stop) -> (stop-start, k) samples``.

    Blocks are evaluated (possibly in parallel) and merged in block order.
    This is the vectorised driver behind every estimator.
    """
    bounds = block_bounds(plan.paths)
    workers = plan.resolved_workers()

    def job(b: int) -> Array:
        start, stop = bounds[b]
        return np.atleast_2d(np.asarray(block_fn(b, start, stop), dtype=float))

    results = _map_blocks(job, len(bounds), workers)
    acc = StatAccumulator(width=results[0].shape[1])
    for samples in results:
        acc.update_batch(samples)
    return acc


def run_paths(plan: RunPlan, per_path: Callable[[int], Array | float]) -> StatAccumulator:
    """Mean/stderr of ``per_path(path_index)`` over ``plan.paths`` paths.

    ``per_path`` must be pure given its substreams.  Errors raised inside a
    path are re-raised with the offending path index attached.
    """

    def block_fn(_b: int, start: int, stop: int) -> Array:
        rows = []
        for i in range(start, stop):
            try:
                rows.append(np.atleast_1d(np.asarray(per_path(i), dtype=float)))
            except Exception as exc:
                raise type(exc)(f"path {i}: {exc}") from exc
        return np.stack(rows, axis=0)

    return run_blocks(plan, block_fn)


def mean_stderr(acc: StatAccumulator) -> tuple[Array, Array]:
    return acc.mean.copy(), acc.stderr


def block_gaussian_stream(seed: int, start: int) -> np.random.Generator:
    """Gaussian channel stream for the block whose first path index is ``start``."""
    return derive_substream(seed, start, "gaussian")


def block_uniform_stream(seed: int, start: int) -> np.random.Generator:
    """Uniform channel stream for the block whose first path index is ``start``."""
    return derive_substream(seed, start, "uniform")
