"""Reproducible, chunked Monte Carlo sampling.

Samples are generated in fixed-size chunks.  Chunk c of a stream draws from
Philox keyed by SeedSequence(master_seed, spawn_key=(*stream_keys, c)), and
every chunk is always generated at full size, so the randomness consumed by
sample k is a pure function of (master_seed, stream_keys, k).  Chunks are
evaluated on a thread pool and concatenated in chunk order, so results are
bit-identical for any worker count.
"""

from __future__ import annotations

import os
import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ValidationError

CHUNK_SIZE = 4096
MAX_SEED = (1 << 64) - 1

_settings = threading.local()


@dataclass(frozen=True)
class SampleSeed:
    master_seed: int
    sample_index: int

    def chunk(self) -> tuple[int, int]:
        return divmod(self.sample_index, CHUNK_SIZE)


def check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed <= MAX_SEED:
        raise ValidationError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 64-bit child seed for a named sub-task."""
    ss = np.random.SeedSequence(check_seed(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def chunk_rng(seed: int, keys: Sequence[int], chunk: int) -> np.random.Generator:
    ss = np.random.SeedSequence(check_seed(seed),
                                spawn_key=tuple(int(k) for k in keys) + (int(chunk),))
    return np.random.Generator(np.random.Philox(ss))


def default_threads() -> int:
    value = getattr(_settings, "threads", None)
    if value is not None:
        return value
    env = os.environ.get("PFMC_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ValidationError(f"PFMC_THREADS must be an integer, got {env!r}") from exc
    return 1


@contextmanager
def thread_count(threads: int) -> Iterator[None]:
    """Temporarily set the worker count used by `draw_samples`."""
    if threads < 1:
        raise ValidationError(f"thread count must be positive, got {threads}")
    previous = getattr(_settings, "threads", None)
    _settings.threads = int(threads)
    try:
        yield
    finally:
        _settings.threads = previous


def iter_chunks(draw: Callable[[np.random.Generator, int], np.ndarray],
                num_samples: int, seed: int, keys: Sequence[int] = (),
                threads: int | None = None) -> Iterator[np.ndarray]:
    """Yield per-chunk sample arrays in chunk order, truncated to num_samples in total.

    `draw(rng, CHUNK_SIZE)` is always called at full chunk size so that the
    values of sample k do not depend on num_samples.
    """
    if num_samples <= 0:
        return
    n_chunks = -(-num_samples // CHUNK_SIZE)
    threads = default_threads() if threads is None else threads

    def run(c: int) -> np.ndarray:
        out = np.asarray(draw(chunk_rng(seed, keys, c), CHUNK_SIZE), dtype=complex)
        keep = min(CHUNK_SIZE, num_samples - c * CHUNK_SIZE)
        return out[:keep]

    if threads <= 1 or n_chunks == 1:
        for c in range(n_chunks):
            yield run(c)
        return
    window = 4 * threads
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for start in range(0, n_chunks, window):
            yield from pool.map(run, range(start, min(start + window, n_chunks)))


def draw_samples(draw: Callable[[np.random.Generator, int], np.ndarray],
                 num_samples: int, seed: int, keys: Sequence[int] = (),
                 threads: int | None = None) -> np.ndarray:
    """All samples of a stream as one array (see `iter_chunks`)."""
    parts = list(iter_chunks(draw, num_samples, seed, keys, threads))
    return np.concatenate(parts) if parts else np.zeros(0, dtype=complex)
