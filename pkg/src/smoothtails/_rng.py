"""Deterministic random streams.

Every consumer asks for a generator keyed by ``(seed, *key)``.  Keys are
built from small integer tags plus block/generation indices, so work split
into fixed-size blocks produces identical numbers regardless of how many
threads execute the blocks.
"""
from concurrent.futures import ThreadPoolExecutor
import os

import numpy as np

# stream tags
POOL = 1
POPULATION = 2
PERMUTATION = 3
PATHS = 4
RECURSION = 5
TAILS = 6
GRID = 7
INIT = 8

BLOCK = 1 << 16
THREADS_ENV = "SMOOTHTAILS_THREADS"


def stream(seed, *key):
    """Counter-based (Philox) generator for the substream ``key`` of ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed) & ((1 << 64) - 1),
                                spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def default_threads():
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def blocks(n, size=BLOCK):
    """Fixed ``(index, start, stop)`` partition of ``range(n)``."""
    return [(j, a, min(a + size, n)) for j, a in enumerate(range(0, n, size))]


def run_blocks(fn, parts, threads=None):
    """Apply ``fn`` to each block descriptor, preserving order."""
    threads = threads or default_threads()
    if threads <= 1 or len(parts) <= 1:
        return [fn(p) for p in parts]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, parts))
