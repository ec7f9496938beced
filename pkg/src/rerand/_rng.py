"""Random-state plumbing.

All randomness flows from a root integer seed. Worker and iteration streams
are derived with :func:`child_rng`, which maps ``(root, *keys)`` to an
independent ``numpy`` generator through ``SeedSequence`` spawn keys. The
derived stream depends only on the keys, never on which worker asks for it,
so parallel and serial runs draw identical numbers.
"""

from __future__ import annotations

import os
import zlib

import numpy as np


ENV_SEED = "RERAND_SEED"
DEFAULT_SEED = 20240101


def resolve_seed(seed: int | None) -> int:
    """Return ``seed``, else ``$RERAND_SEED``, else the package default."""
    if seed is not None:
        return int(seed)
    env = os.environ.get(ENV_SEED)
    if env:
        return int(env)
    return DEFAULT_SEED


def as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def _key(k) -> int:
    # string labels get a stable hash, independent of PYTHONHASHSEED
    if isinstance(k, str):
        return zlib.crc32(k.encode()) | (1 << 40)
    return int(k)


def child_rng(root: int, *keys) -> np.random.Generator:
    """Split function: generator for stream ``keys`` under ``root``.

    Keys are non-negative integers or short string labels.
    """
    ss = np.random.SeedSequence(entropy=int(root), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def root_of(seed) -> int:
    """Collapse any seed-like value to an integer root for splitting."""
    if seed is None:
        return resolve_seed(None)
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    rng = as_generator(seed)
    return int(rng.integers(0, 2**63 - 1))
