"""Candidate treatment assignments: counting, ordering, ranking and sampling.

Two design structures are supported:

* complete randomization of ``n`` units with ``n_treated`` treated, and
* pair-matched randomization, where exactly one unit of each pair is treated.

Candidates are ordered lexicographically by their sorted treated-index tuple.
For paired designs this is the same as reading the per-pair choice bits as a
binary number, with the pair holding the smallest unit as the most
significant bit and bit 1 meaning "treat the larger unit of the pair".

Indices are plain Python ints, so candidate counts never overflow. The
vectorized rank/unrank helpers use ``int64`` and fall back to a Python loop
when the count does not fit.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from ._rng import as_generator
from .errors import DomainError

_INT64_MAX = 2**63 - 1


@dataclass(frozen=True)
class AssignmentVector:
    """Treatment indicator for ``n`` units, stored as sorted treated indices."""

    n: int
    treated: tuple[int, ...]

    def __post_init__(self):
        t = self.treated
        if any(b <= a for a, b in zip(t, t[1:])):
            raise DomainError("treated indices must be strictly increasing")
        if t and (t[0] < 0 or t[-1] >= self.n):
            raise DomainError("treated index out of range")
        if not 0 < len(t) < self.n:
            raise DomainError("both treatment groups must be non-empty")

    @classmethod
    def from_bits(cls, bits: Sequence[int] | str) -> "AssignmentVector":
        if isinstance(bits, str):
            bits = [int(c) for c in bits]
        vals = [int(b) for b in bits]
        if any(b not in (0, 1) for b in vals):
            raise DomainError("assignment bits must be 0 or 1")
        return cls(len(vals), tuple(i for i, b in enumerate(vals) if b))

    @property
    def n_treated(self) -> int:
        return len(self.treated)

    @property
    def bits(self) -> np.ndarray:
        out = np.zeros(self.n, dtype=np.int8)
        out[list(self.treated)] = 1
        return out

    @property
    def mask(self) -> int:
        """Bit-set form; bit ``i`` set when unit ``i`` is treated."""
        return sum(1 << i for i in self.treated)

    def complement(self) -> "AssignmentVector":
        return assignment_complement(self)

    def __str__(self) -> str:
        return "".join(map(str, self.bits.tolist()))


@dataclass(frozen=True)
class DesignSpace:
    """The set of candidate assignments for one experiment."""

    n: int
    n_treated: int
    pairs: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        if self.pairs is None:
            if not 0 < self.n_treated < self.n:
                raise DomainError(
                    f"n_treated must lie in (0, n); got n={self.n}, "
                    f"n_treated={self.n_treated}"
                )
            return
        seen = sorted(u for p in self.pairs for u in p)
        if seen != list(range(self.n)):
            raise DomainError("pairs must partition the units 0..n-1")
        if any(len(p) != 2 for p in self.pairs):
            raise DomainError("every pair must hold exactly two units")
        if self.n_treated != len(self.pairs):
            raise DomainError("paired designs treat exactly one unit per pair")

    @classmethod
    def complete(cls, n: int, n_treated: int) -> "DesignSpace":
        return cls(int(n), int(n_treated))

    @classmethod
    def paired(cls, pairs: Sequence[Sequence[int]]) -> "DesignSpace":
        norm = sorted(tuple(sorted(int(u) for u in p)) for p in pairs)
        n = 2 * len(norm)
        return cls(n, len(norm), tuple(norm))

    @classmethod
    def consecutive_pairs(cls, n_pairs: int) -> "DesignSpace":
        """Pairs ``(0, 1), (2, 3), ...``."""
        if n_pairs < 1:
            raise DomainError("need at least one pair")
        return cls.paired([(2 * j, 2 * j + 1) for j in range(n_pairs)])

    @property
    def structure(self) -> str:
        return "complete" if self.pairs is None else "paired"

    @property
    def treated_fraction(self) -> float:
        return self.n_treated / self.n


def count_randomizations(space: DesignSpace) -> int:
    """Exact number of candidate assignments."""
    if space.pairs is None:
        return math.comb(space.n, space.n_treated)
    return 2 ** len(space.pairs)


def _check_index(space: DesignSpace, index: int) -> int:
    total = count_randomizations(space)
    index = int(index)
    if not 0 <= index < total:
        raise DomainError(f"candidate index {index} outside [0, {total})")
    return index


def unrank(space: DesignSpace, index: int) -> AssignmentVector:
    """Assignment at position ``index`` of the enumeration order."""
    index = _check_index(space, index)
    if space.pairs is not None:
        npairs = len(space.pairs)
        treated = [
            p[(index >> (npairs - 1 - j)) & 1] for j, p in enumerate(space.pairs)
        ]
        return AssignmentVector(space.n, tuple(sorted(treated)))
    n, t = space.n, space.n_treated
    out = []
    r = index
    start = 0
    for j in range(t):
        for i in range(start, n):
            c = math.comb(n - 1 - i, t - j - 1)
            if r < c:
                out.append(i)
                start = i + 1
                break
            r -= c
    return AssignmentVector(n, tuple(out))


def rank(space: DesignSpace, w: AssignmentVector) -> int:
    """Inverse of :func:`unrank`."""
    if w.n != space.n or w.n_treated != space.n_treated:
        raise DomainError("assignment does not belong to this design space")
    if space.pairs is not None:
        treated = set(w.treated)
        idx = 0
        for p in space.pairs:
            lo, hi = p
            if (lo in treated) == (hi in treated):
                raise DomainError("assignment must treat exactly one unit per pair")
            idx = (idx << 1) | int(hi in treated)
        return idx
    n, t = space.n, space.n_treated
    total = math.comb(n, t)
    return total - 1 - sum(math.comb(n - 1 - c, t - j) for j, c in enumerate(w.treated))


def _next_combination(c: list[int], n: int) -> bool:
    t = len(c)
    i = t - 1
    while i >= 0 and c[i] == n - t + i:
        i -= 1
    if i < 0:
        return False
    c[i] += 1
    for j in range(i + 1, t):
        c[j] = c[j - 1] + 1
    return True


def enumerate_assignments(
    space: DesignSpace, start: int = 0, stop: int | None = None
) -> Iterator[AssignmentVector]:
    """Stream candidates ``start <= index < stop`` in enumeration order.

    State is O(n): the generator walks successors from ``unrank(start)``.
    Disjoint ``[start, stop)`` slices can be handed to separate workers.
    """
    total = count_randomizations(space)
    stop = total if stop is None else min(int(stop), total)
    if start >= stop:
        return
    if space.pairs is not None:
        for idx in range(start, stop):
            yield unrank(space, idx)
        return
    c = list(unrank(space, start).treated)
    for _ in range(stop - start):
        yield AssignmentVector(space.n, tuple(c))
        _next_combination(c, space.n)


def assignment_complement(w: AssignmentVector) -> AssignmentVector:
    chosen = set(w.treated)
    return AssignmentVector(w.n, tuple(i for i in range(w.n) if i not in chosen))


# -- vectorized helpers -----------------------------------------------------


def _comb_table(n: int, t: int) -> np.ndarray:
    table = np.zeros((n + 1, t + 1), dtype=np.int64)
    for a in range(n + 1):
        for b in range(t + 1):
            table[a, b] = math.comb(a, b)
    return table


def _fits_int64(space: DesignSpace) -> bool:
    return count_randomizations(space) <= _INT64_MAX


def treated_matrix(space: DesignSpace, indices) -> np.ndarray:
    """Treated-index rows for an array of candidate indices, shape (b, t)."""
    idx = np.asarray(indices)
    t = space.n_treated
    if idx.size == 0:
        return np.zeros((0, t), dtype=np.int64)
    if space.pairs is not None:
        if not _fits_int64(space):
            return np.array([unrank(space, int(i)).treated for i in idx], dtype=np.int64)
        pairs = np.asarray(space.pairs, dtype=np.int64)
        npairs = len(space.pairs)
        shifts = np.arange(npairs - 1, -1, -1, dtype=np.int64)
        bits = (idx.astype(np.int64)[:, None] >> shifts[None, :]) & 1
        out = pairs[np.arange(npairs)[None, :], bits]
        out.sort(axis=1)
        return out
    if not _fits_int64(space):
        return np.array([unrank(space, int(i)).treated for i in idx], dtype=np.int64)
    n = space.n
    table = _comb_table(n, t)
    r = idx.astype(np.int64).copy()
    need = np.full(r.shape, t, dtype=np.int64)
    filled = np.zeros(r.shape, dtype=np.int64)
    out = np.empty((r.size, t), dtype=np.int64)
    rows = np.arange(r.size)
    for i in range(n):
        active = need > 0
        if not active.any():
            break
        c = np.where(active, table[n - 1 - i, np.maximum(need - 1, 0)], 0)
        take = active & (r < c)
        out[rows[take], filled[take]] = i
        filled[take] += 1
        need[take] -= 1
        skip = active & ~take
        r[skip] -= c[skip]
    return out


INDICATOR_CACHE_LIMIT = 4_000_000


@lru_cache(maxsize=4)
def _indicator_cached(space: DesignSpace) -> np.ndarray:
    total = count_randomizations(space)
    treated = treated_matrix(space, np.arange(total, dtype=np.int64))
    ind = np.zeros((total, space.n))
    ind[np.arange(total)[:, None], treated] = 1.0
    ind.setflags(write=False)
    return ind


def candidate_indicator(space: DesignSpace) -> np.ndarray:
    """Read-only 0/1 matrix of every candidate, one row per index.

    Small designs are cached, since repeated Monte-Carlo work reuses them.
    """
    if count_randomizations(space) * space.n > INDICATOR_CACHE_LIMIT:
        raise DomainError("design too large to materialize every candidate")
    return _indicator_cached(space)


def rank_matrix(space: DesignSpace, treated: np.ndarray) -> np.ndarray:
    """Vectorized :func:`rank` for sorted treated-index rows."""
    treated = np.asarray(treated, dtype=np.int64)
    if space.pairs is not None:
        hi = np.array([p[1] for p in space.pairs], dtype=np.int64)
        owner = np.empty(space.n, dtype=np.int64)
        for j, (a, b) in enumerate(space.pairs):
            owner[a] = owner[b] = j
        bits = np.zeros((treated.shape[0], len(space.pairs)), dtype=np.int64)
        rows = np.arange(treated.shape[0])[:, None]
        bits[rows, owner[treated]] = (treated == hi[owner[treated]]).astype(np.int64)
        weights = 1 << np.arange(len(space.pairs) - 1, -1, -1, dtype=np.int64)
        return bits @ weights
    n, t = space.n, space.n_treated
    table = _comb_table(n, t)
    j = np.arange(t)
    terms = table[n - 1 - treated, (t - j)[None, :]]
    return math.comb(n, t) - 1 - terms.sum(axis=1)


def iter_index_batches(
    space: DesignSpace, start: int = 0, stop: int | None = None, batch_size: int = 65536
) -> Iterator[tuple[int, np.ndarray]]:
    """Yield ``(first_index, treated_matrix)`` batches covering ``[start, stop)``."""
    total = count_randomizations(space)
    stop = total if stop is None else min(int(stop), total)
    for lo in range(int(start), stop, batch_size):
        hi = min(lo + batch_size, stop)
        yield lo, treated_matrix(space, np.arange(lo, hi, dtype=np.int64))


def sample_assignment(space: DesignSpace, seed=None) -> AssignmentVector:
    """One uniform draw from the candidate set."""
    rng = as_generator(seed)
    if space.pairs is not None:
        choice = rng.integers(0, 2, size=len(space.pairs))
        treated = sorted(p[c] for p, c in zip(space.pairs, choice))
        return AssignmentVector(space.n, tuple(treated))
    picked = rng.choice(space.n, size=space.n_treated, replace=False)
    return AssignmentVector(space.n, tuple(sorted(int(i) for i in picked)))


def sample_treated(space: DesignSpace, size: int, seed=None) -> np.ndarray:
    """``size`` independent uniform draws as a treated-index matrix."""
    rng = as_generator(seed)
    if space.pairs is not None:
        pairs = np.asarray(space.pairs, dtype=np.int64)
        choice = rng.integers(0, 2, size=(size, len(space.pairs)))
        out = pairs[np.arange(len(space.pairs))[None, :], choice]
        out.sort(axis=1)
        return out
    keys = rng.random((size, space.n))
    out = np.argsort(keys, axis=1)[:, : space.n_treated]
    out.sort(axis=1)
    return out


def split_range(total: int, parts: int) -> list[tuple[int, int]]:
    """Partition ``[0, total)`` into at most ``parts`` contiguous slices."""
    parts = max(1, min(int(parts), max(total, 1)))
    bounds = [total * i // parts for i in range(parts + 1)]
    return [(a, b) for a, b in zip(bounds, bounds[1:]) if b > a]


__all__ = [
    "AssignmentVector",
    "DesignSpace",
    "assignment_complement",
    "count_randomizations",
    "enumerate_assignments",
    "iter_index_batches",
    "rank",
    "rank_matrix",
    "sample_assignment",
    "sample_treated",
    "split_range",
    "treated_matrix",
    "unrank",
]
