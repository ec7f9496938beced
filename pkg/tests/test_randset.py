import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from rerand.errors import DomainError
from rerand.randset import (
    AssignmentVector,
    DesignSpace,
    assignment_complement,
    candidate_indicator,
    count_randomizations,
    enumerate_assignments,
    rank,
    rank_matrix,
    sample_assignment,
    sample_treated,
    split_range,
    treated_matrix,
    unrank,
)


class TestCounting:
    @pytest.mark.parametrize(
        "space, expected",
        [
            (DesignSpace.complete(8, 4), 70),
            (DesignSpace.complete(20, 10), 184756),
            (DesignSpace.consecutive_pairs(4), 16),
            (DesignSpace.complete(2, 1), 2),
            (DesignSpace.complete(10, 5), 252),
        ],
    )
    def test_known_counts(self, space, expected):
        assert count_randomizations(space) == expected

    def test_no_overflow_above_64_bits(self):
        space = DesignSpace.complete(100, 50)
        assert count_randomizations(space) == math.comb(100, 50)
        assert count_randomizations(space) > 2**64

    @pytest.mark.parametrize("n, t", [(5, 0), (5, 5), (3, 4), (1, 1)])
    def test_invalid_space(self, n, t):
        with pytest.raises(DomainError):
            DesignSpace.complete(n, t)

    def test_pairs_must_partition(self):
        with pytest.raises(DomainError):
            DesignSpace.paired([(0, 1), (1, 2)])
        with pytest.raises(DomainError):
            DesignSpace(n=5, n_treated=2, pairs=((0, 1), (2, 3)))


class TestAssignmentVector:
    def test_bits_roundtrip(self):
        w = AssignmentVector.from_bits("1100")
        assert w.treated == (0, 1)
        assert str(w) == "1100"
        assert w.n_treated == 2

    @pytest.mark.parametrize("bits", ["0000", "1111", "1"])
    def test_groups_nonempty(self, bits):
        with pytest.raises(DomainError):
            AssignmentVector.from_bits(bits)

    def test_complement(self):
        w = AssignmentVector.from_bits("1100")
        assert str(assignment_complement(w)) == "0011"
        assert assignment_complement(assignment_complement(w)) == w

    def test_complement_is_bijection_on_84(self, space84):
        all_w = list(enumerate_assignments(space84))
        images = {assignment_complement(w) for w in all_w}
        assert images == set(all_w)


class TestEnumeration:
    def test_singletons_in_order(self):
        got = [str(w) for w in enumerate_assignments(DesignSpace.complete(3, 1))]
        assert got == ["100", "010", "001"]

    def test_4_choose_2(self):
        got = [str(w) for w in enumerate_assignments(DesignSpace.complete(4, 2))]
        assert len(got) == 6 and got[0] == "1100" and got[-1] == "0011"
        assert got == ["1100", "1010", "1001", "0110", "0101", "0011"]

    @pytest.mark.parametrize("n", range(2, 13))
    def test_length_and_uniqueness_complete(self, n):
        for t in range(1, n):
            space = DesignSpace.complete(n, t)
            seen = {w.treated for w in enumerate_assignments(space)}
            assert len(seen) == count_randomizations(space)

    def test_matches_itertools_order(self):
        space = DesignSpace.complete(9, 4)
        ours = [w.treated for w in enumerate_assignments(space)]
        assert ours == list(itertools.combinations(range(9), 4))

    @pytest.mark.parametrize("k", range(1, 7))
    def test_paired_one_per_pair(self, k):
        space = DesignSpace.consecutive_pairs(k)
        got = list(enumerate_assignments(space))
        assert len({w.treated for w in got}) == 2**k
        for w in got:
            bits = w.bits
            assert all(bits[2 * j] + bits[2 * j + 1] == 1 for j in range(k))

    def test_paired_order_is_lexicographic(self):
        space = DesignSpace.paired([(0, 5), (1, 3), (2, 4)])
        got = [w.treated for w in enumerate_assignments(space)]
        assert got == sorted(got)

    def test_restart_and_skip(self, space84):
        full = list(enumerate_assignments(space84))
        assert list(enumerate_assignments(space84, start=30)) == full[30:]
        assert list(enumerate_assignments(space84, start=10, stop=15)) == full[10:15]

    def test_partitioned_ranges_cover_stream(self, space84):
        full = list(enumerate_assignments(space84))
        parts = split_range(70, 3)
        joined = [w for lo, hi in parts for w in enumerate_assignments(space84, lo, hi)]
        assert joined == full


class TestRanking:
    @pytest.mark.parametrize("space", [DesignSpace.complete(8, 3), DesignSpace.consecutive_pairs(4)])
    def test_rank_unrank_roundtrip(self, space):
        for i, w in enumerate(enumerate_assignments(space)):
            assert rank(space, w) == i
            assert unrank(space, i) == w

    @pytest.mark.parametrize("space", [DesignSpace.complete(11, 5), DesignSpace.paired([(0, 3), (1, 2), (4, 5)])])
    def test_vectorized_matches_scalar(self, space):
        total = count_randomizations(space)
        idx = np.arange(total)
        mat = treated_matrix(space, idx)
        assert [tuple(r) for r in mat] == [unrank(space, i).treated for i in range(total)]
        assert np.array_equal(rank_matrix(space, mat), idx)

    def test_huge_space_falls_back(self):
        space = DesignSpace.complete(70, 35)
        big = count_randomizations(space) - 1
        assert unrank(space, big).treated == tuple(range(35, 70))
        assert rank(space, unrank(space, big)) == big

    def test_indicator_rows(self, space84):
        ind = candidate_indicator(space84)
        assert ind.shape == (70, 8) and np.all(ind.sum(axis=1) == 4)
        assert not ind.flags.writeable

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 30).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n - 1))), st.data())
    def test_rank_unrank_property(self, nt, data):
        n, t = nt
        space = DesignSpace.complete(n, t)
        i = data.draw(st.integers(0, count_randomizations(space) - 1))
        assert rank(space, unrank(space, i)) == i


class TestSampling:
    def test_two_outcomes_balanced(self):
        space = DesignSpace.complete(2, 1)
        draws = sample_treated(space, 100_000, seed=3)
        freq = np.mean(draws[:, 0] == 0)
        assert abs(freq - 0.5) < 0.01

    def test_uniform_gof_84(self, space84):
        draws = sample_treated(space84, 700_000, seed=11)
        counts = np.bincount(rank_matrix(space84, draws), minlength=70)
        assert stats.chisquare(counts).pvalue > 0.01

    def test_single_draw_gof_paired(self):
        space = DesignSpace.consecutive_pairs(3)
        rng = np.random.default_rng(5)
        counts = np.zeros(8, dtype=int)
        for _ in range(8 * 1000):
            counts[rank(space, sample_assignment(space, rng))] += 1
        assert stats.chisquare(counts).pvalue > 0.01

    def test_same_seed_same_draw(self):
        space = DesignSpace.complete(12, 6)
        assert sample_assignment(space, 42) == sample_assignment(space, 42)
        assert np.array_equal(sample_treated(space, 10, 42), sample_treated(space, 10, 42))
