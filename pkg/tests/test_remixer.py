import itertools
from collections import Counter

import numpy as np
import pytest
from scipy import stats

from re2re.diffcore import ShapeError
from re2re.remixer import (Permutation, PermutationPair, apply, bootstrap, bootstrap_pair,
                           sample_discordant, sample_pair, sample_permutation)
from re2re.signal import SignalBatch


class TestPermutation:
    def test_rejects_non_bijection(self):
        with pytest.raises(ValueError):
            Permutation((0, 0, 1))

    def test_matrix_matches_apply(self):
        p = Permutation((2, 0, 1))
        a = np.arange(12.0).reshape(3, 4)
        assert np.array_equal(p.matrix() @ a, apply(p, a))

    def test_pair_rejects_shared_row(self):
        with pytest.raises(ValueError):
            PermutationPair(Permutation((0, 1, 2)), Permutation((0, 2, 1)))


class TestSamplePermutation:
    def test_single_is_identity(self):
        assert sample_permutation(1, np.random.default_rng(0)).map == (0,)

    def test_invalid_size(self):
        with pytest.raises(ValueError):
            sample_permutation(0, np.random.default_rng(0))

    def test_bijection(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            assert sorted(sample_permutation(7, rng).map) == list(range(7))

    def test_uniform_chi_square(self):
        rng = np.random.default_rng(2)
        counts = Counter(sample_permutation(3, rng).map for _ in range(60000))
        observed = [counts[p] for p in itertools.permutations(range(3))]
        assert sum(observed) == 60000
        assert stats.chisquare(observed).pvalue > 0.001
        sigma = np.sqrt(60000 * (1 / 6) * (5 / 6))
        assert all(abs(o - 10000) < 3 * sigma for o in observed)


class TestSampleDiscordant:
    def test_two_is_swap(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            assert sample_discordant(Permutation.identity(2), rng).map == (1, 0)

    def test_too_small(self):
        with pytest.raises(ValueError):
            sample_discordant(Permutation.identity(1), np.random.default_rng(0))

    def test_three_derangements_balanced(self):
        rng = np.random.default_rng(3)
        counts = Counter(sample_discordant(Permutation.identity(3), rng).map for _ in range(10000))
        assert set(counts) == {(1, 2, 0), (2, 0, 1)}
        for c in counts.values():
            assert abs(c / 10000 - 0.5) <= 0.02

    def test_never_agrees(self):
        rng = np.random.default_rng(4)
        for _ in range(500):
            p = sample_permutation(8, rng)
            q = sample_discordant(p, rng)
            assert all(a != b for a, b in zip(p.map, q.map))

    def test_relative_to_nonidentity(self):
        # uniform over the derangements of p: q o p^-1 is a uniform derangement
        rng = np.random.default_rng(5)
        p = Permutation((2, 0, 1))
        counts = Counter(sample_discordant(p, rng).map for _ in range(4000))
        assert len(counts) == 2
        assert min(counts.values()) > 1800


class TestSamplePair:
    def test_streams_independent(self):
        # P's sequence does not depend on whether Q is drawn
        a = [sample_pair(6, np.random.default_rng(1), np.random.default_rng(2)).p.map]
        b = [sample_permutation(6, np.random.default_rng(1)).map]
        assert a == b

    def test_independent_strategy_may_agree(self):
        rng_p, rng_q = np.random.default_rng(1), np.random.default_rng(2)
        shared = 0
        for _ in range(300):
            pair = sample_pair(6, rng_p, rng_q, "independent")
            shared += any(x == y for x, y in zip(pair.p.map, pair.q.map))
        # 1 - 1/e of pairs share a row under independent sampling
        assert 0.5 < shared / 300 < 0.75

    def test_unknown_strategy(self):
        with pytest.raises(ValueError):
            sample_pair(4, np.random.default_rng(0), np.random.default_rng(1), "orthogonal")


class TestApply:
    def test_identity(self):
        b = SignalBatch(np.arange(6.0).reshape(3, 2), "noise")
        out = apply(Permutation.identity(3), b)
        assert np.array_equal(out.data, b.data) and out.role == "noise"

    def test_swap(self):
        out = apply(Permutation((1, 0)), np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert np.array_equal(out, [[3, 4], [1, 2]])

    def test_column_sum_invariant(self):
        rng = np.random.default_rng(6)
        a = rng.integers(-100, 100, (5, 9)).astype(float)
        for _ in range(20):
            out = apply(sample_permutation(5, rng), a)
            assert np.array_equal(out.sum(0), a.sum(0))
            assert sorted(map(tuple, out)) == sorted(map(tuple, a))

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            apply(Permutation.identity(2), np.zeros((3, 4)))


class TestBootstrap:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.s = SignalBatch(rng.integers(-50, 50, (4, 6)) / 8, "teacher_speech")
        self.n = SignalBatch(rng.integers(-50, 50, (4, 6)) / 8, "teacher_noise")

    def test_identity_reconstructs(self):
        x = self.s.data + self.n.data
        assert np.array_equal(bootstrap(self.s, self.n, Permutation.identity(4)).data, x)

    def test_zero_speech(self):
        zero = SignalBatch(np.zeros((4, 6)), "teacher_speech")
        p = Permutation((3, 1, 0, 2))
        assert np.array_equal(bootstrap(zero, self.n, p).data, apply(p, self.n).data)

    def test_batch_sum(self):
        p = Permutation((3, 2, 0, 1))
        out = bootstrap(self.s, self.n, p)
        np.testing.assert_allclose(out.data.sum(0), self.s.data.sum(0) + self.n.data.sum(0),
                                   atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            bootstrap(self.s, SignalBatch(np.zeros((4, 5))), Permutation.identity(4))


class TestBootstrapPair:
    def test_two_row_enumeration(self):
        s = SignalBatch([[1.0, 0.0], [0.0, 1.0]])
        u, v = np.array([0.5, 0.25]), np.array([-1.0, 2.0])
        n = SignalBatch(np.stack([u, v]))
        pair = PermutationPair(Permutation.identity(2), Permutation((1, 0)))
        xt, xb = bootstrap_pair(s, n, pair)
        assert np.array_equal(xt.data, [s.data[0] + u, s.data[1] + v])
        assert np.array_equal(xb.data, [s.data[0] + v, s.data[1] + u])

    def test_rowwise_difference(self):
        rng = np.random.default_rng(8)
        s = SignalBatch(rng.standard_normal((6, 5)))
        n = SignalBatch(rng.standard_normal((6, 5)))
        pair = sample_pair(6, rng, np.random.default_rng(9))
        xt, xb = bootstrap_pair(s, n, pair)
        expected = n.data[pair.p.index] - n.data[pair.q.index]
        np.testing.assert_allclose(xt.data - xb.data, expected, atol=1e-12)
        assert np.all(np.abs(expected).sum(1) > 0)

    def test_linearity(self):
        rng = np.random.default_rng(10)
        s = SignalBatch(rng.standard_normal((5, 4)))
        n = SignalBatch(rng.standard_normal((5, 4)))
        xt, xb = bootstrap_pair(s, n, sample_pair(5, rng, rng))
        np.testing.assert_allclose((xt.data + xb.data - 2 * s.data).sum(0),
                                   2 * n.data.sum(0), atol=1e-12)

    def test_batch_too_small(self):
        with pytest.raises(ValueError):
            one = SignalBatch([[1.0, 2.0]])
            bootstrap_pair(one, one, PermutationPair(Permutation.identity(1),
                                                     Permutation.identity(1), "independent"))

    def test_monte_carlo_mean(self):
        # averaging x-bar over many draws of Q approaches s~_b + mean of the noise rows
        rng = np.random.default_rng(11)
        b, t, draws = 4, 3, 10000
        s = SignalBatch(rng.standard_normal((b, t)))
        n = SignalBatch(rng.standard_normal((b, t)))
        rng_p, rng_q = np.random.default_rng(12), np.random.default_rng(13)
        acc = np.zeros((draws, b, t))
        for i in range(draws):
            acc[i] = bootstrap_pair(s, n, sample_pair(b, rng_p, rng_q))[1].data
        target = s.data + n.data.mean(0)
        sigma = n.data.std(0) / np.sqrt(draws)
        assert np.all(np.abs(acc.mean(0) - target) <= 3 * sigma + 1e-12)
