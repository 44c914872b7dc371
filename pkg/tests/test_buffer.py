import time

import numpy as np
import pytest
from scipy import stats

from basil.buffer import (LOSS_EPS, MemorySlot, ReplacementPolicy, ReplayBuffer,
                          ReplayStrategy)

D, K = 4, 3


def slot(y=0, l=1.0, u=0.5, fill=0.0):
    return MemorySlot(np.full(D, fill), y, np.zeros(K), l, u)


def filled(capacity, slots):
    buf = ReplayBuffer(capacity)
    rng = np.random.default_rng(0)
    for s in slots:
        buf.maybe_insert(s, ReplacementPolicy.RESERVOIR, rng)
    return buf


class TestMemorySlot:
    def test_coerces_types(self):
        s = MemorySlot([1, 2, 3, 4], np.int64(2), [0, 0, 0], 1, 0)
        assert s.z.dtype == np.float64
        assert isinstance(s.y, int) and isinstance(s.l, float)

    @pytest.mark.parametrize("l,u", [(-0.1, 0.5), (np.nan, 0.5),
                                     (1.0, -1e-9), (1.0, np.inf)])
    def test_rejects_bad_metadata(self, l, u):
        with pytest.raises(ValueError):
            slot(l=l, u=u)


class TestInsertBasics:
    def test_capacity_validation(self):
        with pytest.raises(ValueError):
            ReplayBuffer(0)

    def test_fills_before_evicting(self):
        buf = ReplayBuffer(3)
        rng = np.random.default_rng(0)
        for i in range(3):
            rep = buf.maybe_insert(slot(y=i), ReplacementPolicy.LAWCBR, rng)
            assert rep.inserted and rep.evicted_index is None
        assert len(buf) == 3 and buf.full
        assert buf.class_counts == {0: 1, 1: 1, 2: 1}

    def test_shape_mismatch(self):
        buf = filled(2, [slot()])
        bad = MemorySlot(np.zeros(D + 1), 0, np.zeros(K), 1.0, 0.5)
        with pytest.raises(ValueError):
            buf.maybe_insert(bad, ReplacementPolicy.LAWRRR, np.random.default_rng(0))

    def test_seen_count_tracks_offers(self):
        buf = ReplayBuffer(2)
        rng = np.random.default_rng(0)
        for _ in range(50):
            buf.maybe_insert(slot(), ReplacementPolicy.RESERVOIR, rng)
        assert buf.seen_count == 50
        assert len(buf) == 2


class TestCapacityInvariant:
    def test_random_op_sequences(self):
        # 1e4 mixed ops: len <= capacity and class_counts consistent throughout
        rng = np.random.default_rng(123)
        buf = ReplayBuffer(7)
        policies = list(ReplacementPolicy)
        for _ in range(10_000):
            op = rng.integers(3)
            if op == 0 or len(buf) == 0:
                buf.maybe_insert(slot(y=int(rng.integers(5)),
                                      l=float(rng.random() + 0.01),
                                      u=float(rng.random())),
                                 policies[rng.integers(3)], rng)
            elif op == 1:
                buf.sample_replay(list(ReplayStrategy)[rng.integers(3)],
                                  int(rng.integers(1, 9)), rng)
            else:
                buf.refresh_slot(int(rng.integers(len(buf))), np.zeros(K),
                                 float(rng.random()), float(rng.random()))
            assert len(buf) <= buf.capacity
            counts = {}
            for s in buf.slots:
                counts[s.y] = counts.get(s.y, 0) + 1
            assert counts == buf.class_counts


class TestLawcbr:
    def test_evicts_within_majority_class(self):
        buf = filled(4, [slot(y=0), slot(y=1), slot(y=1), slot(y=2)])
        rng = np.random.default_rng(0)
        for _ in range(20):
            rep = buf.maybe_insert(slot(y=2), ReplacementPolicy.LAWCBR, rng)
            assert rep.inserted
        # class 1 started as majority; evictions always hit the current majority
        assert max(buf.class_counts.values()) - min(buf.class_counts.values()) <= 1

    def test_majority_tie_lowest_class_id(self):
        buf = filled(4, [slot(y=3, fill=3), slot(y=1, fill=1),
                         slot(y=3, fill=3), slot(y=1, fill=1)])
        rep = buf.maybe_insert(slot(y=5), ReplacementPolicy.LAWCBR,
                               np.random.default_rng(0))
        assert buf.slots[rep.evicted_index].y == 5
        assert buf.class_counts[1] == 1  # tie between 1 and 3 resolved to class 1

    def test_inverse_loss_frequencies(self):
        # 4 same-class slots, losses 1, 1, 0.25, 0.5 -> weights prop. to 1/l
        losses = [1.0, 1.0, 0.25, 0.5]
        w = np.array([1.0 / (l + LOSS_EPS) for l in losses])
        expected = w / w.sum()
        rng = np.random.default_rng(7)
        counts = np.zeros(4)
        for _ in range(10_000):
            buf = filled(4, [slot(y=0, l=l) for l in losses])
            rep = buf.maybe_insert(slot(y=0, l=9.9), ReplacementPolicy.LAWCBR, rng)
            counts[rep.evicted_index] += 1
        res = stats.chisquare(counts, expected * counts.sum())
        assert res.pvalue > 0.01


class TestLawrrr:
    def test_always_inserts_when_full(self):
        buf = filled(3, [slot(y=0), slot(y=1), slot(y=2)])
        rng = np.random.default_rng(0)
        for i in range(30):
            rep = buf.maybe_insert(slot(y=i % 4), ReplacementPolicy.LAWRRR, rng)
            assert rep.inserted and rep.evicted_index is not None

    def test_class_count_over_loss_frequencies(self):
        # slots: (y=0,l=1), (y=0,l=0.25), (y=1,l=1), (y=2,l=0.5)
        spec = [(0, 1.0), (0, 0.25), (1, 1.0), (2, 0.5)]
        counts_by_class = {0: 2, 1: 1, 2: 1}
        w = np.array([counts_by_class[y] / (l + LOSS_EPS) for y, l in spec])
        expected = w / w.sum()
        rng = np.random.default_rng(11)
        counts = np.zeros(4)
        for _ in range(10_000):
            buf = filled(4, [slot(y=y, l=l) for y, l in spec])
            rep = buf.maybe_insert(slot(y=3, l=1.0), ReplacementPolicy.LAWRRR, rng)
            counts[rep.evicted_index] += 1
        res = stats.chisquare(counts, expected * counts.sum())
        assert res.pvalue > 0.01

    def test_two_slot_worked_example(self):
        # same class, losses 1.0 and 0.25 -> eviction probs 0.2 / 0.8
        rng = np.random.default_rng(3)
        counts = np.zeros(2)
        n = 20_000
        for _ in range(n):
            buf = filled(2, [slot(y=0, l=1.0), slot(y=0, l=0.25)])
            rep = buf.maybe_insert(slot(y=0, l=1.0), ReplacementPolicy.LAWRRR, rng)
            counts[rep.evicted_index] += 1
        assert counts[0] / n == pytest.approx(0.2, abs=0.015)


class TestReservoir:
    def test_acceptance_rate_converges(self):
        # long stream into capacity 50: final acceptance prob tracks cap/seen
        rng = np.random.default_rng(5)
        accepted = 0
        trials = 2_000
        for _ in range(trials):
            buf = filled(50, [slot() for _ in range(50)])
            buf.seen_count = 199
            rep = buf.maybe_insert(slot(), ReplacementPolicy.RESERVOIR, rng)
            accepted += rep.inserted
        assert accepted / trials == pytest.approx(50 / 200, abs=0.04)

    def test_uniform_inclusion(self):
        # every stream position equally likely to survive (reservoir property)
        rng = np.random.default_rng(9)
        hits = np.zeros(40)
        for _ in range(3_000):
            buf = ReplayBuffer(8)
            for t in range(40):
                buf.maybe_insert(slot(fill=t), ReplacementPolicy.RESERVOIR, rng)
            for s in buf.slots:
                hits[int(s.z[0])] += 1
        res = stats.chisquare(hits)
        assert res.pvalue > 0.01


class TestSampleReplay:
    def make(self, us):
        return filled(len(us), [slot(u=u, l=u) for u in us])

    def test_validates_n(self):
        with pytest.raises(ValueError):
            self.make([0.5]).sample_replay(ReplayStrategy.UNI, 0,
                                           np.random.default_rng(0))

    def test_empty_buffer(self):
        buf = ReplayBuffer(4)
        assert buf.sample_replay(ReplayStrategy.UAPN, 4,
                                 np.random.default_rng(0)) == []

    def test_returns_all_when_small(self):
        buf = self.make([0.3, 0.1])
        assert buf.sample_replay(ReplayStrategy.LAPN, 5,
                                 np.random.default_rng(0)) == [0, 1]

    def test_uapn_worked_example(self):
        # u = (0.9, 0.1, 0.5, 0.7), n=2 -> most uncertain 0, least uncertain 1
        buf = self.make([0.9, 0.1, 0.5, 0.7])
        idx = buf.sample_replay(ReplayStrategy.UAPN, 2, np.random.default_rng(0))
        assert sorted(idx) == [0, 1]

    def test_uapn_odd_n_extra_high(self):
        buf = self.make([0.9, 0.1, 0.5, 0.7, 0.2])
        idx = buf.sample_replay(ReplayStrategy.UAPN, 3, np.random.default_rng(0))
        assert sorted(idx) == [0, 1, 3]  # two highest (0.9, 0.7) + lowest (0.1)

    def test_lapn_uses_loss(self):
        buf = filled(4, [slot(l=0.9, u=0.0), slot(l=0.1, u=0.0),
                         slot(l=0.5, u=0.0), slot(l=0.7, u=0.0)])
        idx = buf.sample_replay(ReplayStrategy.LAPN, 2, np.random.default_rng(0))
        assert sorted(idx) == [0, 1]

    def test_tie_break_lower_index(self):
        buf = self.make([0.5, 0.5, 0.5, 0.5])
        idx = buf.sample_replay(ReplayStrategy.UAPN, 2, np.random.default_rng(0))
        assert idx == [0, 1]

    def test_deterministic_given_cache(self):
        buf = self.make([0.4, 0.8, 0.2, 0.6, 0.5])
        a = buf.sample_replay(ReplayStrategy.UAPN, 4, np.random.default_rng(1))
        b = buf.sample_replay(ReplayStrategy.UAPN, 4, np.random.default_rng(2))
        assert a == b  # rng must not be consulted for the ranked strategies

    def test_uni_without_replacement_and_uniform(self):
        buf = self.make([0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
        rng = np.random.default_rng(4)
        hits = np.zeros(6)
        for _ in range(6_000):
            idx = buf.sample_replay(ReplayStrategy.UNI, 3, rng)
            assert len(set(idx)) == 3
            for i in idx:
                hits[i] += 1
        assert stats.chisquare(hits).pvalue > 0.01


class TestSampleKd:
    def test_uniform_without_replacement(self):
        buf = filled(5, [slot() for _ in range(5)])
        rng = np.random.default_rng(8)
        hits = np.zeros(5)
        for _ in range(5_000):
            idx = buf.sample_kd(2, rng)
            assert len(set(idx)) == 2
            for i in idx:
                hits[i] += 1
        assert stats.chisquare(hits).pvalue > 0.01

    def test_small_buffer_returns_all(self):
        buf = filled(5, [slot(), slot()])
        assert buf.sample_kd(16, np.random.default_rng(0)) == [0, 1]


class TestRefresh:
    def test_updates_in_place(self):
        buf = filled(2, [slot(), slot()])
        buf.refresh_slot(1, np.ones(K), 2.5, 0.7)
        assert buf.slots[1].l == 2.5 and buf.slots[1].u == 0.7
        np.testing.assert_array_equal(buf.slots[1].h, np.ones(K))
        assert buf.slots[0].l == 1.0  # untouched

    def test_clamps_negative_to_zero(self):
        buf = filled(1, [slot()])
        buf.refresh_slot(0, np.zeros(K), -1e-12, -0.5)
        assert buf.slots[0].l == 0.0 and buf.slots[0].u == 0.0

    def test_rejects_bad_index_and_shape(self):
        buf = filled(1, [slot()])
        with pytest.raises(ValueError):
            buf.refresh_slot(1, np.zeros(K), 1.0, 1.0)
        with pytest.raises(ValueError):
            buf.refresh_slot(0, np.zeros(K + 1), 1.0, 1.0)
        with pytest.raises(ValueError):
            buf.refresh_slot(0, np.zeros(K), np.nan, 1.0)

    def test_million_refreshes_under_a_second(self):
        buf = filled(1000, [slot() for _ in range(1000)])
        h = np.zeros(K)
        refresh = buf.refresh_slot
        indices = list(range(1000)) * 1000
        start = time.perf_counter()
        for i in indices:
            refresh(i, h, 1.0, 0.5)
        assert time.perf_counter() - start < 1.0
