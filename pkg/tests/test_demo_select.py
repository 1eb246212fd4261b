import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from distreward.demo_select import (
    DemoBatch, contiguous_shards, greedy_swap, greedy_swap_sharded, prune_exemplars, split_by_batch_mean,
    split_pairwise,
)
from distreward.errors import AllTied, InvalidInput, RewardEvaluationError
from distreward.gauss_stats import GaussStats, accumulate_stats, frechet_distance
from distreward.rewards import DatasetFAD, ExemplarSet
from oracles import best_subset_fad, fad_oracle, random_psd, sample_stats_oracle


def batch(values, conditions=None, seed0=0):
    v = np.asarray(values, dtype=float)
    v = v[:, None] if v.ndim == 1 else v
    n = v.shape[0]
    cond = np.zeros(n, dtype=int) if conditions is None else conditions
    return DemoBatch(cond, np.arange(seed0, seed0 + n), v, v)


def mean_reward(rows):
    return float(np.mean(rows[:, 0]))


def test_pairwise_example_and_ties():
    d1, d2 = batch([1.0, 0.0]), batch([0.0, 1.0], seed0=10)
    r = split_pairwise(d1, d2, [1, 0], [0, 1])
    assert list(r.d_pos.seeds) == [0, 11]
    assert list(r.d_neg.seeds) == [10, 1]
    tie = split_pairwise(d1, d2, [2, 2], [2, 2])
    assert list(tie.d_pos.seeds) == list(d1.seeds)


@given(st.integers(0, 10_000))
def test_pairwise_elementwise_max(seed):
    rng = np.random.default_rng(seed)
    r1, r2 = rng.standard_normal(16), rng.standard_normal(16)
    d1, d2 = batch(r1), batch(r2, seed0=100)
    res = split_pairwise(d1, d2, r1, r2)
    for i in range(16):
        want = d1.seeds[i] if r1[i] >= r2[i] else d2.seeds[i]
        assert res.d_pos.seeds[i] == want
    assert res.reward_pos == pytest.approx(np.mean(np.maximum(r1, r2)))


def test_pairwise_validation():
    with pytest.raises(InvalidInput):
        split_pairwise(batch([1.0, 2.0]), batch([1.0]), [1, 2], [1])
    with pytest.raises(InvalidInput):
        split_pairwise(batch([1.0]), batch([1.0]), [1, 2], [1])
    with pytest.raises(InvalidInput):
        split_pairwise(batch([1.0], [0]), batch([1.0], [1]), [1], [1])


def test_batch_mean_examples():
    s = split_by_batch_mean(batch([0.0, 2.0]), [0.0, 2.0])
    assert list(s.labels) == [False, True]
    s = split_by_batch_mean(batch([1.0, 1.0, 4.0]), [1.0, 1.0, 4.0])
    assert list(s.labels) == [False, False, True]
    s = split_by_batch_mean(batch([1.0, 2.0, 10.0]), [1.0, 2.0, 10.0], threshold="median")
    assert list(s.labels) == [False, False, True] and s.threshold == 2.0


def test_batch_mean_random_oracle():
    r = np.random.default_rng(4).standard_normal(100)
    s = split_by_batch_mean(batch(r), r)
    thr = sum(r) / len(r)
    assert [bool(v > thr) for v in r] == list(s.labels)
    assert len(s.d_pos) + len(s.d_neg) == 100


def test_batch_mean_degenerate():
    with pytest.raises(AllTied):
        split_by_batch_mean(batch([3.0, 3.0, 3.0]), [3.0, 3.0, 3.0])
    with pytest.raises(InvalidInput):
        split_by_batch_mean(batch([3.0]), [3.0])


def test_greedy_hand_example():
    d1, d2 = batch([3.0, 0.0]), batch([0.0, 3.0], seed0=10)
    res = greedy_swap(d1, d2, mean_reward)
    assert list(res.d_pos.payload()[:, 0]) == [3.0, 3.0]
    assert [t.index for t in res.swap_trace] == [0, 1]
    # Tie at initialization goes to D2; swapping pair 0 then brings in d1's 3.
    assert [t.accepted for t in res.swap_trace] == [True, False]
    assert res.reward_pos == 3.0 and res.reward_neg == 0.0


def test_greedy_already_optimal_has_no_swaps():
    d1, d2 = batch([5.0, 4.0, 6.0]), batch([1.0, 0.0, 2.0], seed0=10)
    res = greedy_swap(d1, d2, mean_reward)
    assert not any(t.accepted for t in res.swap_trace)
    assert list(res.d_pos.seeds) == list(d1.seeds)


def _replay_alg1(p1, p2, ref_mu, ref_cov):
    """Step replay of the greedy pass with independent FAD code."""
    def r(rows):
        mu, cov = sample_stats_oracle(rows)
        return -fad_oracle(mu, cov, ref_mu, ref_cov)

    r1, r2 = r(p1), r(p2)
    pos, neg = (p1.copy(), p2.copy()) if r1 > r2 else (p2.copy(), p1.copy())
    cur = r(pos)
    decisions = []
    for i in range(len(p1)):
        trial = pos.copy()
        trial[i] = neg[i]
        val = r(trial)
        ok = val > cur
        decisions.append(ok)
        if ok:
            neg[i], pos = pos[i].copy(), trial
            cur = val
    return cur, decisions, max(r1, r2)


@pytest.mark.parametrize("seed", range(5))
def test_greedy_fad_matches_step_replay(seed):
    rng = np.random.default_rng(seed)
    p1, p2 = rng.standard_normal((8, 3)), rng.standard_normal((8, 3))
    mu, cov = rng.standard_normal(3) * 0.3, random_psd(rng, 3)
    res = greedy_swap(batch(p1), batch(p2, seed0=100), DatasetFAD(ExemplarSet(GaussStats(mu, cov, 100))))
    want, decisions, floor = _replay_alg1(p1, p2, mu, cov)
    assert [t.accepted for t in res.swap_trace] == decisions
    assert res.reward_pos == pytest.approx(want, abs=1e-8)
    assert res.reward_pos >= floor - 1e-12


@given(st.integers(0, 100_000), st.integers(1, 8))
def test_greedy_monotone_and_conserving(seed, n):
    rng = np.random.default_rng(seed)
    p1, p2 = rng.standard_normal((n, 2)), rng.standard_normal((n, 2))
    ref = ExemplarSet(accumulate_stats(rng.standard_normal((30, 2)) + 0.5))
    fn = DatasetFAD(ref) if n >= 2 else mean_reward
    d1, d2 = batch(p1), batch(p2, seed0=100)
    res = greedy_swap(d1, d2, fn)
    vals = [res.swap_trace[0].reward_before] + [t.reward_tentative if t.accepted else t.reward_before
                                                 for t in res.swap_trace]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert res.reward_pos >= max(res.reward_d1, res.reward_d2)
    for i in range(n):
        assert {int(res.d_pos.seeds[i]), int(res.d_neg.seeds[i])} == {int(d1.seeds[i]), int(d2.seeds[i])}


@given(st.integers(0, 100_000), st.integers(1, 8))
def test_greedy_equals_pairwise_for_additive(seed, n):
    rng = np.random.default_rng(seed)
    r1, r2 = rng.standard_normal(n), rng.standard_normal(n)
    d1, d2 = batch(r1), batch(r2, seed0=100)
    g = greedy_swap(d1, d2, mean_reward)
    p = split_pairwise(d1, d2, r1, r2)
    assert np.array_equal(g.d_pos.payload(), p.d_pos.payload())
    # Enumeration: greedy reaches the best of all 2^n paired selections.
    best = max(np.mean([(r1, r2)[b][i] for i, b in enumerate(bits)]) for bits in itertools.product((0, 1), repeat=n))
    assert g.reward_pos == pytest.approx(best)


def test_greedy_is_deterministic():
    rng = np.random.default_rng(9)
    d1, d2 = batch(rng.standard_normal((6, 2))), batch(rng.standard_normal((6, 2)), seed0=100)
    fn = DatasetFAD(ExemplarSet(accumulate_stats(rng.standard_normal((20, 2)))))
    assert greedy_swap(d1, d2, fn).trace_dicts() == greedy_swap(d1, d2, fn).trace_dicts()


def test_greedy_propagates_failing_index():
    calls = []

    def flaky(rows):
        calls.append(1)
        if len(calls) > 4:  # r(D1), r(D2), tracker init, swap 0
            raise FloatingPointError("boom")
        return float(rows.sum())

    with pytest.raises(RewardEvaluationError) as exc:
        greedy_swap(batch([1.0, 2.0, 3.0]), batch([0.0, 0.0, 0.0], seed0=5), flaky)
    assert exc.value.index == 1


def test_sharded_single_shard_matches_unsharded():
    rng = np.random.default_rng(5)
    d1, d2 = batch(rng.standard_normal((6, 2))), batch(rng.standard_normal((6, 2)), seed0=100)
    fn = DatasetFAD(ExemplarSet(accumulate_stats(rng.standard_normal((20, 2)))))
    (one,) = greedy_swap_sharded(d1, d2, fn, [range(6)])
    full = greedy_swap(d1, d2, fn)
    assert one.trace_dicts() == full.trace_dicts()


def test_sharded_additive_union_equals_unsharded():
    rng = np.random.default_rng(6)
    r1, r2 = rng.standard_normal(6), rng.standard_normal(6)
    d1, d2 = batch(r1), batch(r2, seed0=100)
    shards = contiguous_shards(6, 2)
    res = greedy_swap_sharded(d1, d2, mean_reward, shards, workers=2)
    union = {t.index for r in res for t in r.swap_trace if t.accepted}
    full = {t.index for t in greedy_swap(d1, d2, mean_reward).swap_trace if t.accepted}
    assert union == full


def test_sharded_partition_validation():
    d = batch([1.0, 2.0, 3.0])
    with pytest.raises(InvalidInput):
        greedy_swap_sharded(d, d, mean_reward, [[0, 1], [1, 2]])
    with pytest.raises(InvalidInput):
        greedy_swap_sharded(d, d, mean_reward, [[0], [2]])


def test_prune_identity_at_full_size():
    x = np.random.default_rng(7).standard_normal((10, 2))
    ref = ExemplarSet(accumulate_stats(x))
    assert list(prune_exemplars(x, ref, 10)) == list(range(10))


def test_prune_removes_outlier():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((15, 2))
    ref = ExemplarSet(accumulate_stats(rng.standard_normal((500, 2))))
    cand = np.vstack([x[:7], [[25.0, -25.0]], x[7:]])
    keep = prune_exemplars(cand, ref, 15)
    assert 7 not in keep and len(keep) == 15


@pytest.mark.parametrize("seed", range(3))
def test_prune_near_brute_force(seed):
    rng = np.random.default_rng(seed)
    cand = rng.standard_normal((12, 2)) * rng.uniform(0.5, 2.0, (12, 1))
    ref_mu, ref_cov = np.array([0.2, -0.1]), np.eye(2) * 0.8
    ref = ExemplarSet(GaussStats(ref_mu, ref_cov, 100))
    keep = prune_exemplars(cand, ref, 8)
    got = frechet_distance(accumulate_stats(cand[keep]), ref.stats)
    best, _ = best_subset_fad(cand, ref_mu, ref_cov, 8)
    first = frechet_distance(accumulate_stats(cand[:8]), ref.stats)
    assert got <= best * 1.25 + 1e-12
    assert got <= first + 1e-12


def test_prune_validation():
    x = np.zeros((4, 2))
    ref = ExemplarSet(GaussStats(np.zeros(2), np.eye(2), 10))
    for size in (1, 5):
        with pytest.raises(InvalidInput):
            prune_exemplars(x, ref, size)
