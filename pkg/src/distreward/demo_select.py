"""Building positive/negative demonstration sets from two on-policy batches.

Instance-level rewards split pairwise (or against a batch threshold). Set
rewards use a greedy swap pass: start from the better of the two batches and
walk the pairs once, keeping a swap only if it strictly improves the positive
set's reward. Each accepted swap can only raise that reward, so the final
positive set scores at least as well as both input batches.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import AllTied, InvalidInput, RewardEvaluationError
from .gauss_stats import RunningStats, as_embeddings, frechet_distance
from .rewards import ExemplarSet


@dataclass
class DemoBatch:
    """Generations with their conditions, seeds and derived embeddings.

    ``samples`` are the generation payloads (what the losses train on);
    ``embeddings`` and ``frames`` feed the rewards. ``source`` marks which
    model produced each item (0 = trained model, 1 = reference model).
    """

    conditions: np.ndarray
    seeds: np.ndarray
    samples: np.ndarray
    embeddings: np.ndarray | None = None
    frames: np.ndarray | None = None
    source: np.ndarray | None = None
    paired: bool = True

    def __post_init__(self):
        self.conditions = np.asarray(self.conditions, dtype=int).reshape(-1)
        self.seeds = np.asarray(self.seeds, dtype=np.uint64).reshape(-1)
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim == 1:
            self.samples = self.samples[:, None]
        n = self.conditions.size
        if self.seeds.size != n or self.samples.shape[0] != n:
            raise InvalidInput("conditions, seeds and samples must have equal length")
        if self.embeddings is not None:
            self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
            if self.embeddings.ndim == 1:
                self.embeddings = self.embeddings[:, None]
            if self.embeddings.shape[0] != n:
                raise InvalidInput("one embedding per item required")
        if self.frames is not None:
            self.frames = np.asarray(self.frames, dtype=np.float64)
            if self.frames.shape[0] != n:
                raise InvalidInput("one frame sequence per item required")
        if self.source is None:
            self.source = np.zeros(n, dtype=int)
        self.source = np.asarray(self.source, dtype=int).reshape(-1)

    def __len__(self):
        return self.conditions.size

    @classmethod
    def from_embeddings(cls, embeddings, conditions=None, seeds=None, paired=True) -> "DemoBatch":
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.ndim == 1:
            emb = emb[:, None]
        n = emb.shape[0]
        conditions = np.zeros(n, dtype=int) if conditions is None else conditions
        seeds = np.arange(n) if seeds is None else seeds
        return cls(conditions, seeds, emb, emb, paired=paired)

    def take(self, idx) -> "DemoBatch":
        idx = np.asarray(idx, dtype=int)
        return DemoBatch(
            self.conditions[idx], self.seeds[idx], self.samples[idx],
            None if self.embeddings is None else self.embeddings[idx],
            None if self.frames is None else self.frames[idx],
            self.source[idx], self.paired,
        )

    def where(self, mask, other: "DemoBatch") -> "DemoBatch":
        """Item i from ``other`` where ``mask[i]`` else from self."""
        mask = np.asarray(mask, dtype=bool)

        def pick(a, b):
            if a is None or b is None:
                return None
            m = mask.reshape((-1,) + (1,) * (a.ndim - 1))
            return np.where(m, b, a)

        return DemoBatch(
            pick(self.conditions, other.conditions), pick(self.seeds, other.seeds),
            pick(self.samples, other.samples), pick(self.embeddings, other.embeddings),
            pick(self.frames, other.frames), pick(self.source, other.source), self.paired,
        )

    def payload(self) -> np.ndarray:
        return self.samples if self.embeddings is None else self.embeddings


def check_paired(d1: DemoBatch, d2: DemoBatch) -> None:
    if len(d1) != len(d2):
        raise InvalidInput(f"paired batches differ in length: {len(d1)} vs {len(d2)}")
    if not np.array_equal(d1.conditions, d2.conditions):
        bad = int(np.argmax(d1.conditions != d2.conditions))
        raise InvalidInput(f"pair {bad} has mismatched conditions")


@dataclass
class SwapRecord:
    index: int
    reward_before: float
    reward_tentative: float
    accepted: bool

    def to_dict(self) -> dict:
        return {"index": self.index, "reward_before": self.reward_before,
                "reward_tentative": self.reward_tentative, "accepted": self.accepted}


@dataclass
class SplitResult:
    d_pos: DemoBatch
    d_neg: DemoBatch
    reward_pos: float
    reward_neg: float
    swap_trace: list = field(default_factory=list)
    pos_from_d1: np.ndarray | None = None
    reward_d1: float | None = None
    reward_d2: float | None = None

    def trace_dicts(self) -> list:
        return [r.to_dict() for r in self.swap_trace]


@dataclass
class UnpairedSplit:
    items: DemoBatch
    labels: np.ndarray  # True = positive
    threshold: float
    rewards: np.ndarray

    @property
    def d_pos(self) -> DemoBatch:
        return self.items.take(np.flatnonzero(self.labels))

    @property
    def d_neg(self) -> DemoBatch:
        return self.items.take(np.flatnonzero(~self.labels))


def split_pairwise(d1: DemoBatch, d2: DemoBatch, rewards1, rewards2) -> SplitResult:
    """Per pair, the higher-reward item is positive; ties keep d1's item positive."""
    check_paired(d1, d2)
    r1 = np.asarray(rewards1, dtype=np.float64).reshape(-1)
    r2 = np.asarray(rewards2, dtype=np.float64).reshape(-1)
    if r1.size != len(d1) or r2.size != len(d2):
        raise InvalidInput("one reward per item required")
    take2 = r2 > r1
    pos = d1.where(take2, d2)
    neg = d2.where(take2, d1)
    return SplitResult(pos, neg, float(np.mean(np.maximum(r1, r2))), float(np.mean(np.minimum(r1, r2))),
                       [], ~take2, float(np.mean(r1)), float(np.mean(r2)))


def split_by_batch_mean(items: DemoBatch, rewards, threshold: str = "mean") -> UnpairedSplit:
    """Label items above the batch mean (or median) reward as positive."""
    r = np.asarray(rewards, dtype=np.float64).reshape(-1)
    if r.size != len(items):
        raise InvalidInput("one reward per item required")
    if r.size < 2:
        raise InvalidInput("need at least 2 items")
    if np.all(r == r[0]):
        raise AllTied("all rewards in the batch are identical")
    if threshold == "mean":
        thr = float(np.mean(r))
    elif threshold == "median":
        thr = float(np.median(r))
    else:
        raise InvalidInput(f"threshold must be 'mean' or 'median', got {threshold!r}")
    return UnpairedSplit(replace(items, paired=False), r > thr, thr, r)


_SCREEN_TOL = 1e-9


class _RecomputeTracker:
    """Fallback tracker: re-evaluates the set reward from scratch on every tentative swap."""

    def __init__(self, rows, fn):
        self.rows = np.array(rows, dtype=np.float64, copy=True)
        self.fn = fn
        self.value = float(fn(self.rows))

    def try_replace(self, i, new_row):
        old = self.rows[i].copy()
        self.rows[i] = new_row
        try:
            return float(self.fn(self.rows))
        finally:
            self.rows[i] = old

    def commit(self, i, new_row, value):
        self.rows[i] = new_row
        self.value = value


def _tracker(r_dist, rows):
    if hasattr(r_dist, "tracker"):
        return r_dist.tracker(rows)
    return _RecomputeTracker(rows, r_dist)


def greedy_swap(d1: DemoBatch, d2: DemoBatch, r_dist, indices=None) -> SplitResult:
    """One greedy pass of pair swaps maximizing a set reward.

    ``r_dist`` maps an (n, dim) payload matrix (embeddings when present,
    samples otherwise) to a larger-is-better scalar. Objects exposing
    ``tracker(rows)`` get incremental evaluation. ``indices`` restricts which
    pairs may be swapped (all pairs by default, in order).
    """
    check_paired(d1, d2)
    n = len(d1)
    p1, p2 = d1.payload(), d2.payload()
    try:
        r1 = float(r_dist(p1))
        r2 = float(r_dist(p2))
    except Exception as exc:
        raise RewardEvaluationError(f"set reward failed on an input batch: {exc}", index=None) from exc

    if r1 > r2:
        pos_rows, neg_rows, from_d1 = p1, p2, np.ones(n, dtype=bool)
    else:
        pos_rows, neg_rows, from_d1 = p2, p1, np.zeros(n, dtype=bool)
    neg_rows = np.array(neg_rows, copy=True)
    tracker = _tracker(r_dist, pos_rows)

    order = range(n) if indices is None else [int(i) for i in indices]
    trace = []
    for i in order:
        if not 0 <= i < n:
            raise InvalidInput(f"swap index {i} out of range")
        before = tracker.value
        candidate = neg_rows[i].copy()
        try:
            tentative = float(tracker.try_replace(i, candidate))
            # Incremental values screen out clear rejections; anything close is decided
            # on an exact evaluation so the guarantee holds without rounding slack.
            if hasattr(tracker, "confirm") and tentative >= before - _SCREEN_TOL * (1.0 + abs(before)):
                tentative = float(tracker.confirm(i, candidate))
        except Exception as exc:
            raise RewardEvaluationError(f"set reward failed while swapping pair {i}: {exc}", index=i) from exc
        accepted = tentative > before
        trace.append(SwapRecord(i, before, tentative, accepted))
        if accepted:
            neg_rows[i] = tracker.rows[i]
            tracker.commit(i, candidate, tentative)
            from_d1[i] = not from_d1[i]

    pos = d2.where(from_d1, d1)
    neg = d1.where(from_d1, d2)
    try:
        reward_neg = float(r_dist(neg.payload()))
    except Exception as exc:
        raise RewardEvaluationError(f"set reward failed on the negative set: {exc}", index=None) from exc
    return SplitResult(pos, neg, float(tracker.value), reward_neg, trace, from_d1, r1, r2)


def _check_partition(shards, n):
    seen = np.zeros(n, dtype=int)
    for shard in shards:
        for i in shard:
            i = int(i)
            if not 0 <= i < n:
                raise InvalidInput(f"shard index {i} out of range [0, {n})")
            seen[i] += 1
    if np.any(seen != 1):
        bad = int(np.flatnonzero(seen != 1)[0])
        raise InvalidInput(f"shard assignments do not partition the pairs (index {bad} used {seen[bad]} times)")


def greedy_swap_sharded(d1: DemoBatch, d2: DemoBatch, r_dist, shard_assignments, workers: int = 1) -> list:
    """Run the greedy pass per shard: every shard sees all pairs but swaps only its own indices."""
    check_paired(d1, d2)
    shards = [list(s) for s in shard_assignments]
    _check_partition(shards, len(d1))
    if workers <= 1:
        return [greedy_swap(d1, d2, r_dist, s) for s in shards]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: greedy_swap(d1, d2, r_dist, s), shards))


def contiguous_shards(n: int, n_shards: int) -> list:
    """Index blocks as produced by splitting a batch evenly across devices."""
    return [list(block) for block in np.array_split(np.arange(n), n_shards)]


# --------------------------------------------------------------------------- exemplar pruning


def _fad_of(running: RunningStats, ref: ExemplarSet) -> float:
    return frechet_distance(running.stats(), ref.stats)


def prune_exemplars(candidates, ref: ExemplarSet, target_size: int) -> np.ndarray:
    """Choose ``target_size`` candidate rows whose dataset FAD to ``ref`` is small.

    Backward elimination (drop the row whose removal gives the lowest FAD)
    down to the target size, then one swap pass trading each kept row for its
    best removed replacement when that strictly lowers FAD. The pass starts
    from whichever of the elimination result and the first ``target_size``
    rows is better, so the result never loses to that baseline. Returns
    sorted row indices.
    """
    x = as_embeddings(candidates)
    n = x.shape[0]
    if x.shape[1] != ref.dim:
        raise InvalidInput(f"candidate dim {x.shape[1]} != reference dim {ref.dim}")
    if not 2 <= target_size <= n:
        raise InvalidInput(f"target_size must lie in [2, {n}], got {target_size}")

    keep = list(range(n))
    running = RunningStats(x)
    while len(keep) > target_size:
        best_fad, best_pos = np.inf, -1
        for pos, i in enumerate(keep):
            trial = running.copy()
            trial.remove(x[i])
            fad = _fad_of(trial, ref)
            if fad < best_fad:
                best_fad, best_pos = fad, pos
        running.remove(x[keep.pop(best_pos)])

    baseline = RunningStats(x[:target_size])
    if _fad_of(baseline, ref) < _fad_of(running, ref):
        keep, running = list(range(target_size)), baseline

    removed = [i for i in range(n) if i not in set(keep)]
    current = _fad_of(running, ref)
    for pos in range(len(keep)):
        best_fad, best_j = current, -1
        for jpos, j in enumerate(removed):
            trial = running.copy()
            trial.replace(x[keep[pos]], x[j])
            fad = _fad_of(trial, ref)
            if fad < best_fad:
                best_fad, best_j = fad, jpos
        if best_j >= 0:
            out = keep[pos]
            running.replace(x[out], x[removed[best_j]])
            keep[pos], removed[best_j] = removed[best_j], out
            current = best_fad
    return np.array(sorted(keep), dtype=int)
