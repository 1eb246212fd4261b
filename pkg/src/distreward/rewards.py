"""Reward functions from instance-wise scores up to distribution-to-distribution distances.

Every ``RewardSpec`` reports rewards oriented so that larger is better;
metrics that are naturally minimized (FAD) are negated at that boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diversity import vendi_score
from .errors import InvalidInput
from .gauss_stats import GaussStats, RunningStats, accumulate_stats, as_embeddings, frechet_distance
from .toy_diffusion import derive_seed

INSTANCE = "instance"
INSTANCE_TO_INSTANCE = "instance-to-instance"
INSTANCE_TO_DIST = "instance-to-distribution"
DIST_TO_DIST = "dist-to-dist"
KINDS = (INSTANCE, INSTANCE_TO_INSTANCE, INSTANCE_TO_DIST, DIST_TO_DIST)


@dataclass(frozen=True)
class ExemplarSet:
    """Reference statistics defining a target distribution.

    ``modality_tag`` is descriptive only (e.g. "audio-like", "text-like").
    """

    stats: GaussStats
    modality_tag: str = "audio-like"

    @classmethod
    def from_embeddings(cls, embeddings, modality_tag="audio-like") -> "ExemplarSet":
        return cls(accumulate_stats(embeddings), modality_tag)

    @property
    def dim(self) -> int:
        return self.stats.dim


@dataclass(frozen=True)
class PreferenceModel:
    """Nadaraya-Watson regression over stored (embedding, normalized score) pairs."""

    train_embeddings: np.ndarray
    train_labels: np.ndarray
    bandwidth: float

    def __post_init__(self):
        x = as_embeddings(self.train_embeddings)
        y = np.asarray(self.train_labels, dtype=np.float64).reshape(-1)
        if y.size != x.shape[0]:
            raise InvalidInput("one label per training embedding required")
        if not self.bandwidth > 0:
            raise InvalidInput("bandwidth must be positive")
        object.__setattr__(self, "train_embeddings", x)
        object.__setattr__(self, "train_labels", y)

    @classmethod
    def fit(cls, embeddings, labels, bandwidth: float | None = None) -> "PreferenceModel":
        x = as_embeddings(embeddings)
        if bandwidth is None:
            bandwidth = median_heuristic(x)
        return cls(x, labels, float(bandwidth))

    @property
    def dim(self) -> int:
        return self.train_embeddings.shape[1]

    def predict(self, queries) -> np.ndarray:
        q = as_embeddings(queries)
        if q.shape[1] != self.dim:
            raise InvalidInput(f"query dim {q.shape[1]} != training dim {self.dim}")
        x = self.train_embeddings
        d2 = np.sum(q * q, axis=1)[:, None] - 2.0 * q @ x.T + np.sum(x * x, axis=1)[None, :]
        w = np.exp(-np.maximum(d2, 0.0) / (2.0 * self.bandwidth ** 2))
        total = w.sum(axis=1)
        out = np.empty(q.shape[0])
        ok = total > 0
        out[ok] = (w[ok] @ self.train_labels) / total[ok]
        # Every kernel weight underflowed: no local information, use the label mean.
        out[~ok] = self.train_labels.mean()
        return out


def median_heuristic(x) -> float:
    x = as_embeddings(x)
    diff = x[:, None, :] - x[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=-1))[np.triu_indices(x.shape[0], 1)]
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def preference_predict(model: PreferenceModel, query) -> float:
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    return float(model.predict(q[None, :])[0])


def cosine_reward(gen, ref) -> float:
    """Cosine similarity clipped at zero."""
    g = np.asarray(gen, dtype=np.float64).reshape(-1)
    r = np.asarray(ref, dtype=np.float64).reshape(-1)
    if g.size != r.size:
        raise InvalidInput(f"dim mismatch: {g.size} vs {r.size}")
    ng, nr = np.linalg.norm(g), np.linalg.norm(r)
    if ng < 1e-12 or nr < 1e-12:
        raise InvalidInput("cosine reward needs nonzero vectors")
    return float(min(1.0, max(0.0, g @ r / (ng * nr))))


def per_item_fad(frames, ref: ExemplarSet) -> float:
    """FAD between one item's frame-embedding distribution and the reference statistics."""
    f = as_embeddings(frames)
    if f.shape[1] != ref.dim:
        raise InvalidInput(f"frame dim {f.shape[1]} != reference dim {ref.dim}")
    return frechet_distance(accumulate_stats(f), ref.stats)


def dataset_fad_reward(batch_embeddings, ref: ExemplarSet) -> float:
    """Negated FAD of a whole batch to the reference."""
    x = as_embeddings(batch_embeddings)
    if x.shape[0] < 2:
        raise InvalidInput("dataset FAD needs at least 2 rows")
    if x.shape[1] != ref.dim:
        raise InvalidInput(f"batch dim {x.shape[1]} != reference dim {ref.dim}")
    return -frechet_distance(accumulate_stats(x), ref.stats)


def vendi_reward(batch_embeddings) -> float:
    return vendi_score(batch_embeddings)


class FADTracker:
    """Negated dataset FAD of a set that changes one row at a time.

    ``try_replace`` scores a tentative row replacement without committing it
    from cached sufficient statistics (two rank-one updates plus the matrix
    square roots). ``confirm`` re-evaluates the same replacement from the
    rows, giving exactly the value ``dataset_fad_reward`` would return.
    """

    def __init__(self, embeddings, ref: ExemplarSet):
        self.rows = as_embeddings(embeddings).copy()
        self.ref = ref
        self.running = RunningStats(self.rows)
        self.value = dataset_fad_reward(self.rows, ref)

    def try_replace(self, i: int, new_row) -> float:
        tmp = self.running.copy()
        tmp.replace(self.rows[i], new_row)
        return -frechet_distance(tmp.stats(), self.ref.stats)

    def confirm(self, i: int, new_row) -> float:
        rows = self.rows.copy()
        rows[i] = new_row
        return dataset_fad_reward(rows, self.ref)

    def commit(self, i: int, new_row, value: float) -> None:
        self.running.replace(self.rows[i], new_row)
        self.rows[i] = new_row
        self.value = value


class DatasetFAD:
    """Set reward: negated dataset FAD to an exemplar set (callable on an embedding matrix)."""

    def __init__(self, ref: ExemplarSet):
        self.ref = ref

    def __call__(self, embeddings) -> float:
        return dataset_fad_reward(embeddings, self.ref)

    def tracker(self, embeddings) -> FADTracker:
        return FADTracker(embeddings, self.ref)


@dataclass(frozen=True)
class RewardSpec:
    """A reward: its kind, the underlying metric, natural direction, and payload.

    metric payloads:
      preference      PreferenceModel
      cosine          (conditions, dim) array of per-condition reference embeddings
      per_item_fad    ExemplarSet
      dataset_fad     ExemplarSet
      vendi           None
      mean_instance   None (set reward = mean of supplied instance values; used in tests)
    """

    kind: str
    metric: str
    direction: str = "maximize"
    payload: object = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInput(f"unknown reward kind {self.kind!r}")
        if self.direction not in ("maximize", "minimize"):
            raise InvalidInput("direction must be 'maximize' or 'minimize'")

    @classmethod
    def preference(cls, model: PreferenceModel) -> "RewardSpec":
        return cls(INSTANCE, "preference", "maximize", model)

    @classmethod
    def cosine(cls, references) -> "RewardSpec":
        return cls(INSTANCE_TO_INSTANCE, "cosine", "maximize", np.atleast_2d(np.asarray(references, dtype=np.float64)))

    @classmethod
    def per_item_fad(cls, ref: ExemplarSet) -> "RewardSpec":
        return cls(INSTANCE_TO_DIST, "per_item_fad", "minimize", ref)

    @classmethod
    def dataset_fad(cls, ref: ExemplarSet) -> "RewardSpec":
        return cls(DIST_TO_DIST, "dataset_fad", "minimize", ref)

    @classmethod
    def vendi(cls) -> "RewardSpec":
        return cls(DIST_TO_DIST, "vendi", "maximize", None)

    @property
    def is_distributional(self) -> bool:
        return self.kind == DIST_TO_DIST

    @property
    def sign(self) -> float:
        return -1.0 if self.direction == "minimize" else 1.0

    def raw_instance(self, embeddings, frames=None, conditions=None) -> np.ndarray:
        """Per-item metric values in the metric's natural direction."""
        if self.metric == "preference":
            return self.payload.predict(embeddings)
        if self.metric == "cosine":
            refs = self.payload
            conditions = np.zeros(len(embeddings), dtype=int) if conditions is None else np.asarray(conditions)
            return np.array([cosine_reward(e, refs[c % len(refs)]) for e, c in zip(embeddings, conditions)])
        if self.metric == "per_item_fad":
            if frames is None:
                raise InvalidInput("per-item FAD needs frame embeddings")
            return np.array([per_item_fad(f, self.payload) for f in frames])
        raise InvalidInput(f"metric {self.metric!r} is not an instance reward")

    def instance_rewards(self, embeddings, frames=None, conditions=None) -> np.ndarray:
        """Per-item rewards, larger is better."""
        return self.sign * self.raw_instance(embeddings, frames, conditions)

    def set_function(self):
        """Callable mapping an embedding matrix to a larger-is-better set reward."""
        if self.metric == "dataset_fad":
            return DatasetFAD(self.payload)
        if self.metric == "vendi":
            return vendi_reward
        if self.metric == "mean_instance":
            return lambda x: float(np.mean(np.asarray(x, dtype=np.float64)))
        if self.kind != DIST_TO_DIST:
            def mean_reward(embeddings, frames=None, conditions=None):
                return float(np.mean(self.instance_rewards(embeddings, frames, conditions)))
            return mean_reward
        raise InvalidInput(f"metric {self.metric!r} has no set reward")

    def set_reward(self, embeddings) -> float:
        return float(self.set_function()(embeddings))


@dataclass(frozen=True)
class MixedReward:
    """Alternates between two rewards: iteration i uses ``a`` with probability ``p``.

    The choice for each iteration is a deterministic function of (seed, iteration).
    """

    a: RewardSpec
    b: RewardSpec
    p: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise InvalidInput("p must lie in [0, 1]")

    def chooses_a(self, iteration: int) -> bool:
        u = np.random.default_rng(derive_seed(self.seed, "mixed-reward", iteration)).random()
        return bool(u < self.p)

    def resolve(self, iteration: int) -> RewardSpec:
        return self.a if self.chooses_a(iteration) else self.b


def mixed_reward(a: RewardSpec, b: RewardSpec, p: float = 0.5, seed: int = 0) -> MixedReward:
    return MixedReward(a, b, p, seed)


def resolve_reward(spec, iteration: int) -> RewardSpec:
    return spec.resolve(iteration) if isinstance(spec, MixedReward) else spec
