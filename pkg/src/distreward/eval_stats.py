"""Win rates, bootstrap comparisons, correlations and binomial/Bayesian win-rate statistics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import AllTied, InvalidInput
from .gauss_stats import GaussStats, accumulate_stats, as_embeddings, frechet_distance


# --------------------------------------------------------------------------- win rates


@dataclass
class PairedScores:
    model: np.ndarray
    baseline: np.ndarray
    higher_better: bool = True
    prompt_ids: list | None = None

    def __post_init__(self):
        self.model = np.asarray(self.model, dtype=np.float64).reshape(-1)
        self.baseline = np.asarray(self.baseline, dtype=np.float64).reshape(-1)
        if self.model.size != self.baseline.size:
            raise InvalidInput("model and baseline scores must have equal length")
        if not (np.all(np.isfinite(self.model)) and np.all(np.isfinite(self.baseline))):
            raise InvalidInput("scores must be finite")


def win_rate(scores: PairedScores) -> float:
    """Fraction of pairs the model wins; a tie counts as half a win."""
    if scores.model.size < 1:
        raise InvalidInput("need at least one pair")
    diff = scores.model - scores.baseline
    if not scores.higher_better:
        diff = -diff
    return float((np.sum(diff > 0) + 0.5 * np.sum(diff == 0)) / diff.size)


def bootstrap_indices(n: int, n_boot: int = 1000, subset: int = 40, seed: int = 0) -> np.ndarray:
    """(n_boot, subset) index draws with replacement, shared by every model compared."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, n, size=(n_boot, subset))


def bootstrap_dataset_win_rate(model_embeds, baseline_embeds, ref: GaussStats, n_boot: int = 1000,
                               subset: int = 40, seed: int = 0, return_draws: bool = False):
    """Win rate of the model on dataset FAD over bootstrap subsets (lower FAD wins, ties count half)."""
    m = as_embeddings(model_embeds)
    b = as_embeddings(baseline_embeds)
    if m.shape != b.shape:
        raise InvalidInput("model and baseline embeddings must be index-aligned")
    if subset < 2:
        raise InvalidInput("bootstrap subset must have at least 2 rows")
    idx = bootstrap_indices(m.shape[0], n_boot, subset, seed)
    fad_m = np.array([frechet_distance(accumulate_stats(m[i]), ref) for i in idx])
    fad_b = np.array([frechet_distance(accumulate_stats(b[i]), ref) for i in idx])
    rate = float((np.sum(fad_m < fad_b) + 0.5 * np.sum(fad_m == fad_b)) / n_boot)
    if return_draws:
        return rate, idx, fad_m, fad_b
    return rate


# --------------------------------------------------------------------------- correlations


def plcc(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.size != y.size or x.size < 2:
        raise InvalidInput("need two equal-length samples of size >= 2")
    xc, yc = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0:
        raise InvalidInput("correlation undefined for a constant sample")
    return float(np.clip(xc @ yc / denom, -1.0, 1.0))


def srcc(x, y) -> float:
    """Spearman correlation with average ranks for ties."""
    return plcc(rankdata(x), rankdata(y))


@dataclass
class GroupedCorrelation:
    value: float
    groups_used: int
    groups_skipped: int


def srcc_per_group_detail(x, y, groups) -> GroupedCorrelation:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    groups = np.asarray(groups).reshape(-1)
    if not (x.size == y.size == groups.size):
        raise InvalidInput("x, y and groups must have equal length")
    values, skipped = [], 0
    for g in dict.fromkeys(groups.tolist()):
        sel = groups == g
        if sel.sum() < 2 or np.ptp(x[sel]) == 0 or np.ptp(y[sel]) == 0:
            skipped += 1
            continue
        values.append(srcc(x[sel], y[sel]))
    if not values:
        raise InvalidInput("no group has two or more non-constant members")
    return GroupedCorrelation(float(np.mean(values)), len(values), skipped)


def srcc_per_group(x, y, groups) -> float:
    """Mean of per-group Spearman coefficients; degenerate groups are skipped."""
    return srcc_per_group_detail(x, y, groups).value


# --------------------------------------------------------------------------- binomial / beta


def _log_binom_pmf(i, n, p):
    return (math.lgamma(n + 1) - math.lgamma(i + 1) - math.lgamma(n - i + 1)
            + i * math.log(p) + (n - i) * math.log1p(-p))


def binomial_test_one_sided(k: int, n: int, p: float = 0.5) -> float:
    """P(K >= k) for K ~ Binomial(n, p), summed in log space."""
    if not (0 <= k <= n):
        raise InvalidInput("need 0 <= k <= n")
    if k == 0:
        return 1.0
    logs = np.array([_log_binom_pmf(i, n, p) for i in range(k, n + 1)])
    top = logs.max()
    return float(min(1.0, math.exp(top) * np.sum(np.exp(logs - top))))


def _betacf(a, b, x, max_iter=500, eps=1e-16):
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    return h


def betainc_regularized(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise InvalidInput("beta parameters must be positive")
    if x <= 0:
        return 0.0
    if x >= 1:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def betaincinv(a: float, b: float, p: float) -> float:
    """Inverse of ``betainc_regularized`` in x, by bisection to machine precision."""
    if not 0.0 <= p <= 1.0:
        raise InvalidInput("probability must lie in [0, 1]")
    if p == 0.0:
        return 0.0
    if p == 1.0:
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if betainc_regularized(a, b, mid) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    return 0.5 * (lo + hi)


def clopper_pearson_lower(k: int, n: int, alpha: float = 0.05) -> float:
    """One-sided lower confidence bound on a binomial success rate."""
    if not (0 <= k <= n) or n < 1:
        raise InvalidInput("need 0 <= k <= n and n >= 1")
    if k == 0:
        return 0.0
    return betaincinv(k, n - k + 1, alpha)


def posterior_prob_win(k: int, n: int, threshold: float = 0.5) -> float:
    """P(w > threshold) under the Beta(k + 1, n - k + 1) posterior of a uniform prior."""
    if not (0 <= k <= n):
        raise InvalidInput("need 0 <= k <= n")
    # P(w > t) = 1 - I_t(k+1, n-k+1) = I_{1-t}(n-k+1, k+1), which keeps precision near 1.
    return betainc_regularized(n - k + 1, k + 1, 1.0 - threshold)


# --------------------------------------------------------------------------- label normalization


def normalize_global(ratings) -> np.ndarray:
    """Shift by the population mean and scale by the population standard deviation."""
    r = np.asarray(ratings, dtype=np.float64).reshape(-1)
    if r.size == 0:
        raise InvalidInput("no ratings")
    std = r.std()
    if std == 0:
        raise AllTied("all ratings are identical")
    return (r - r.mean()) / std


@dataclass
class RatingTable:
    rater_ids: np.ndarray
    item_ids: np.ndarray
    ratings: np.ndarray
    scale: tuple = (1, 5)

    def __post_init__(self):
        self.rater_ids = np.asarray(self.rater_ids).reshape(-1)
        self.item_ids = np.asarray(self.item_ids).reshape(-1)
        self.ratings = np.asarray(self.ratings, dtype=np.float64).reshape(-1)
        if not (self.rater_ids.size == self.item_ids.size == self.ratings.size):
            raise InvalidInput("rater, item and rating columns must have equal length")
        lo, hi = self.scale
        bad = np.flatnonzero((self.ratings < lo) | (self.ratings > hi) | ~np.isfinite(self.ratings))
        if bad.size:
            raise InvalidInput(f"rating record {int(bad[0])} is outside the scale [{lo}, {hi}]")

    def __len__(self):
        return self.ratings.size

    @classmethod
    def from_csv(cls, path, scale=(1, 5)) -> "RatingTable":
        raters, items, ratings = [], [], []
        with open(path, newline="") as f:
            reader = csv.reader(f)
            for lineno, row in enumerate(reader, start=1):
                if not row or row[0].startswith("#"):
                    continue
                if lineno == 1 and row[0].strip() == "rater_id":
                    continue
                if len(row) != 3:
                    raise InvalidInput(f"{path}:{lineno}: expected rater_id,item_id,rating")
                try:
                    ratings.append(float(row[2]))
                except ValueError as exc:
                    raise InvalidInput(f"{path}:{lineno}: bad rating {row[2]!r}") from exc
                raters.append(row[0].strip())
                items.append(row[1].strip())
        return cls(np.array(raters), np.array(items), np.array(ratings), scale)


@dataclass
class GibbsNormalization:
    scores: np.ndarray
    global_mean: float
    raters: np.ndarray
    offsets: np.ndarray  # posterior mean rater offset from the global mean
    stds: np.ndarray  # posterior mean rater noise std
    sweeps: int
    burn_in: int
    seed: int


def normalize_per_rater_gibbs(table: RatingTable, sweeps: int = 2000, seed: int = 0,
                              burn_in: int | None = None, prior_shape: float = 2.0,
                              prior_scale: float = 1.0) -> GibbsNormalization:
    """Per-rater normalization under a hierarchical Gaussian rater model.

    rating = global_mean + offset[rater] + noise, with offset ~ N(0, 1) and
    noise ~ N(0, var[rater]), var ~ InvGamma(prior_shape, prior_scale). The
    conjugate Gibbs sampler alternates offset | var and var | offset; each
    rating is then centred by its rater's posterior-mean offset and scaled by
    the rater's posterior-mean std.
    """
    if sweeps < 1:
        raise InvalidInput("sweeps must be >= 1")
    burn = sweeps // 5 if burn_in is None else burn_in
    if not 0 <= burn < sweeps:
        raise InvalidInput("burn-in must leave at least one kept sweep")
    raters, rater_idx = np.unique(table.rater_ids, return_inverse=True)
    r = table.ratings
    mu = float(r.mean())
    resid = r - mu
    n_r = len(raters)
    counts = np.bincount(rater_idx, minlength=n_r).astype(float)
    sums = np.bincount(rater_idx, weights=resid, minlength=n_r)

    rng = np.random.default_rng(seed)
    offset = np.zeros(n_r)
    var = np.ones(n_r)
    acc_offset = np.zeros(n_r)
    acc_std = np.zeros(n_r)
    kept = 0
    for sweep in range(sweeps):
        prec = 1.0 + counts / var
        offset = (sums / var) / prec + rng.standard_normal(n_r) / np.sqrt(prec)
        sq = np.bincount(rater_idx, weights=(resid - offset[rater_idx]) ** 2, minlength=n_r)
        shape = prior_shape + 0.5 * counts
        scale = prior_scale + 0.5 * sq
        var = scale / rng.gamma(shape)
        if sweep >= burn:
            acc_offset += offset
            acc_std += np.sqrt(var)
            kept += 1
    post_offset = acc_offset / kept
    post_std = acc_std / kept
    scores = (resid - post_offset[rater_idx]) / post_std[rater_idx]
    return GibbsNormalization(scores, mu, raters, post_offset, post_std, sweeps, burn, seed)
