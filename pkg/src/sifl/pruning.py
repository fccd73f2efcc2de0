"""Model-driven pruning of the distillation pool.

Two stages, both scored with the current global model:

* KMeans balancing: pseudo-label every candidate, cluster the embeddings and
  fill a per-class quota ordered by nearest-centroid distance, then top up
  globally by the same ordering.
* Entropy pruning: drop a percentage of candidates ranked by max-softmax
  confidence.

Ties are always broken by ascending pool index.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import InsufficientPointsError, InputShapeError, InvalidConfigError, TargetTooLargeError
from .nn import ModelState
from .nn.layers import softmax
from .nn.model import embed_batched, head

HEURISTICS = ("easy", "hard", "mixed")
REMOVALS = ("top", "bottom", "random")


@dataclass(frozen=True)
class KMeansModel:
    centroids: np.ndarray
    seed: int

    @property
    def k(self) -> int:
        return len(self.centroids)


@dataclass(frozen=True)
class KMeansBalanceConfig:
    k: int = 1000
    target_size: int | None = None  # None: keep the whole candidate pool
    balance_factor: float = 1.0
    heuristic: str = "hard"
    seed: int = 0
    refit: bool = True

    def __post_init__(self):
        object.__setattr__(self, "heuristic", self.heuristic.lower())
        if self.k < 1:
            raise InvalidConfigError("cluster count must be positive", "kmeans.k")
        if self.target_size is not None and self.target_size < 1:
            raise InvalidConfigError("target size must be positive", "kmeans.target_size")
        if not 0 <= self.balance_factor <= 1:
            raise InvalidConfigError("balancing factor must be in [0, 1]", "kmeans.balance_factor")
        if self.heuristic not in HEURISTICS:
            raise InvalidConfigError(f"heuristic must be one of {HEURISTICS}", "kmeans.heuristic")


@dataclass(frozen=True)
class EntropyPruneConfig:
    removal_percent: float = 90.0
    heuristic: str = "top"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "heuristic", self.heuristic.lower())
        if not 0 <= self.removal_percent < 100:
            raise InvalidConfigError("removal percentage must be in [0, 100)", "entropy.removal_percent")
        if self.heuristic not in REMOVALS:
            raise InvalidConfigError(f"heuristic must be one of {REMOVALS}", "entropy.heuristic")


@dataclass
class PruneReport:
    selected: list[int]
    class_counts: dict[int, int] = field(default_factory=dict)
    stages: list[dict] = field(default_factory=list)
    pseudo_label_hist: dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "selected": list(self.selected),
            "class_counts": {str(k): v for k, v in sorted(self.class_counts.items())},
            "stages": self.stages,
            "pseudo_label_hist": {str(k): v for k, v in sorted(self.pseudo_label_hist.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def indices_wire(self) -> str:
        """Newline-delimited index list sent to clients."""
        return "".join(f"{i}\n" for i in self.selected)


def _hist(values) -> dict[int, int]:
    labels, counts = np.unique(np.asarray(values, dtype=np.int64), return_counts=True)
    return {int(k): int(v) for k, v in zip(labels, counts)}


# --- k-means -------------------------------------------------------------------


def _sq_dists(points: np.ndarray, centroids: np.ndarray, chunk: int = 4096) -> np.ndarray:
    out = np.empty((len(points), len(centroids)))
    for lo in range(0, len(points), chunk):
        diff = points[lo : lo + chunk, None, :] - centroids[None, :, :]
        out[lo : lo + chunk] = np.einsum("skd,skd->sk", diff, diff)
    return out


def kmeans_fit(embeddings, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-6) -> KMeansModel:
    """Lloyd's algorithm with k-means++ seeding.

    Points are put in a canonical (lexicographic) order first, so the result
    depends on the set of embeddings and the seed but not on storage order.
    Empty clusters are re-seeded with the point farthest from its centroid.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise InputShapeError("embeddings must be a [S, E] matrix")
    if k < 1:
        raise InvalidConfigError("k must be positive", "k")
    if len(x) < k:
        raise InsufficientPointsError(f"{len(x)} points cannot form {k} clusters")
    if not np.all(np.isfinite(x)):
        raise InputShapeError("embeddings contain non-finite values")
    x = x[np.lexsort(x.T[::-1])] if x.shape[1] else x
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, 3]))

    centroids = np.empty((k, x.shape[1]))
    first = int(rng.integers(len(x)))
    centroids[0] = x[first]
    chosen = np.zeros(len(x), dtype=bool)
    chosen[first] = True
    d2 = _sq_dists(x, centroids[:1])[:, 0]
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            pick = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            pick = min(pick, len(x) - 1)
        else:
            free = np.flatnonzero(~chosen)
            pick = int(free[rng.integers(len(free))])
        chosen[pick] = True
        centroids[j] = x[pick]
        d2 = np.minimum(d2, _sq_dists(x, centroids[j : j + 1])[:, 0])

    for _ in range(max_iter):
        dist = _sq_dists(x, centroids)
        assign = dist.argmin(axis=1)
        own = dist[np.arange(len(x)), assign]
        onehot = np.zeros((k, len(x)))
        onehot[assign, np.arange(len(x))] = 1.0
        counts = onehot.sum(axis=1)
        new = onehot @ x
        filled = counts > 0
        new[filled] /= counts[filled, None]
        for c in np.flatnonzero(~filled):
            far = int(np.argmax(own))
            new[c] = x[far]
            own[far] = -1.0
        shift = np.sqrt(((new - centroids) ** 2).sum(axis=1)).max()
        centroids = new
        if shift < tol:
            break
    return KMeansModel(centroids, int(seed))


def nearest_distances(model: KMeansModel, points) -> np.ndarray:
    z = np.asarray(points, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != model.centroids.shape[1]:
        raise InputShapeError(f"points must have width {model.centroids.shape[1]}")
    return np.sqrt(_sq_dists(z, model.centroids).min(axis=1))


def nearest_centroid_distance(model: KMeansModel, z) -> float:
    """Euclidean distance from ``z`` to its nearest centroid."""
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    return float(nearest_distances(model, z)[0])


# --- balancing -----------------------------------------------------------------------


def _order(candidates: np.ndarray, dist: np.ndarray, easy: bool) -> np.ndarray:
    key = dist[candidates] if easy else -dist[candidates]
    return candidates[np.lexsort((candidates, key))]


def _take(candidates: np.ndarray, dist: np.ndarray, n: int, heuristic: str) -> np.ndarray:
    if n <= 0 or len(candidates) == 0:
        return np.zeros(0, dtype=np.int64)
    if heuristic == "easy":
        return _order(candidates, dist, True)[:n]
    if heuristic == "hard":
        return _order(candidates, dist, False)[:n]
    n_easy = n - n // 2
    first = _order(candidates, dist, True)[:n_easy]
    rest = np.setdiff1d(candidates, first)
    return np.concatenate([first, _order(rest, dist, False)[: n // 2]])


def balance_select(labels, distances, size: int, factor: float, heuristic: str) -> np.ndarray:
    """Quota fill over pseudo-classes, then a global top-up.

    ``LB = floor(size / C * factor)`` items per pseudo-class (all members when
    a class has fewer), then ``size - selected`` more from what is left.
    Returns sorted pool positions.
    """
    labels = np.asarray(labels, dtype=np.int64)
    dist = np.asarray(distances, dtype=np.float64)
    n = len(labels)
    if size > n:
        raise TargetTooLargeError(f"target size {size} exceeds pool of {n}")
    if size == n:
        return np.arange(n)
    classes = np.unique(labels)
    lb = math.floor(Fraction(size, len(classes)) * Fraction(str(factor)))
    pool = np.ones(n, dtype=bool)
    picked = []
    for c in classes:
        members = np.flatnonzero((labels == c) & pool)
        got = _take(members, dist, min(lb, len(members)), heuristic)
        pool[got] = False
        picked.append(got)
    remaining = size - sum(len(p) for p in picked)
    picked.append(_take(np.flatnonzero(pool), dist, remaining, heuristic))
    return np.sort(np.concatenate(picked))


def _score_pool(model: ModelState, inputs: np.ndarray):
    z = embed_batched(model, inputs)
    logits = np.concatenate([head(model, z[i : i + 512]) for i in range(0, len(z), 512)]) if len(z) else z
    return z, logits


def kmeans_balance(
    inputs,
    model: ModelState,
    cfg: KMeansBalanceConfig,
    candidates=None,
    kmeans: KMeansModel | None = None,
    scored=None,
):
    """Select ``cfg.target_size`` candidates by class-balanced distance ordering.

    ``candidates`` are pool indices (default: the whole pool). Passing a
    fitted ``kmeans`` skips refitting. Returns ``(indices, report, kmeans)``.
    """
    inputs = np.asarray(inputs)
    cand = np.arange(len(inputs)) if candidates is None else np.asarray(candidates, dtype=np.int64)
    if len(cand) == 0:
        raise TargetTooLargeError("empty candidate pool")
    size = len(cand) if cfg.target_size is None else cfg.target_size
    if size > len(cand):
        raise TargetTooLargeError(f"target size {size} exceeds pool of {len(cand)}")
    z, logits = scored if scored is not None else _score_pool(model, inputs[cand])
    labels = logits.argmax(axis=1)
    if kmeans is None:
        kmeans = kmeans_fit(z, min(cfg.k, len(z)), cfg.seed)
    dist = nearest_distances(kmeans, z)
    pos = balance_select(labels, dist, size, cfg.balance_factor, cfg.heuristic)
    chosen = cand[pos]
    report = PruneReport(
        selected=[int(i) for i in chosen],
        class_counts=_hist(labels[pos]),
        stages=[{"stage": "kmeans", "input": int(len(cand)), "output": int(len(chosen))}],
        pseudo_label_hist=_hist(labels),
    )
    return chosen, report, kmeans


# --- entropy pruning ----------------------------------------------------------------


def confidence_score(model: ModelState, inputs=None, *, logits=None, mode: str = "softmax") -> np.ndarray:
    """Per-input max softmax probability (or max raw logit with ``mode="logit"``)."""
    if logits is None:
        from .nn.model import forward_batched

        logits = forward_batched(model, np.asarray(inputs))
    logits = np.asarray(logits, dtype=np.float64)
    if mode == "logit":
        return logits.max(axis=1)
    if mode != "softmax":
        raise InvalidConfigError("confidence mode must be 'softmax' or 'logit'", "mode")
    return softmax(logits).max(axis=1)


def removal_count(n: int, percent: float) -> int:
    return math.floor(Fraction(str(percent)) * n / 100)


def entropy_prune(indices, scores, cfg: EntropyPruneConfig):
    """Drop ``floor(e% * n)`` items; keep the rest in input order."""
    idx = np.asarray(indices, dtype=np.int64)
    sc = np.asarray(scores, dtype=np.float64)
    if len(idx) != len(sc):
        raise InputShapeError("scores must align with indices")
    n = len(idx)
    r = removal_count(n, cfg.removal_percent)
    pos = np.arange(n)
    if cfg.heuristic == "top":
        order = np.lexsort((pos, -sc))
    elif cfg.heuristic == "bottom":
        order = np.lexsort((pos, sc))
    else:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed & 0xFFFFFFFFFFFFFFFF, 4]))
        order = rng.permutation(n)
    keep = np.ones(n, dtype=bool)
    keep[order[:r]] = False
    kept = idx[keep]
    report = PruneReport(
        selected=sorted(int(i) for i in kept),
        stages=[{"stage": "entropy", "input": int(n), "output": int(len(kept))}],
    )
    return kept, report


# --- pipeline -------------------------------------------------------------------------


def prune_pipeline(
    inputs,
    model: ModelState,
    kcfg: KMeansBalanceConfig | None,
    ecfg: EntropyPruneConfig | None,
    target: int | None = None,
    kmeans: KMeansModel | None = None,
    score_mode: str = "softmax",
):
    """KMeans balancing then entropy pruning; either stage may be ``None``.

    With both disabled the first ``target`` pool indices are returned.
    Returns ``(indices, report, kmeans_model_or_None)``.
    """
    inputs = np.asarray(inputs)
    n = len(inputs)
    if n == 0:
        raise TargetTooLargeError("empty distillation pool")
    if kcfg is None and ecfg is None:
        size = n if target is None else target
        if size > n:
            raise TargetTooLargeError(f"target {size} exceeds pool of {n}")
        return np.arange(size), PruneReport(
            selected=list(range(size)), stages=[{"stage": "none", "input": n, "output": size}]
        ), None

    z, logits = _score_pool(model, inputs)
    labels = logits.argmax(axis=1)
    stages = []
    cand = np.arange(n)
    if kcfg is not None:
        cand, krep, kmeans = kmeans_balance(inputs, model, kcfg, kmeans=kmeans, scored=(z, logits))
        stages += krep.stages
    if ecfg is not None:
        scores = confidence_score(model, logits=logits[cand], mode=score_mode)
        cand, erep = entropy_prune(cand, scores, ecfg)
        stages += erep.stages
    chosen = np.sort(cand)
    report = PruneReport(
        selected=[int(i) for i in chosen],
        class_counts=_hist(labels[chosen]),
        stages=stages,
        pseudo_label_hist=_hist(labels),
    )
    return chosen, report, kmeans
