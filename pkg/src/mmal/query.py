"""Batch acquisition strategies over the unlabeled pool.

All selectors return positions into the arrays they are given; callers map
positions back to dataset indices. Ties are broken by ascending position.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

STRATEGIES = ("random", "entropy", "bald", "kcg", "badge", "bmmal-interp")
NORM_TOL = 1e-4
BMMAL_CLIP = (0.1, 10.0)


@dataclass
class PoolState:
    labeled: list[int]
    unlabeled: list[int]
    history: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        if set(self.labeled) & set(self.unlabeled):
            raise ValueError("labeled and unlabeled sets overlap")

    def acquire(self, indices) -> None:
        indices = [int(i) for i in indices]
        pool = set(self.unlabeled)
        if len(set(indices)) != len(indices) or not pool.issuperset(indices):
            raise ValueError("acquired indices must be distinct members of the unlabeled pool")
        taken = set(indices)
        self.unlabeled = [i for i in self.unlabeled if i not in taken]
        self.labeled = self.labeled + indices
        self.history.append(indices)


@dataclass
class Acquisition:
    indices: list[int]
    strategy: str
    scores: list[float] | None = None
    diagnostics: dict = field(default_factory=dict)


def _top_b(scores: np.ndarray, B: int) -> np.ndarray:
    # stable sort on -score keeps ascending position among ties
    return np.argsort(-scores, kind="stable")[:B]


def _check_pool(n: int, B: int) -> int:
    if n == 0:
        raise ValueError("empty unlabeled pool")
    if B < 1:
        raise ValueError("acquisition size must be >= 1")
    return min(B, n)


def select_random(n_pool: int, B: int, rng: np.random.Generator) -> Acquisition:
    B = _check_pool(n_pool, B)
    idx = rng.choice(n_pool, size=B, replace=False)
    return Acquisition(sorted(int(i) for i in idx), "random")


def entropy(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    return -plogp.sum(axis=-1)


def select_entropy(probs: np.ndarray, B: int) -> Acquisition:
    probs = np.asarray(probs, dtype=np.float64)
    B = _check_pool(len(probs), B)
    if np.any(np.abs(probs.sum(axis=1) - 1) > NORM_TOL) or np.any(probs < 0):
        raise ValueError("probability rows must be normalised")
    h = entropy(probs)
    idx = _top_b(h, B)
    return Acquisition([int(i) for i in idx], "entropy", [float(h[i]) for i in idx])


def bald_scores(mc_probs: np.ndarray) -> np.ndarray:
    """Mutual information H(E_t p_t) - E_t H(p_t) per sample; input T x N x K."""
    mc = np.asarray(mc_probs, dtype=np.float64)
    return np.clip(entropy(mc.mean(axis=0)) - entropy(mc).mean(axis=0), 0.0, None)


def select_bald(mc_probs: np.ndarray, B: int) -> Acquisition:
    mc = np.asarray(mc_probs)
    if mc.ndim != 3 or mc.shape[0] < 2:
        raise ValueError("BALD needs T >= 2 stochastic passes (T x N x K input)")
    B = _check_pool(mc.shape[1], B)
    s = bald_scores(mc)
    idx = _top_b(s, B)
    return Acquisition([int(i) for i in idx], "bald", [float(s[i]) for i in idx])


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def select_kcg(feats_labeled: np.ndarray, feats_unlabeled: np.ndarray, B: int, chunk: int = 2048) -> Acquisition:
    """Greedy k-center: repeatedly take the pool point farthest from the current cover."""
    U = np.asarray(feats_unlabeled, dtype=np.float64)
    L = np.asarray(feats_labeled, dtype=np.float64).reshape(-1, U.shape[1] if U.ndim == 2 else 0)
    B = _check_pool(len(U), B)
    min_d = np.full(len(U), np.inf)
    for s in range(0, len(L), chunk):
        min_d = np.minimum(min_d, _sq_dists(U, L[s:s + chunk]).min(axis=1))
    chosen: list[int] = []
    radii = []
    for _ in range(B):
        i = int(np.argmax(min_d))  # first maximum -> lowest position
        chosen.append(i)
        radii.append(float(np.sqrt(min_d[i])) if np.isfinite(min_d[i]) else float("inf"))
        min_d = np.minimum(min_d, ((U - U[i]) ** 2).sum(axis=1))
        min_d[i] = -np.inf
    cover = np.sqrt(np.max(np.where(np.isfinite(min_d) & (min_d >= 0), min_d, 0.0))) if len(U) else 0.0
    return Acquisition(chosen, "kcg", radii, {"covering_radius": float(cover)})


def kmeanspp_seed(points: np.ndarray, B: int, rng: np.random.Generator, first: int | None = None) -> list[int]:
    """k-means++ seeding: D^2-weighted sequential sampling of B distinct rows.

    Points at zero distance from the chosen set get no mass unless every
    remaining point is at zero distance, in which case the draw is uniform over
    the not-yet-chosen rows. ``first`` forces the first center.
    """
    X = np.asarray(points, dtype=np.float64)
    n = len(X)
    if B > n:
        raise ValueError(f"cannot seed {B} centers from {n} points")
    if B <= 0:
        return []
    sq = (X * X).sum(axis=1)
    c0 = int(rng.integers(n)) if first is None else int(first)
    chosen = [c0]
    taken = np.zeros(n, dtype=bool)
    taken[c0] = True
    d2 = np.maximum(sq + sq[c0] - 2.0 * X @ X[c0], 0.0)
    d2[taken] = 0.0
    while len(chosen) < B:
        total = d2.sum()
        u = rng.random()
        if total > 0:
            cdf = np.cumsum(d2)
            i = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
            if i >= n or d2[i] == 0:  # rounding at the top end of the cdf
                i = int(np.flatnonzero(d2)[-1])
        else:
            free = np.flatnonzero(~taken)
            i = int(free[min(int(u * len(free)), len(free) - 1)])
        chosen.append(i)
        taken[i] = True
        d2 = np.minimum(d2, np.maximum(sq + sq[i] - 2.0 * X @ X[i], 0.0))
        d2[taken] = 0.0
    return chosen


def select_badge(embeddings: np.ndarray, B: int, rng: np.random.Generator) -> Acquisition:
    emb = np.asarray(embeddings)
    B = _check_pool(len(emb), B)
    idx = kmeanspp_seed(emb, B, rng)
    norms = np.linalg.norm(emb, axis=1)
    return Acquisition(idx, "badge", [float(norms[i]) for i in idx],
                       {"mean_embedding_norm": float(norms.mean())})


def bmmal_weights(labeled_blocks: list[np.ndarray]) -> tuple[np.ndarray | None, np.ndarray]:
    """Per-modality balance weights from the labeled-set gradient contributions.

    Contribution c_m is the mean block norm over the labeled set and
    w_m = sum(c) / (M * c_m), clipped to [0.1, 10]. Returns (None, c) when every
    contribution is zero.
    """
    c = np.array([np.linalg.norm(b, axis=1).mean() if len(b) else 0.0 for b in labeled_blocks])
    if not np.any(c > 0):
        return None, c
    M = len(c)
    with np.errstate(divide="ignore"):
        w = np.where(c > 0, c.sum() / (M * c), BMMAL_CLIP[1])
    return np.clip(w, *BMMAL_CLIP), c


def select_bmmal(pool_blocks: list[np.ndarray], labeled_blocks: list[np.ndarray], B: int,
                 rng: np.random.Generator) -> Acquisition:
    """Modality-balanced BADGE: rescale each modality's gradient block, then k-means++."""
    B = _check_pool(len(pool_blocks[0]), B)
    w, c = bmmal_weights(labeled_blocks)
    diag = {"contributions": [float(v) for v in c]}
    if w is None:
        diag["fallback"] = "unweighted"
        w = np.ones(len(pool_blocks))
    diag["weights"] = [float(v) for v in w]
    emb = np.concatenate([wm * b for wm, b in zip(w, pool_blocks)], axis=1)
    idx = kmeanspp_seed(emb, B, rng)
    norms = np.linalg.norm(emb, axis=1)
    return Acquisition(idx, "bmmal-interp", [float(norms[i]) for i in idx], diag)


# ----------------------------------------------------------------- registry

QueryFn = Callable[..., Acquisition]
_PLUGINS: dict[str, QueryFn] = {}


def register_strategy(name: str, fn: QueryFn) -> None:
    """Register an external strategy ``fn(context) -> Acquisition``.

    ``context`` is the :class:`mmal.engine.QueryContext` of the current
    iteration (model, pool features, labeled features, B, rng).
    """
    if name in STRATEGIES:
        raise ValueError(f"{name!r} is a built-in strategy")
    _PLUGINS[name] = fn


def plugin(name: str) -> QueryFn | None:
    return _PLUGINS.get(name)


def known_strategies() -> tuple[str, ...]:
    return STRATEGIES + tuple(sorted(_PLUGINS))
