"""Query strategies that pick which unlabeled shapes to send to the oracle."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diffops import ns_residuals
from .geometry import Shape, farthest_point_sampling, pairwise_sqdist
from .oracle import FluidConstants
from .surrogate import SurrogateModel, committee_predict, committee_variance, forward

STRATEGIES = ("random", "gv", "qbc", "pa")
DEFAULT_LAMBDA = 1e-4


class QueryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    ids: tuple[str, ...]
    entries: np.ndarray

    def index(self, ids: Sequence[str]) -> np.ndarray:
        lookup = {sid: i for i, sid in enumerate(self.ids)}
        missing = [sid for sid in ids if sid not in lookup]
        if missing:
            raise QueryError(f"ids missing from distance matrix: {missing[:5]}")
        return np.array([lookup[sid] for sid in ids], dtype=np.int64)


@dataclass
class QueryResult:
    strategy: str
    selected_ids: list[str]
    scores: dict[str, float]
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"strategy": self.strategy, "selected_ids": list(self.selected_ids),
                "scores": {k: float(v) for k, v in self.scores.items()},
                "metadata": self.metadata}


def chamfer(p1, p2) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets."""
    a = np.asarray(p1, dtype=np.float64)
    b = np.asarray(p2, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two non-empty point sets")
    d2 = pairwise_sqdist(a, b)
    return float(np.sqrt(d2.min(axis=1)).mean() + np.sqrt(d2.min(axis=0)).mean())


def subsample_points(shape: Shape, n: int) -> np.ndarray:
    if n >= len(shape.points):
        return shape.points
    return shape.points[farthest_point_sampling(shape.points, n)]


def distance_matrix(shapes: Sequence[Shape], subsample: int = 256, seed: int = 0,
                    threads: int = 1) -> DistanceMatrix:
    """Pairwise Chamfer distances between FPS subsamples of ``shapes``.

    FPS is deterministic, so ``seed`` only exists for interface symmetry.
    """
    del seed
    if len(shapes) < 2:
        raise QueryError("distance matrix needs at least two shapes")
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        clouds = list(pool.map(lambda s: subsample_points(s, subsample), shapes))
        pairs = [(i, j) for i in range(len(shapes)) for j in range(i + 1, len(shapes))]
        values = list(pool.map(lambda ij: chamfer(clouds[ij[0]], clouds[ij[1]]), pairs))
    M = np.zeros((len(shapes), len(shapes)))
    for (i, j), v in zip(pairs, values):
        M[i, j] = M[j, i] = v
    return DistanceMatrix(tuple(s.id for s in shapes), M)


def _check_k(k: int, n: int) -> None:
    if not 0 <= k <= n:
        raise QueryError(f"cannot select {k} of {n} unlabeled samples")


def _top_k(ids: Sequence[str], scores: np.ndarray, k: int) -> list[str]:
    order = np.argsort(-np.asarray(scores), kind="stable")
    return [ids[i] for i in order[:k]]


def query_random(unlabeled_ids: Sequence[str], k: int, seed: int) -> QueryResult:
    _check_k(k, len(unlabeled_ids))
    perm = np.random.default_rng(seed).permutation(len(unlabeled_ids))
    n = len(unlabeled_ids)
    scores = {unlabeled_ids[i]: 1.0 - r / n for r, i in enumerate(perm)}
    return QueryResult("random", [unlabeled_ids[i] for i in perm[:k]], scores)


def query_gv(M: DistanceMatrix, labeled_ids: Sequence[str], unlabeled_ids: Sequence[str],
             k: int) -> QueryResult:
    """Farthest-point sampling on transductive descriptors (rows of ``M``).

    Descriptors are restricted to the columns of L u U. The score of a
    candidate is its descriptor distance to the nearest labeled descriptor;
    the selection order is kept in ``metadata``.
    """
    _check_k(k, len(unlabeled_ids))
    if set(labeled_ids) & set(unlabeled_ids):
        raise QueryError("labeled and unlabeled ids overlap")
    pool_ids = list(labeled_ids) + list(unlabeled_ids)
    idx = M.index(pool_ids)
    desc = M.entries[np.ix_(idx, idx)]
    nl = len(labeled_ids)
    order = farthest_point_sampling(desc, k, preselected=range(nl))
    cand = desc[nl:]
    if nl:
        near = np.sqrt(pairwise_sqdist(cand, desc[:nl]).min(axis=1))
    else:
        near = np.sqrt(((cand - cand.mean(axis=0)) ** 2).sum(axis=1))
    selected = [pool_ids[i] for i in order]
    scores = {sid: float(v) for sid, v in zip(unlabeled_ids, near)}
    return QueryResult("gv", selected, scores, {"selection_order": selected})


def query_qbc(model: SurrogateModel, unlabeled_shapes: Sequence[Shape], members: int, k: int,
              seed: int) -> QueryResult:
    """Mean over points of the committee's per-point variance (trace of covariance)."""
    _check_k(k, len(unlabeled_shapes))
    scores = np.array([
        float(committee_variance(committee_predict(model, s, members, seed)).mean())
        for s in unlabeled_shapes
    ])
    ids = [s.id for s in unlabeled_shapes]
    return QueryResult("qbc", _top_k(ids, scores, k), dict(zip(ids, scores.tolist())),
                       {"members": members, "seed": seed})


def predict(model, shape: Shape):
    """Deterministic prediction; ``model`` may also be any callable shape -> field."""
    return forward(model, shape) if isinstance(model, SurrogateModel) else model(shape)


def pa_score(model, shape: Shape, constants: FluidConstants, lam: float = DEFAULT_LAMBDA) -> float:
    cont, mom = ns_residuals(shape, predict(model, shape), constants)
    return cont + lam * mom


def query_pa(model, unlabeled_shapes: Sequence[Shape], constants: FluidConstants,
             lam: float = DEFAULT_LAMBDA, k: int = 1) -> QueryResult:
    """Rank by continuity + lam * momentum residual of the deterministic prediction."""
    _check_k(k, len(unlabeled_shapes))
    scores = np.array([pa_score(model, s, constants, lam) for s in unlabeled_shapes])
    ids = [s.id for s in unlabeled_shapes]
    return QueryResult("pa", _top_k(ids, scores, k), dict(zip(ids, scores.tolist())),
                       {"lambda": lam, "residual_domain": "interior"})
