"""Isolation Forest over latent vectors.

Each tree isolates a random subsample by recursive axis-aligned splits at a
uniformly drawn threshold; anomalous points end up on short paths. Scores
follow ``s(x) = 2 ** (-E[h(x)] / c(psi))``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InsufficientDataError, ShapeError
from .numcore import make_rng

EULER_GAMMA = 0.5772156649015329


def harmonic(n: int) -> float:
    if n < 1:
        return 0.0
    if n <= 1000:
        return float(sum(1.0 / i for i in range(1, n + 1)))
    return math.log(n) + EULER_GAMMA + 1.0 / (2 * n) - 1.0 / (12 * n * n)


def average_path_length(n: int) -> float:
    """c(n): mean unsuccessful-search path length in a BST of n points."""
    if n <= 1:
        return 0.0
    if n == 2:
        return 1.0
    return 2.0 * harmonic(n - 1) - 2.0 * (n - 1) / n


@dataclass
class IsoTree:
    """Array-encoded binary tree. ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray
    depth: np.ndarray
    adjustment: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.adjustment = np.array([average_path_length(int(s)) for s in self.size])

    @property
    def max_depth(self) -> int:
        return int(self.depth.max())

    def leaf_path_lengths(self, X: np.ndarray) -> np.ndarray:
        """Depth of the reached leaf plus c(leaf size), per row of X."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            n = node[idx]
            go_left = X[idx, self.feature[n]] < self.threshold[n]
            node[idx] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] >= 0
        return self.depth[node] + self.adjustment[node]


def _build_tree(X: np.ndarray, depth_limit: int, rng: np.random.Generator) -> IsoTree:
    feature, threshold, left, right, size, depth = [], [], [], [], [], []

    def new_node(n, d):
        for arr, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (size, n), (depth, d)):
            arr.append(v)
        return len(feature) - 1

    stack = [(np.arange(X.shape[0]), 0, new_node(X.shape[0], 0))]
    while stack:
        rows, d, node = stack.pop()
        if d >= depth_limit or rows.size <= 1:
            continue
        sub = X[rows]
        lo, hi = sub.min(axis=0), sub.max(axis=0)
        splittable = np.flatnonzero(hi > lo)
        if splittable.size == 0:
            continue
        # constant dimensions cannot split the node
        dim = int(splittable[rng.integers(splittable.size)])
        t = rng.uniform(lo[dim], hi[dim])
        if t <= lo[dim]:
            t = np.nextafter(lo[dim], hi[dim])
        mask = sub[:, dim] < t
        feature[node], threshold[node] = dim, t
        l_rows, r_rows = rows[mask], rows[~mask]
        left[node] = new_node(l_rows.size, d + 1)
        right[node] = new_node(r_rows.size, d + 1)
        stack.append((r_rows, d + 1, right[node]))
        stack.append((l_rows, d + 1, left[node]))
    return IsoTree(np.array(feature), np.array(threshold), np.array(left), np.array(right),
                   np.array(size), np.array(depth, dtype=np.float64))


@dataclass
class IsoForest:
    trees: list[IsoTree]
    subsample_size: int
    dim: int
    seed: int

    @property
    def normalizer(self) -> float:
        return average_path_length(self.subsample_size)


def fit_forest(points: np.ndarray, n_trees: int = 100, subsample_size: int = 256, seed: int = 0) -> IsoForest:
    """Grow ``n_trees`` trees on seeded subsamples of ``min(subsample_size, N)`` points.

    Each tree draws from its own RNG stream keyed by ``seed`` and the tree index.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"points must be a 2-d array, got shape {X.shape}")
    if X.shape[0] < 2:
        raise InsufficientDataError("isolation forest needs at least 2 points")
    if n_trees < 1 or subsample_size < 2:
        raise ValueError("need n_trees >= 1 and subsample_size >= 2")
    psi = min(subsample_size, X.shape[0])
    depth_limit = math.ceil(math.log2(psi))
    trees = []
    for i in range(n_trees):
        rng = make_rng(seed, 40, i)
        rows = rng.choice(X.shape[0], size=psi, replace=False)
        trees.append(_build_tree(X[rows], depth_limit, rng))
    return IsoForest(trees, psi, X.shape[1], seed)


def expected_path_length(forest: IsoForest, points: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if X.shape[1] != forest.dim:
        raise ShapeError(f"points are {X.shape[1]}-d, forest was fit on {forest.dim}-d data")
    return np.mean([t.leaf_path_lengths(X) for t in forest.trees], axis=0)


def score_from_path_length(mean_path: np.ndarray | float, psi: int) -> np.ndarray:
    c = average_path_length(psi)
    return np.power(2.0, -np.asarray(mean_path, dtype=np.float64) / c)


def anomaly_score(forest: IsoForest, points: np.ndarray) -> np.ndarray:
    """Scores in (0, 1]; higher means easier to isolate."""
    return score_from_path_length(expected_path_length(forest, points), forest.subsample_size)


def flag_outliers(ids: Sequence[str], scores: Sequence[float], q: float = 0.01) -> list[str]:
    """The ``ceil(q * N)`` highest-scoring ids; ties keep input order."""
    if not 0 < q <= 1:
        raise ValueError(f"q must be in (0, 1], got {q}")
    s = np.asarray(scores, dtype=np.float64)
    if len(ids) != s.size:
        raise ValueError("one score per id required")
    n_flag = math.ceil(q * s.size - 1e-9)
    order = np.lexsort((np.arange(s.size), -s))
    return [ids[i] for i in order[:n_flag]]


def class_score_summary(ids: Sequence[str], scores: Sequence[float],
                        labels: Mapping[str, str]) -> dict[str, dict]:
    """Median, population variance and count of scores per class ("unknown" if unlabeled)."""
    groups: dict[str, list[float]] = {}
    for sid, s in zip(ids, scores):
        groups.setdefault(labels.get(sid, "unknown"), []).append(float(s))
    out = {}
    for name in sorted(groups):
        v = np.array(groups[name])
        out[name] = {"median": float(np.median(v)), "variance": float(np.var(v)), "count": int(v.size)}
    return out


@dataclass
class AnomalyReport:
    params: dict
    ids: list[str]
    scores: list[float]
    flagged: list[str]
    class_summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "params": self.params,
            "scores": [{"source_id": i, "score": s} for i, s in zip(self.ids, self.scores)],
            "flagged": self.flagged,
            "class_summary": self.class_summary,
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def detect_outliers(ids: Sequence[str], points: np.ndarray, n_trees: int = 100, subsample_size: int = 256,
                    q: float = 0.01, seed: int = 0, labels: Mapping[str, str] | None = None,
                    representation: str = "post_both") -> AnomalyReport:
    forest = fit_forest(points, n_trees, subsample_size, seed)
    scores = anomaly_score(forest, points)
    return AnomalyReport(
        params={"n_trees": n_trees, "subsample_size": forest.subsample_size, "q": q, "seed": seed,
                "representation": representation, "n_points": len(ids)},
        ids=list(ids),
        scores=[float(s) for s in scores],
        flagged=flag_outliers(list(ids), scores, q),
        class_summary=class_score_summary(ids, scores, labels) if labels is not None else {},
    )
