"""Cross-modal retrieval metrics over a query x candidate similarity matrix.

Rows are queries (spectra) and columns candidates (texts); the true match of
query ``i`` is candidate ``i`` unless stated otherwise.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_K_GRID = tuple(range(1, 101))
REPORT_KS = (1, 5, 10, 20, 50)


def rank_of_match(sim_row: Sequence[float], true_index: int) -> int:
    """1-based rank of the true candidate.

    Candidates scoring strictly higher count against it, and so do tied
    candidates that come earlier in the row.
    """
    row = np.asarray(sim_row, dtype=np.float64)
    if row.size == 0:
        raise ValueError("similarity row is empty")
    if not 0 <= true_index < row.size:
        raise IndexError(f"true_index {true_index} out of range for {row.size} candidates")
    s = row[true_index]
    return 1 + int(np.sum(row > s)) + int(np.sum(row[:true_index] == s))


def ranks_from_similarity(sim: np.ndarray, true_indices: Sequence[int] | None = None) -> np.ndarray:
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2:
        raise ValueError(f"similarity matrix must be 2-d, got shape {sim.shape}")
    if true_indices is None:
        if sim.shape[0] > sim.shape[1]:
            raise ValueError("more queries than candidates; pass true_indices")
        true_indices = np.arange(sim.shape[0])
    true_indices = np.asarray(true_indices)
    if np.any(true_indices < 0) or np.any(true_indices >= sim.shape[1]):
        raise IndexError("true index out of range")
    s_true = sim[np.arange(sim.shape[0]), true_indices][:, None]
    cols = np.arange(sim.shape[1])[None, :]
    ahead = (sim > s_true) | ((sim == s_true) & (cols < true_indices[:, None]))
    return 1 + ahead.sum(axis=1)


def cutoff_for(k_percent: float, candidate_count: int) -> int:
    """ceil(k% of the candidates), evaluated in exact decimal arithmetic."""
    if not 0 < k_percent <= 100:
        raise ValueError(f"k_percent must be in (0, 100], got {k_percent}")
    return math.ceil(Fraction(repr(float(k_percent))) * candidate_count / 100)


def recall_at_percent(ranks: Sequence[int], k_percent: float, candidate_count: int) -> float:
    r = np.asarray(ranks)
    if r.size == 0:
        raise ValueError("no ranks given")
    return float(np.mean(r <= cutoff_for(k_percent, candidate_count)))


def median_rank(ranks: Sequence[int]) -> float:
    """Lower median: the order statistic at position ceil(n/2) (1-based)."""
    r = np.sort(np.asarray(ranks))
    if r.size == 0:
        raise ValueError("no ranks given")
    return float(r[math.ceil(r.size / 2) - 1])


def recall_curve(ranks: Sequence[int], candidate_count: int,
                 k_grid: Sequence[float] = DEFAULT_K_GRID) -> list[tuple[float, float]]:
    if list(k_grid) != sorted(k_grid):
        raise ValueError("k_grid must be sorted ascending")
    return [(k, recall_at_percent(ranks, k, candidate_count)) for k in k_grid]


def top1_recall(sim: np.ndarray) -> float:
    return float(np.mean(ranks_from_similarity(sim) == 1))


@dataclass
class RetrievalReport:
    candidate_count: int
    ranks: list[int]
    recall_at: dict[str, float]
    median_rank: float

    def to_dict(self) -> dict:
        return {
            "candidate_count": self.candidate_count,
            "ranks": self.ranks,
            "recall_at": self.recall_at,
            "median_rank": self.median_rank,
        }


def _k_key(k: float) -> str:
    return str(int(k)) if float(k).is_integer() else repr(float(k))


def retrieval_report(sim: np.ndarray, ks: Sequence[float] = REPORT_KS) -> RetrievalReport:
    ranks = ranks_from_similarity(sim)
    m = sim.shape[1]
    return RetrievalReport(
        candidate_count=int(m),
        ranks=[int(r) for r in ranks],
        recall_at={_k_key(k): recall_at_percent(ranks, k, m) for k in ks},
        median_rank=median_rank(ranks),
    )


def write_report(report: RetrievalReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def write_recall_curve(curve: Sequence[tuple[float, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k_percent", "recall"])
        for k, r in curve:
            w.writerow([_k_key(k), repr(r)])
