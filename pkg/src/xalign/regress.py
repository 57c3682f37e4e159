"""Physical-parameter estimation from latent representations.

k-NN regression (exact Euclidean search), MAE and Pearson metrics,
latent/variable correlation tables, per-variable Mixture-of-Experts
representation selection and the MAE comparison report.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InsufficientDataError
from .ingest import VARIABLES, DatasetStore
from .numcore import make_rng

logger = logging.getLogger(__name__)

REPRESENTATIONS = ("pre_spectra", "pre_text", "post_spectra", "post_text", "post_both")
# Tie precedence for MoE selection, most preferred first.
MOE_PRECEDENCE = ("post_both", "post_spectra", "post_text", "pre_spectra", "pre_text")
PRE = ("pre_spectra", "pre_text")
REPORT_COLUMNS = ("variable", "mean_baseline", *REPRESENTATIONS, "moe_choice", "moe_mae",
                  "uncertainty", "improvement_pct")


# ---------------------------------------------------------------------------
# k-NN
# ---------------------------------------------------------------------------


def _nearest(train: np.ndarray, queries: np.ndarray, k: int, chunk: int = 256) -> np.ndarray:
    """Indices of the k nearest training rows for every query.

    Candidates within rounding slack of the k-th expanded-norm distance are
    shortlisted, then re-ranked on directly computed squared distances with
    ties broken by row order.
    """
    t_sq = np.einsum("ij,ij->i", train, train)
    out = np.empty((queries.shape[0], k), dtype=np.int64)
    for start in range(0, queries.shape[0], chunk):
        q = queries[start:start + chunk]
        q_sq = np.einsum("ij,ij->i", q, q)
        approx = q_sq[:, None] + t_sq[None, :] - 2.0 * q @ train.T
        kth = np.partition(approx, k - 1, axis=1)[:, k - 1]
        slack = 1e-8 * (q_sq + t_sq.max() + 1.0)
        for r in range(q.shape[0]):
            c = np.flatnonzero(approx[r] <= kth[r] + slack[r])
            d = np.sum((train[c] - q[r]) ** 2, axis=1)
            out[start + r] = c[np.lexsort((c, d))[:k]]
    return out


def knn_regress(train_points: np.ndarray, train_targets: Sequence[float], queries: np.ndarray,
                k: int = 3) -> np.ndarray:
    """Unweighted mean target of the k nearest training points (Euclidean).

    Training points with a missing (NaN) target are ignored. Distance ties are
    broken by training-point order.
    """
    X = np.asarray(train_points, dtype=np.float64)
    y = np.asarray(train_targets, dtype=np.float64)
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("train_points must be 2-d with one target per row")
    if Q.shape[1] != X.shape[1]:
        raise ValueError(f"queries are {Q.shape[1]}-d, training points {X.shape[1]}-d")
    keep = ~np.isnan(y)
    X, y = X[keep], y[keep]
    if k < 1:
        raise ValueError("k must be >= 1")
    if X.shape[0] < k:
        raise InsufficientDataError(f"{X.shape[0]} usable training points for k={k}")
    # averaging in training order makes k = N reproduce y.mean() bit for bit
    return y[np.sort(_nearest(X, Q, k), axis=1)].mean(axis=1)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def mae(predictions: Sequence[float], truths: Sequence[float]) -> float:
    """Mean absolute error over entries whose truth is not NaN."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape or p.size == 0:
        raise ValueError("predictions and truths must be non-empty and equally long")
    ok = ~np.isnan(t)
    if not ok.any():
        raise InsufficientDataError("MAE is undefined when every truth is missing")
    return float(np.mean(np.abs(p[ok] - t[ok])))


@dataclass(frozen=True)
class PearsonResult:
    rho: float
    degenerate: bool = False
    n: int = 0

    def __float__(self):
        return self.rho


def pearson(x: Sequence[float], y: Sequence[float]) -> PearsonResult:
    """Sample Pearson correlation over pairs where neither value is NaN.

    A constant argument gives rho = 0 with ``degenerate`` set.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("x and y must have equal length")
    ok = ~(np.isnan(x) | np.isnan(y))
    x, y = x[ok], y[ok]
    if x.size < 2:
        raise ValueError(f"Pearson needs at least 2 paired values, got {x.size}")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(dx @ dx), np.sqrt(dy @ dy)
    if sx == 0 or sy == 0:
        return PearsonResult(0.0, True, int(x.size))
    return PearsonResult(float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0)), False, int(x.size))


# ---------------------------------------------------------------------------
# Correlation table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorrelationEntry:
    latent_dim: int
    variable: str
    abs_rho: float
    degenerate: bool = False


def correlation_table(latents: np.ndarray, physicals: np.ndarray, variables: Sequence[str],
                      top_n: int | None = 10) -> list[CorrelationEntry]:
    """|Pearson| for every (latent dimension, variable) pair, best first.

    ``latents`` and ``physicals`` are row-aligned (NaN = missing). Ties are
    ordered by dimension index, then variable name.
    """
    L = np.asarray(latents, dtype=np.float64)
    P = np.asarray(physicals, dtype=np.float64)
    if L.ndim != 2 or P.ndim != 2 or L.shape[0] != P.shape[0] or L.shape[0] == 0:
        raise ValueError("latents and physicals must be joinable, non-empty 2-d arrays")
    if P.shape[1] != len(variables):
        raise ValueError("one column per variable expected")
    entries = []
    for j, name in enumerate(variables):
        if np.sum(~np.isnan(P[:, j])) < 2:
            continue
        for d in range(L.shape[1]):
            r = pearson(L[:, d], P[:, j])
            entries.append(CorrelationEntry(d, name, abs(r.rho), r.degenerate))
    entries.sort(key=lambda e: (-e.abs_rho, e.latent_dim, e.variable))
    return entries if top_n is None else entries[:top_n]


def mean_abs_correlation(latents: np.ndarray, physicals: np.ndarray, variables: Sequence[str]) -> float:
    """Average over variables of the best |rho| any latent dimension achieves."""
    table = correlation_table(latents, physicals, variables, top_n=None)
    best: dict[str, float] = {}
    for e in table:
        best[e.variable] = max(best.get(e.variable, 0.0), e.abs_rho)
    return float(np.mean(list(best.values()))) if best else 0.0


# ---------------------------------------------------------------------------
# Representations, MoE and the report
# ---------------------------------------------------------------------------


def build_representations(store: DatasetStore, post_spectra: np.ndarray | None = None,
                          post_text: np.ndarray | None = None,
                          pre_spectra: np.ndarray | None = None,
                          pre_text: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Row-aligned representation matrices keyed by name.

    ``post_both`` is the concatenation ``[post_spectra | post_text]``.
    """
    reps = {
        "pre_spectra": store.spectral if pre_spectra is None else pre_spectra,
        "pre_text": store.text if pre_text is None else pre_text,
    }
    if post_spectra is not None and post_text is not None:
        reps["post_spectra"] = post_spectra
        reps["post_text"] = post_text
        reps["post_both"] = np.hstack([post_spectra, post_text])
    return reps


def standardize_like(train: np.ndarray, *others: np.ndarray) -> list[np.ndarray]:
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd[sd == 0] = 1.0
    return [(a - mu) / sd for a in (train, *others)]


def _fit_predict(rep: np.ndarray, y: np.ndarray, train_idx: np.ndarray, query_idx: np.ndarray,
                 k: int, standardize: bool) -> np.ndarray:
    Xtr, Xq = rep[train_idx], rep[query_idx]
    if standardize:
        Xtr, Xq = standardize_like(Xtr, Xq)
    return knn_regress(Xtr, y[train_idx], Xq, k)


def select_representation(scores: Mapping[str, float], higher_is_better: bool = True) -> str:
    """Best-scoring representation; exact ties follow ``MOE_PRECEDENCE``."""
    if not scores:
        raise ValueError("no representation scores")
    order = [n for n in MOE_PRECEDENCE if n in scores] + sorted(n for n in scores if n not in MOE_PRECEDENCE)
    sign = -1.0 if higher_is_better else 1.0
    return min(order, key=lambda n: (sign * scores[n], order.index(n)))


def validation_scores(representations: Mapping[str, np.ndarray], store: DatasetStore, variable: str,
                      k: int = 3, metric: str = "pearson", standardize: bool = False) -> dict[str, float]:
    """Validation-split score of k-NN (fit on train) for every representation."""
    j = VARIABLES.index(variable)
    y = store.physical_matrix()[:, j]
    tr = store.split_indices("train")
    va = store.split_indices("validation")
    va = va[~np.isnan(y[va])]
    if va.size < 2:
        raise InsufficientDataError(f"{variable}: fewer than 2 validation targets")
    scores = {}
    for name, rep in representations.items():
        pred = _fit_predict(rep, y, tr, va, k, standardize)
        scores[name] = pearson(pred, y[va]).rho if metric == "pearson" else mae(pred, y[va])
    return scores


def moe_select(representations: Mapping[str, np.ndarray], store: DatasetStore, variable: str,
               k: int = 3, metric: str = "pearson", standardize: bool = False) -> str:
    """Representation with the best validation Pearson (or lowest MAE) for ``variable``."""
    if metric not in ("pearson", "mae"):
        raise ValueError(f"metric must be 'pearson' or 'mae', got {metric!r}")
    scores = validation_scores(representations, store, variable, k, metric, standardize)
    return select_representation(scores, higher_is_better=metric == "pearson")


def bootstrap_halfwidth(predictions: np.ndarray, truths: np.ndarray, n_resamples: int = 1000,
                        seed: int = 0) -> float:
    """Half-width of the percentile 95% bootstrap interval of the MAE."""
    err = np.abs(np.asarray(predictions) - np.asarray(truths))
    rng = make_rng(seed, 30)
    idx = rng.integers(0, err.size, size=(n_resamples, err.size))
    stats = err[idx].mean(axis=1)
    lo, hi = np.percentile(stats, [2.5, 97.5])
    return float((hi - lo) / 2)


@dataclass
class VariableResult:
    variable: str
    mean_baseline: float
    maes: dict[str, float]
    moe_choice: str
    moe_mae: float
    uncertainty: float
    improvement_pct: float | None
    validation_scores: dict[str, float]
    n_train: int
    n_test: int

    def row(self) -> dict:
        out = {"variable": self.variable, "mean_baseline": self.mean_baseline}
        for name in REPRESENTATIONS:
            out[name] = self.maes.get(name)
        out.update(moe_choice=self.moe_choice, moe_mae=self.moe_mae,
                   uncertainty=self.uncertainty, improvement_pct=self.improvement_pct)
        return out


@dataclass
class RegressionReport:
    results: list[VariableResult]
    skipped: dict[str, str] = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "params": self.params,
            "variables": [r.row() for r in self.results],
            "validation_scores": {r.variable: r.validation_scores for r in self.results},
            "sample_counts": {r.variable: {"train": r.n_train, "test": r.n_test} for r in self.results},
            "skipped": self.skipped,
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in self.results:
                row = r.row()
                w.writerow(["" if row[c] is None else row[c] for c in REPORT_COLUMNS])


def regression_report(representations: Mapping[str, np.ndarray], store: DatasetStore,
                      variables: Sequence[str] | None = None, k: int = 3,
                      bootstrap_n: int = 1000, seed: int = 0, moe_metric: str = "pearson",
                      standardize: bool = False) -> RegressionReport:
    """Test-split MAE per representation, mean baseline, MoE pick and improvement.

    Improvement is ``(best_pre - moe) / best_pre`` in percent, where
    ``best_pre`` is the lower test MAE of the pre-alignment representations.
    Variables that cannot be evaluated are listed in ``skipped``.
    """
    variables = list(store.present_variables() if variables is None else variables)
    P = store.physical_matrix()
    tr, va, te = (store.split_indices(s) for s in ("train", "validation", "test"))
    if te.size == 0:
        raise InsufficientDataError("test split is empty")
    report = RegressionReport([], params={"k": k, "bootstrap_n": bootstrap_n, "seed": seed,
                                          "moe_metric": moe_metric, "standardize": standardize,
                                          "representations": [n for n in REPRESENTATIONS if n in representations]})
    for var in variables:
        j = VARIABLES.index(var)
        y = P[:, j]
        te_v = te[~np.isnan(y[te])]
        va_v = va[~np.isnan(y[va])]
        n_train = int(np.sum(~np.isnan(y[tr])))
        try:
            if te_v.size == 0:
                raise InsufficientDataError("no test targets")
            if va_v.size == 0:
                raise InsufficientDataError("no validation targets")
            scores = validation_scores(representations, store, var, k, moe_metric, standardize)
            choice = select_representation(scores, higher_is_better=moe_metric == "pearson")
            maes, preds = {}, {}
            for name, rep in representations.items():
                preds[name] = _fit_predict(rep, y, tr, te_v, k, standardize)
                maes[name] = mae(preds[name], y[te_v])
        except InsufficientDataError as exc:
            report.skipped[var] = str(exc)
            logger.info("skipping %s: %s", var, exc)
            continue
        baseline = mae(np.full(te_v.size, y[va_v].mean()), y[te_v])
        pre = [maes[n] for n in PRE if n in maes]
        best_pre = min(pre) if pre else None
        moe_mae = maes[choice]
        improvement = None
        if best_pre:
            improvement = 100.0 * (best_pre - moe_mae) / best_pre
        report.results.append(VariableResult(
            variable=var, mean_baseline=baseline, maes=maes, moe_choice=choice, moe_mae=moe_mae,
            uncertainty=bootstrap_halfwidth(preds[choice], y[te_v], bootstrap_n, seed + j),
            improvement_pct=improvement, validation_scores=scores,
            n_train=n_train, n_test=int(te_v.size),
        ))
    return report
