"""Glue between a trained alignment model and the downstream evaluations."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .align import AlignmentModel, ensemble_similarity
from .errors import ConfigError
from .ingest import DatasetStore, write_xaln
from .regress import build_representations
from .retrieval import RetrievalReport, recall_curve, retrieval_report


def check_compatible(model: AlignmentModel, store: DatasetStore) -> None:
    cfg = model.config
    if store.spectral.shape[1] != cfg.spectral_dim:
        raise ConfigError(f"spectral dimension mismatch: checkpoint expects {cfg.spectral_dim}, "
                          f"data has {store.spectral.shape[1]}")
    if store.text.shape[1] != cfg.text_dim:
        raise ConfigError(f"text dimension mismatch: checkpoint expects {cfg.text_dim}, "
                          f"data has {store.text.shape[1]}")


def model_representations(model: AlignmentModel, store: DatasetStore) -> dict[str, np.ndarray]:
    """All five representations for every source, row-aligned with ``store.ids``."""
    check_compatible(model, store)
    return build_representations(store, model.project_spectra(store.spectral), model.project_texts(store.text))


def evaluate_retrieval(models: Sequence[AlignmentModel], store: DatasetStore, split: str = "test",
                       k_grid: Sequence[float] | None = None) -> tuple[RetrievalReport, list]:
    for m in models:
        check_compatible(m, store)
    idx = store.split_indices(split)
    if idx.size == 0:
        raise ConfigError(f"split {split!r} is empty")
    sim = ensemble_similarity(models, store.spectral[idx], store.text[idx])
    report = retrieval_report(sim)
    curve = recall_curve(report.ranks, report.candidate_count, *(() if k_grid is None else (k_grid,)))
    return report, curve


def select_rows(store: DatasetStore, split: str) -> np.ndarray:
    if split == "all":
        return np.arange(len(store))
    return store.split_indices(split)


def export_latents(model: AlignmentModel, store: DatasetStore, out_dir: str | Path,
                   split: str = "all") -> tuple[list[Path], dict]:
    """Write pre/post-alignment representations as float32 XALN files.

    ``pre_both`` is the raw concatenation of both input embeddings, so the
    summary records the compression from ``pre_both`` to ``post_both``.
    Post-alignment vectors are stored unnormalized.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = select_rows(store, split)
    reps = model_representations(model, store)
    reps["pre_both"] = np.hstack([store.spectral, store.text])
    ids = [store.ids[i] for i in rows]
    written = []
    dims = {}
    for name in ("pre_spectra", "pre_text", "pre_both", "post_spectra", "post_text", "post_both"):
        path = out_dir / f"{name}.xaln"
        write_xaln(path, reps[name][rows], ids, version=1)
        written += [path, path.with_name(path.name + ".ids.csv")]
        dims[name] = int(reps[name].shape[1])
    summary = {
        "split": split,
        "rows": int(rows.size),
        "dims": dims,
        "normalized": False,
        "compression": {
            "input_dim": dims["pre_both"],
            "shared_dim": dims["post_both"],
            "reduction_pct": 100.0 * (1 - dims["post_both"] / dims["pre_both"]),
        },
    }
    meta = out_dir / "latents.json"
    meta.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    written.append(meta)
    return written, summary
