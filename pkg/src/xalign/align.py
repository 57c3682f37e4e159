"""Contrastive alignment of spectral and text embeddings.

Two projection heads map each modality into a shared space. Training
minimizes InfoNCE over in-batch negatives, with the matched text/spectrum
pair as the positive class, and early-stops on validation top-1 retrieval.
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .errors import ConfigError, FormatError, NumericError, ShapeError, TrainingError
from .ingest import SPECTRAL_DIM, TEXT_DIM, DatasetStore, read_xaln, write_xaln
from .numcore import AdamState, MlpSpec, Params, adam_step, init_params, make_rng, mlp_backward, mlp_forward
from .retrieval import ranks_from_similarity, recall_at_percent

logger = logging.getLogger(__name__)

DIRECTIONS = ("text_to_data", "symmetric")
DEFAULT_TEMPERATURE_GRID = (0.01, 0.05, 0.1, 0.2, 0.5, 1.0)


# ---------------------------------------------------------------------------
# Similarity and loss
# ---------------------------------------------------------------------------


def cosine_sim(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"vectors have shapes {x.shape} and {y.shape}")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(x @ y / (nx * ny), -1.0, 1.0))


def _unit_rows(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"row {int(np.argmin(norms))} is a zero vector; cosine similarity is undefined")
    return X / norms[:, None], norms


def cosine_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities between the rows of A and the rows of B."""
    a, _ = _unit_rows(np.asarray(A, dtype=np.float64))
    b, _ = _unit_rows(np.asarray(B, dtype=np.float64))
    return a @ b.T


def _row_nll(logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean of -log softmax(row)[i, i] and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1)
    loss = float(np.mean(np.log(denom) - np.diag(shifted)))
    grad = exp / denom[:, None]
    grad[np.arange(n), np.arange(n)] -= 1.0
    return loss, grad / n


def info_nce_from_similarity(sim: np.ndarray, temperature: float,
                             direction: str = "text_to_data") -> tuple[float, np.ndarray]:
    """InfoNCE on a precomputed N x N similarity matrix (rows = texts).

    Returns the loss and its gradient with respect to ``sim``.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1] or sim.shape[0] < 2:
        raise ShapeError(f"similarity matrix must be square with N >= 2, got {sim.shape}")
    if not np.all(np.isfinite(sim)):
        raise NumericError("similarity matrix contains non-finite values")
    logits = sim / temperature
    loss, g = _row_nll(logits)
    if direction == "symmetric":
        loss_t, g_t = _row_nll(logits.T)
        loss = 0.5 * (loss + loss_t)
        g = 0.5 * (g + g_t.T)
    return loss, g / temperature


def info_nce(texts: np.ndarray, data: np.ndarray, temperature: float,
             direction: str = "text_to_data") -> tuple[float, np.ndarray, np.ndarray]:
    """InfoNCE between projected texts and projected data (spectra).

    Row ``i`` of each matrix is a matched pair; the other rows of the batch
    act as negatives. Returns ``(loss, dL/dtexts, dL/ddata)``.
    """
    T = np.asarray(texts, dtype=np.float64)
    D = np.asarray(data, dtype=np.float64)
    if T.shape != D.shape or T.ndim != 2:
        raise ShapeError(f"projections must share an N x d shape, got {T.shape} and {D.shape}")
    t_hat, t_norm = _unit_rows(T)
    d_hat, d_norm = _unit_rows(D)
    sim = t_hat @ d_hat.T
    loss, dsim = info_nce_from_similarity(sim, temperature, direction)
    dt_hat = dsim @ d_hat
    dd_hat = dsim.T @ t_hat
    # d(x/|x|) = (I - x̂x̂ᵀ)/|x|
    dT = (dt_hat - t_hat * np.sum(dt_hat * t_hat, axis=1, keepdims=True)) / t_norm[:, None]
    dD = (dd_hat - d_hat * np.sum(dd_hat * d_hat, axis=1, keepdims=True)) / d_norm[:, None]
    return loss, dT, dD


# ---------------------------------------------------------------------------
# Configuration and model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AlignmentConfig:
    shared_dim: int = 64
    spectral_hidden: tuple[int, ...] = (256,)
    text_hidden: tuple[int, ...] = (256,)
    lr: float = 1e-3
    dropout: float = 0.1
    batch_size: int = 64
    max_epochs: int = 150
    patience: int = 10
    temperature: float = 0.1
    temperature_grid: tuple[float, ...] = DEFAULT_TEMPERATURE_GRID
    seed: int = 0
    loss_direction: str = "text_to_data"
    spectral_dim: int = SPECTRAL_DIM
    text_dim: int = TEXT_DIM

    def __post_init__(self):
        for name in ("spectral_hidden", "text_hidden", "temperature_grid"):
            value = getattr(self, name)
            if isinstance(value, (int, float)):
                value = (value,)
            cast = float if name == "temperature_grid" else int
            object.__setattr__(self, name, tuple(cast(v) for v in value))

    def validate(self) -> AlignmentConfig:
        if not 16 <= self.shared_dim <= 128:
            raise ConfigError(f"shared_dim must be in [16, 128], got {self.shared_dim}")
        for h in (*self.spectral_hidden, *self.text_hidden):
            if not 16 <= h <= 1024:
                raise ConfigError(f"hidden dims must be in [16, 1024], got {h}")
        if not self.spectral_hidden or not self.text_hidden:
            raise ConfigError("each projection head needs at least one hidden layer")
        if not 1e-4 <= self.lr <= 1e-3:
            raise ConfigError(f"lr must be in [1e-4, 1e-3], got {self.lr}")
        if not (self.dropout == 0.0 or 0.1 <= self.dropout <= 0.5):
            raise ConfigError(f"dropout must be 0 or in [0.1, 0.5], got {self.dropout}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("max_epochs must be >= 0 and patience >= 1")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not self.temperature_grid or min(self.temperature_grid) <= 0:
            raise ConfigError("temperature_grid must be non-empty with positive values")
        if self.loss_direction not in DIRECTIONS:
            raise ConfigError(f"loss_direction must be one of {DIRECTIONS}")
        return self

    @property
    def spectral_head(self) -> MlpSpec:
        return MlpSpec(self.spectral_dim, self.spectral_hidden, self.shared_dim, self.dropout)

    @property
    def text_head(self) -> MlpSpec:
        return MlpSpec(self.text_dim, self.text_hidden, self.shared_dim, self.dropout)

    def replace(self, **changes) -> AlignmentConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> AlignmentConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class AlignmentModel:
    config: AlignmentConfig
    spectral_params: Params
    text_params: Params
    temperature: float

    @property
    def shared_dim(self) -> int:
        return self.config.shared_dim

    def project_spectra(self, X: np.ndarray) -> np.ndarray:
        out, _ = mlp_forward(self.config.spectral_head, self.spectral_params, np.atleast_2d(X))
        return out

    def project_texts(self, X: np.ndarray) -> np.ndarray:
        out, _ = mlp_forward(self.config.text_head, self.text_params, np.atleast_2d(X))
        return out

    def similarity(self, spectra: np.ndarray, texts: np.ndarray) -> np.ndarray:
        """Cosine similarity matrix with spectra as rows and texts as columns."""
        return cosine_matrix(self.project_spectra(spectra), self.project_texts(texts))

    def all_params(self) -> Params:
        p = {f"spectral.{k}": v for k, v in self.spectral_params.items()}
        p.update({f"text.{k}": v for k, v in self.text_params.items()})
        return p


def init_model(config: AlignmentConfig, seed: int | None = None) -> AlignmentModel:
    seed = config.seed if seed is None else seed
    return AlignmentModel(
        config,
        init_params(config.spectral_head, make_rng(seed, 10)),
        init_params(config.text_head, make_rng(seed, 11)),
        config.temperature,
    )


def _split_params(params: Params) -> tuple[Params, Params]:
    spec = {k[len("spectral."):]: v for k, v in params.items() if k.startswith("spectral.")}
    text = {k[len("text."):]: v for k, v in params.items() if k.startswith("text.")}
    return spec, text


def alignment_loss_and_grads(model: AlignmentModel, spectra: np.ndarray, texts: np.ndarray,
                             rng: np.random.Generator | None = None,
                             mode: str = "train") -> tuple[float, Params]:
    """Batch InfoNCE through both heads; gradients keyed like ``model.all_params()``."""
    cfg = model.config
    d_out, d_cache = mlp_forward(cfg.spectral_head, model.spectral_params, spectra, mode, rng)
    t_out, t_cache = mlp_forward(cfg.text_head, model.text_params, texts, mode, rng)
    loss, dT, dD = info_nce(t_out, d_out, model.temperature, cfg.loss_direction)
    g_spec, _ = mlp_backward(d_cache, dD)
    g_text, _ = mlp_backward(t_cache, dT)
    grads = {f"spectral.{k}": v for k, v in g_spec.items()}
    grads.update({f"text.{k}": v for k, v in g_text.items()})
    return loss, grads


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    val_recall: list[float] = field(default_factory=list)
    initial_val_recall: float = 0.0
    best_epoch: int = 0
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _check_embeddings(config: AlignmentConfig, spectral: np.ndarray, text: np.ndarray) -> None:
    if spectral.shape[1] != config.spectral_dim:
        raise ConfigError(f"spectral embeddings are {spectral.shape[1]}-d, config expects {config.spectral_dim}")
    if text.shape[1] != config.text_dim:
        raise ConfigError(f"text embeddings are {text.shape[1]}-d, config expects {config.text_dim}")


def train_alignment(config: AlignmentConfig, store: DatasetStore,
                    spectral: np.ndarray | None = None,
                    text: np.ndarray | None = None) -> tuple[AlignmentModel, TrainLog]:
    """Mini-batch contrastive training with early stopping.

    ``spectral``/``text`` default to the store's embeddings and must be
    row-aligned with ``store.ids``. The returned model carries the parameters
    of the epoch with the best validation top-1 recall (epoch 0 being the
    initialization); later epochs must improve strictly to replace it.
    """
    config.validate()
    spectral = store.spectral if spectral is None else np.asarray(spectral, dtype=np.float64)
    text = store.text if text is None else np.asarray(text, dtype=np.float64)
    _check_embeddings(config, spectral, text)
    train_idx = store.split_indices("train")
    val_idx = store.split_indices("validation")
    if train_idx.size < 2:
        raise ConfigError("training split needs at least 2 sources")
    if val_idx.size < 1:
        raise ConfigError("validation split is empty")

    model = init_model(config)
    params = model.all_params()
    state = AdamState.for_params(params, config.lr)
    shuffle_rng = make_rng(config.seed, 20)
    dropout_rng = make_rng(config.seed, 21)
    xs_val, xt_val = spectral[val_idx], text[val_idx]

    def val_recall(p: Params) -> float:
        sp, tp = _split_params(p)
        m = AlignmentModel(config, sp, tp, model.temperature)
        return float(np.mean(ranks_from_similarity(m.similarity(xs_val, xt_val)) == 1))

    log = TrainLog()
    best = val_recall(params)
    log.initial_val_recall = best
    best_params = params
    since_best = 0
    bs = min(config.batch_size, train_idx.size)
    for epoch in range(1, config.max_epochs + 1):
        order = train_idx[shuffle_rng.permutation(train_idx.size)]
        batches = [order[i:i + bs] for i in range(0, order.size, bs)]
        if len(batches) > 1 and batches[-1].size < 2:
            batches[-2] = np.concatenate(batches[-2:])
            batches.pop()
        losses = []
        for b in batches:
            sp, tp = _split_params(params)
            step_model = AlignmentModel(config, sp, tp, model.temperature)
            loss, grads = alignment_loss_and_grads(step_model, spectral[b], text[b], dropout_rng)
            if not np.isfinite(loss):
                raise TrainingError(f"loss became non-finite at epoch {epoch}", epoch)
            try:
                params, state = adam_step(state, params, grads)
            except NumericError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}", epoch) from exc
            losses.append(loss * b.size)
        log.train_loss.append(float(sum(losses) / order.size))
        recall = val_recall(params)
        log.val_recall.append(recall)
        if recall > best:
            best, best_params, since_best = recall, params, 0
            log.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= config.patience:
                log.stopped_early = True
                logger.debug("early stop at epoch %d (best %d)", epoch, log.best_epoch)
                break
    sp, tp = _split_params(best_params)
    return AlignmentModel(config, sp, tp, config.temperature), log


# ---------------------------------------------------------------------------
# Temperature tuning
# ---------------------------------------------------------------------------


def select_temperature(temperatures: Sequence[float], recalls: Sequence[float],
                       losses: Sequence[float] | None = None) -> float:
    """Pick the temperature with the highest recall.

    Ties go to the lowest loss when losses are given, then to the smallest
    temperature.
    """
    if not temperatures:
        raise ValueError("temperature grid is empty")
    if len(recalls) != len(temperatures) or (losses is not None and len(losses) != len(temperatures)):
        raise ValueError("one recall (and loss) per temperature is required")

    def key(i):
        loss = losses[i] if losses is not None else 0.0
        return (-recalls[i], loss, temperatures[i])

    return float(temperatures[min(range(len(temperatures)), key=key)])


@dataclass
class TemperatureResult:
    temperature: float
    table: list[dict]
    model: AlignmentModel


def tune_temperature(model: AlignmentModel, store: DatasetStore,
                     temperature_grid: Sequence[float] | None = None,
                     retrain: bool = False,
                     spectral: np.ndarray | None = None,
                     text: np.ndarray | None = None) -> TemperatureResult:
    """Choose the InfoNCE temperature on the calibration split.

    Without ``retrain`` the trained heads are re-scored at each temperature.
    Cosine retrieval does not depend on the temperature, so recall ties are
    then broken by calibration InfoNCE loss. With ``retrain`` a fresh model is
    trained per temperature and the winner's model is returned.
    """
    grid = tuple(model.config.temperature_grid if temperature_grid is None else temperature_grid)
    if not grid:
        raise ValueError("temperature grid is empty")
    if min(grid) <= 0:
        raise ValueError("temperatures must be positive")
    spectral = store.spectral if spectral is None else spectral
    text = store.text if text is None else text
    cal = store.split_indices("calibration")
    if cal.size == 0:
        raise ConfigError("calibration split is empty")

    table, models = [], []
    for tau in grid:
        m = model
        if retrain:
            m, _ = train_alignment(model.config.replace(temperature=tau), store, spectral, text)
        m = dataclasses.replace(m, temperature=float(tau))
        ps, pt = m.project_spectra(spectral[cal]), m.project_texts(text[cal])
        recall = float(np.mean(ranks_from_similarity(cosine_matrix(ps, pt)) == 1))
        loss = None
        if cal.size >= 2:
            loss, _, _ = info_nce(pt, ps, tau, m.config.loss_direction)
        table.append({"temperature": float(tau), "calibration_top1": recall, "calibration_loss": loss})
        models.append(m)
    losses = None if table[0]["calibration_loss"] is None else [r["calibration_loss"] for r in table]
    best = select_temperature(list(grid), [r["calibration_top1"] for r in table], losses)
    chosen = models[list(grid).index(best)]
    return TemperatureResult(best, table, chosen)


# ---------------------------------------------------------------------------
# Grid search and ensembles
# ---------------------------------------------------------------------------

GRID_KEYS = ("lr", "shared_dim", "dropout", "hidden_dims")


def expand_grid(space: dict[str, Sequence], base: AlignmentConfig) -> list[AlignmentConfig]:
    """Cartesian product of ``space`` applied on top of ``base``, in key order lr, shared_dim, dropout, hidden_dims."""
    unknown = set(space) - set(GRID_KEYS)
    if unknown:
        raise ConfigError(f"unknown grid keys {sorted(unknown)}")
    keys = [k for k in GRID_KEYS if k in space]
    values = [list(space[k]) for k in keys]
    if any(len(v) == 0 for v in values):
        raise ConfigError("every grid axis needs at least one value")
    configs = []
    for combo in itertools.product(*values):
        changes = {}
        for k, v in zip(keys, combo):
            if k == "hidden_dims":
                hidden = (v,) if isinstance(v, int) else tuple(v)
                changes["spectral_hidden"] = hidden
                changes["text_hidden"] = hidden
            else:
                changes[k] = v
        configs.append(base.replace(**changes))
    return configs


def derive_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([int(master), int(index)]).generate_state(1, np.uint32)[0])


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("XALIGN_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class GridEntry:
    index: int
    config: AlignmentConfig
    val_recall_at_1pct: float
    val_top1: float
    log: TrainLog
    model: AlignmentModel

    def summary(self) -> dict:
        return {
            "index": self.index,
            "config": self.config.to_dict(),
            "val_recall_at_1pct": self.val_recall_at_1pct,
            "val_top1": self.val_top1,
            "best_epoch": self.log.best_epoch,
            "epochs_run": len(self.log.train_loss),
        }


@dataclass
class GridResult:
    ranked: list[GridEntry]
    failed: list[dict]

    @property
    def best(self) -> GridEntry:
        if not self.ranked:
            raise TrainingError("every grid configuration failed")
        return self.ranked[0]

    def leaderboard(self) -> dict:
        return {"ranked": [e.summary() for e in self.ranked], "failed": self.failed}


def evaluate_split(model: AlignmentModel, store: DatasetStore, split: str,
                   spectral: np.ndarray | None = None, text: np.ndarray | None = None) -> np.ndarray:
    spectral = store.spectral if spectral is None else spectral
    text = store.text if text is None else text
    idx = store.split_indices(split)
    return model.similarity(spectral[idx], text[idx])


def grid_search(space: dict[str, Sequence], store: DatasetStore, base: AlignmentConfig | None = None,
                seed: int = 0, spectral: np.ndarray | None = None, text: np.ndarray | None = None,
                workers: int | None = None) -> GridResult:
    """Train every configuration of the grid and rank by validation Recall@1%.

    Configuration ``i`` trains with a seed derived from ``(seed, i)``, so the
    outcome does not depend on the worker count. Configurations that raise a
    training or configuration error are listed in ``failed``.
    """
    base = base or AlignmentConfig()
    configs = [c.replace(seed=derive_seed(seed, i)) for i, c in enumerate(expand_grid(space, base))]

    def run(i: int):
        cfg = configs[i]
        try:
            model, log = train_alignment(cfg, store, spectral, text)
        except (TrainingError, ConfigError, NumericError) as exc:
            logger.warning("grid config %d failed: %s", i, exc)
            return i, None, str(exc)
        ranks = ranks_from_similarity(evaluate_split(model, store, "validation", spectral, text))
        r1 = recall_at_percent(ranks, 1, ranks.size)
        return i, GridEntry(i, cfg, r1, float(np.mean(ranks == 1)), log, model), None

    n_workers = workers or thread_count()
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            results = list(pool.map(run, range(len(configs))))
    else:
        results = [run(i) for i in range(len(configs))]

    entries = [e for _, e, _ in results if e is not None]
    failed = [{"index": i, "config": configs[i].to_dict(), "error": err} for i, e, err in results if e is None]
    entries.sort(key=lambda e: (-e.val_recall_at_1pct, -e.val_top1, e.index))
    return GridResult(entries, failed)


def ensemble_similarity(models: Sequence[AlignmentModel], spectra: np.ndarray, texts: np.ndarray) -> np.ndarray:
    """Elementwise mean of each model's spectra x texts cosine-similarity matrix."""
    if not models:
        raise ValueError("ensemble needs at least one model")
    total = None
    for m in models:
        s = m.similarity(spectra, texts)
        total = s if total is None else total + s
    return total / len(models)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = 1


def blob_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".params.xaln")


def save_checkpoint(model: AlignmentModel, path: str | Path) -> list[Path]:
    """Write a JSON header at ``path`` and a float64 XALN parameter blob beside it."""
    path = Path(path)
    params = model.all_params()
    blocks, offset = [], 0
    for name, arr in params.items():
        blocks.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    flat = np.concatenate([a.ravel() for a in params.values()])[None, :]
    blob = blob_path(path)
    write_xaln(blob, flat, version=2)
    header = {
        "format": CHECKPOINT_FORMAT,
        "xalign_version": __version__,
        "config": model.config.to_dict(),
        "temperature": model.temperature,
        "shared_dim": model.shared_dim,
        "blocks": blocks,
        "blob": blob.name,
        "blob_sha256": hashlib.sha256(blob.read_bytes()).hexdigest(),
    }
    path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return [path, blob]


def load_checkpoint(path: str | Path) -> AlignmentModel:
    path = Path(path)
    try:
        header = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint header ({exc})") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: unsupported checkpoint format {header.get('format')}")
    blob = path.with_name(header["blob"])
    raw = blob.read_bytes()
    if hashlib.sha256(raw).hexdigest() != header["blob_sha256"]:
        raise FormatError(f"{blob}: parameter blob does not match its checksum")
    flat = read_xaln(blob).astype(np.float64).ravel()
    params = {}
    for b in header["blocks"]:
        size = int(np.prod(b["shape"])) if b["shape"] else 1
        params[b["name"]] = flat[b["offset"]:b["offset"] + size].reshape(b["shape"]).copy()
    config = AlignmentConfig.from_dict(header["config"])
    sp, tp = _split_params(params)
    return AlignmentModel(config, sp, tp, float(header["temperature"]))
