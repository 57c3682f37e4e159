"""Loading, validating, persisting and splitting the paired dataset.

Binary embedding files ("XALN") are laid out as::

    b"XALN" | u32 version | u32 rows | u32 dim | rows*dim floats (LE, row-major)

Version 1 stores float32 and version 2 stores float64. Row identifiers live in
a sidecar ``<file>.ids.csv`` with header ``row,source_id``.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    FormatError,
    InsufficientDataError,
    NumericError,
    ShapeError,
    ValidationError,
)
from .numcore import make_rng

logger = logging.getLogger(__name__)

MAGIC = b"XALN"
HEADER = struct.Struct("<4sIII")
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}

SPECTRAL_DIM = 64
TEXT_DIM = 4608

VARIABLES = (
    "hard_hs", "hard_ms", "hard_hm",
    "var_prob_b", "var_index_b",
    "powlaw_gamma", "powlaw_nh", "powlaw_stat",
    "bb_kt", "bb_nh", "bb_stat",
    "brems_kt", "brems_nh", "brems_stat",
    "apec_kt", "apec_abund", "apec_z", "apec_nh", "apec_stat",
    "flux_significance_b",
)

SPLITS = ("train", "calibration", "validation", "test")
DEFAULT_FRACTIONS = (0.69, 0.01, 0.15, 0.15)


# ---------------------------------------------------------------------------
# Embedding files
# ---------------------------------------------------------------------------


def ids_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".ids.csv")


def write_xaln(path: str | Path, matrix: np.ndarray, ids: Sequence[str] | None = None,
               version: int = 1) -> None:
    """Write a matrix in XALN format, plus the id sidecar when ``ids`` is given."""
    if version not in DTYPES:
        raise ValueError(f"unknown XALN version {version}")
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got shape {matrix.shape}")
    rows, dim = matrix.shape
    payload = np.ascontiguousarray(matrix, dtype=DTYPES[version])
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, version, rows, dim))
        fh.write(payload.tobytes())
    if ids is not None:
        if len(ids) != rows:
            raise ShapeError(f"{len(ids)} ids for {rows} rows")
        with open(ids_path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "source_id"])
            for i, sid in enumerate(ids):
                w.writerow([i, sid])


def read_xaln(path: str | Path) -> np.ndarray:
    """Read an XALN matrix. The returned dtype is the on-disk dtype."""
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise FormatError(f"{path}: file too short for an XALN header")
    magic, version, rows, dim = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version not in DTYPES:
        raise FormatError(f"{path}: unsupported XALN version {version}")
    dtype = DTYPES[version]
    expected = HEADER.size + rows * dim * dtype.itemsize
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {rows}x{dim}, found {len(data)}")
    return np.frombuffer(data, dtype=dtype, offset=HEADER.size).reshape(rows, dim).copy()


def _read_ids_sidecar(path: Path, rows: int) -> list[str]:
    side = ids_path(path)
    if not side.exists():
        raise FormatError(f"{path}: missing id sidecar {side.name}")
    with open(side, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["row", "source_id"]:
            raise FormatError(f"{side}: header must be 'row,source_id', got {header}")
        ids = [None] * rows
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != 2:
                raise FormatError(f"{side}:{lineno}: expected 2 fields, got {len(rec)}")
            try:
                row = int(rec[0])
            except ValueError:
                raise FormatError(f"{side}:{lineno}: row index {rec[0]!r} is not an integer") from None
            if not 0 <= row < rows or ids[row] is not None:
                raise FormatError(f"{side}:{lineno}: invalid or repeated row index {row}")
            ids[row] = rec[1]
    if any(i is None for i in ids):
        raise FormatError(f"{side}: ids missing for some rows")
    return ids


def _check_rows(ids: list[str], matrix: np.ndarray, expected_dim: int | None,
                path: Path, line_offset: int | None) -> None:
    def where(i):
        return f"line {i + line_offset}" if line_offset is not None else f"row {i}"

    if expected_dim is not None and matrix.shape[1] != expected_dim:
        raise ShapeError(f"{path}: {where(0)} has {matrix.shape[1]} values, expected {expected_dim}")
    bad = np.flatnonzero(~np.all(np.isfinite(matrix), axis=1))
    if bad.size:
        raise NumericError(f"{path}: {where(int(bad[0]))} ({ids[bad[0]]}) contains NaN or Inf")
    seen = set()
    for i, sid in enumerate(ids):
        if sid in seen:
            raise ValidationError(f"{path}: duplicate source_id {sid!r} at {where(i)}")
        seen.add(sid)


def load_embeddings(path: str | Path, expected_dim: int | None = None) -> tuple[list[str], np.ndarray]:
    """Load ids and a float64 matrix from an XALN file or an embedding CSV.

    CSV files use the header ``source_id,v0,...,v{D-1}``; anything else is
    parsed as XALN.
    """
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _load_embedding_csv(path, expected_dim)
    matrix = read_xaln(path)
    ids = _read_ids_sidecar(path, matrix.shape[0])
    matrix = matrix.astype(np.float64)
    _check_rows(ids, matrix, expected_dim, path, None)
    return ids, matrix


def _load_embedding_csv(path: Path, expected_dim: int | None) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "source_id":
            raise FormatError(f"{path}:1: header must start with 'source_id'")
        dim = len(header) - 1
        if header[1:] != [f"v{i}" for i in range(dim)]:
            raise FormatError(f"{path}:1: value columns must be named v0..v{dim - 1}")
        if expected_dim is not None and dim != expected_dim:
            raise ShapeError(f"{path}:1: header declares {dim} values, expected {expected_dim}")
        ids, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) - 1 != dim:
                raise ShapeError(f"{path}:{lineno}: row has {len(rec) - 1} values, expected {dim}")
            try:
                rows.append([float(v) for v in rec[1:]])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric value") from None
            ids.append(rec[0])
    matrix = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    _check_rows(ids, matrix, expected_dim, path, 2)
    return ids, matrix


def write_embedding_csv(path: str | Path, ids: Sequence[str], matrix: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", *(f"v{i}" for i in range(matrix.shape[1]))])
        for sid, row in zip(ids, matrix):
            w.writerow([sid, *(repr(float(v)) for v in row)])


# ---------------------------------------------------------------------------
# Physical variables and splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhysicalRecord:
    source_id: str
    values: dict[str, float | None]

    def get(self, name: str) -> float | None:
        return self.values.get(name)


def load_physicals(path: str | Path) -> list[PhysicalRecord]:
    """Read the physical-variable CSV. Empty cells become ``None``."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "source_id":
            raise FormatError(f"{path}:1: header must start with 'source_id'")
        names = header[1:]
        unknown = [n for n in names if n not in VARIABLES]
        if unknown:
            raise FormatError(f"{path}:1: unknown variables {unknown}")
        records = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            values: dict[str, float | None] = {}
            for name, cell in zip(names, rec[1:]):
                cell = cell.strip()
                if not cell:
                    values[name] = None
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: {name} value {cell!r} is not a number") from None
                if not math.isfinite(v):
                    raise NumericError(f"{path}:{lineno}: {name} is not finite")
                values[name] = v
            records.append(PhysicalRecord(rec[0], values))
    return records


def write_physicals(path: str | Path, records: Iterable[PhysicalRecord],
                    variables: Sequence[str] = VARIABLES) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", *variables])
        for r in records:
            w.writerow([r.source_id, *("" if r.get(v) is None else repr(r.get(v)) for v in variables)])


def load_splits(path: str | Path) -> dict[str, str]:
    path = Path(path)
    out: dict[str, str] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["source_id", "split"]:
            raise FormatError(f"{path}:1: header must be 'source_id,split'")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != 2 or rec[1] not in SPLITS:
                raise FormatError(f"{path}:{lineno}: bad split row {rec}")
            if rec[0] in out:
                raise ValidationError(f"{path}:{lineno}: duplicate source_id {rec[0]!r}")
            out[rec[0]] = rec[1]
    return out


def write_splits(path: str | Path, splits: dict[str, str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "split"])
        for sid, label in splits.items():
            w.writerow([sid, label])


def load_classes(path: str | Path) -> dict[str, str]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["source_id", "class"]:
            raise FormatError(f"{path}:1: header must be 'source_id,class'")
        out = {}
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != 2:
                raise FormatError(f"{path}:{lineno}: expected 2 fields, got {len(rec)}")
            out[rec[0]] = rec[1]
    return out


def split_counts(n: int, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> tuple[int, ...]:
    """Floor each fraction of ``n``; the remainder goes to the first (train) split."""
    counts = [math.floor(f * n + 1e-9) for f in fractions]
    counts[0] += n - sum(counts)
    return tuple(counts)


def make_splits(ids: Sequence[str], seed: int,
                fractions: Sequence[float] = DEFAULT_FRACTIONS) -> dict[str, str]:
    """Seeded shuffle followed by contiguous slicing into the four splits."""
    n = len(ids)
    if n < 4:
        raise InsufficientDataError(f"need at least 4 sources to split, got {n}")
    if len(set(ids)) != n:
        raise ValidationError("ids must be unique")
    if len(fractions) != len(SPLITS) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be 4 values summing to 1, got {fractions}")
    order = make_rng(seed).permutation(n)
    counts = split_counts(n, fractions)
    labels = np.repeat(np.arange(len(SPLITS)), counts)
    out = {ids[j]: SPLITS[labels[pos]] for pos, j in enumerate(order)}
    return {sid: out[sid] for sid in ids}


# ---------------------------------------------------------------------------
# Dataset store
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmbeddingPair:
    source_id: str
    spectral_embedding: np.ndarray
    text_embedding: np.ndarray


@dataclass(frozen=True)
class DatasetStore:
    """Validated, read-only pairing of embeddings, physical variables and splits.

    ``spectral`` and ``text`` are row-aligned with ``ids``.
    """

    ids: tuple[str, ...]
    spectral: np.ndarray
    text: np.ndarray
    physicals: tuple[PhysicalRecord, ...]
    splits: dict[str, str]
    missing_physicals: tuple[str, ...] = ()
    _index: dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.spectral.setflags(write=False)
        self.text.setflags(write=False)
        self._index.update({sid: i for i, sid in enumerate(self.ids)})

    def __len__(self) -> int:
        return len(self.ids)

    def index_of(self, source_id: str) -> int:
        return self._index[source_id]

    def pair(self, i: int) -> EmbeddingPair:
        return EmbeddingPair(self.ids[i], self.spectral[i], self.text[i])

    @property
    def pairs(self) -> list[EmbeddingPair]:
        return [self.pair(i) for i in range(len(self))]

    def split_indices(self, label: str) -> np.ndarray:
        if label not in SPLITS:
            raise ValueError(f"unknown split {label!r}")
        return np.array([i for i, sid in enumerate(self.ids) if self.splits[sid] == label], dtype=np.int64)

    def physical_matrix(self, variables: Sequence[str] = VARIABLES) -> np.ndarray:
        """N x V matrix of physical values with NaN for missing entries."""
        out = np.full((len(self), len(variables)), np.nan)
        for rec in self.physicals:
            i = self._index[rec.source_id]
            for j, name in enumerate(variables):
                v = rec.get(name)
                if v is not None:
                    out[i, j] = v
        return out

    def present_variables(self) -> list[str]:
        """Table variables with at least one non-missing value, in schema order."""
        seen = {name for rec in self.physicals for name, v in rec.values.items() if v is not None}
        return [v for v in VARIABLES if v in seen]


def join_dataset(
    spectral: tuple[Sequence[str], np.ndarray],
    text: tuple[Sequence[str], np.ndarray],
    physicals: Sequence[PhysicalRecord],
    splits: dict[str, str],
) -> DatasetStore:
    """Align both embedding tables on source id and validate the result.

    The spectral table defines row order. Sources without a physical record
    are reported in ``missing_physicals`` (and logged), not rejected.
    """
    s_ids, s_mat = list(spectral[0]), np.asarray(spectral[1], dtype=np.float64)
    t_ids, t_mat = list(text[0]), np.asarray(text[1], dtype=np.float64)
    if not s_ids:
        raise ValidationError("dataset has no embedding pairs")
    for name, ids in (("spectral", s_ids), ("text", t_ids)):
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate source ids in {name} embeddings")
    if set(s_ids) != set(t_ids):
        only = sorted(set(s_ids) ^ set(t_ids))[:5]
        raise ValidationError(f"spectral and text ids differ, e.g. {only}")
    t_pos = {sid: i for i, sid in enumerate(t_ids)}
    t_mat = t_mat[[t_pos[sid] for sid in s_ids]]

    phys_ids = [r.source_id for r in physicals]
    if len(set(phys_ids)) != len(phys_ids):
        raise ValidationError("duplicate source ids in physical records")
    extra = set(phys_ids) - set(s_ids)
    if extra:
        raise ValidationError(f"physical records for unknown sources, e.g. {sorted(extra)[:5]}")
    unsplit = [sid for sid in s_ids if sid not in splits]
    if unsplit:
        raise ValidationError(f"{len(unsplit)} sources have no split label, e.g. {unsplit[:5]}")
    bad = {lab for lab in splits.values() if lab not in SPLITS}
    if bad:
        raise ValidationError(f"unknown split labels {sorted(bad)}")

    missing = tuple(sid for sid in s_ids if sid not in set(phys_ids))
    if missing:
        logger.info("%d sources have no physical record", len(missing))
    return DatasetStore(
        ids=tuple(s_ids),
        spectral=s_mat.copy(),
        text=t_mat.copy(),
        physicals=tuple(physicals),
        splits={sid: splits[sid] for sid in s_ids},
        missing_physicals=missing,
    )


def load_dataset(directory: str | Path, spectral_dim: int | None = SPECTRAL_DIM,
                 text_dim: int | None = TEXT_DIM, **overrides: str | Path | None) -> DatasetStore:
    """Load a dataset directory written by :func:`save_dataset`.

    Individual files may be redirected with ``spectral=``, ``text=``,
    ``physicals=`` and ``splits=`` keyword paths.
    """
    directory = Path(directory) if directory is not None else None
    paths = {}
    for key, default in DATASET_FILES.items():
        p = overrides.get(key)
        if p is None:
            if directory is None:
                raise ValueError(f"no path for {key}")
            p = directory / default
        paths[key] = Path(p)
    spectral = load_embeddings(paths["spectral"], spectral_dim)
    text = load_embeddings(paths["text"], text_dim)
    physicals = load_physicals(paths["physicals"]) if paths["physicals"].exists() else []
    splits = load_splits(paths["splits"])
    return join_dataset(spectral, text, physicals, splits)


DATASET_FILES = {
    "spectral": "spectral.xaln",
    "text": "text.xaln",
    "physicals": "physicals.csv",
    "splits": "splits.csv",
}


def save_dataset(store: DatasetStore, directory: str | Path, version: int = 2) -> list[Path]:
    """Write a store as XALN embeddings plus CSV physicals and splits."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = [directory / name for name in DATASET_FILES.values()]
    write_xaln(out[0], store.spectral, store.ids, version=version)
    write_xaln(out[1], store.text, store.ids, version=version)
    write_physicals(out[2], store.physicals)
    write_splits(out[3], store.splits)
    return [out[0], ids_path(out[0]), out[1], ids_path(out[1]), out[2], out[3]]


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

# Which latent coordinate drives each variable (modulo latent_dim) and the
# monotone transform applied to it. Variability variables are driven by the
# text-private factors instead, so only the text modality can predict them.
_SYNTH_RECIPES = {
    "hard_hs": (0, "tanh"), "hard_ms": (1, "tanh"), "hard_hm": (2, "tanh"),
    "var_prob_b": ("private", 0), "var_index_b": ("private", 1),
    "powlaw_gamma": (3, "linear"), "powlaw_nh": (4, "exp"), "powlaw_stat": (5, "linear"),
    "bb_kt": (6, "exp"), "bb_nh": (7, "exp"), "bb_stat": (5, "square_shift"),
    "brems_kt": (0, "exp"), "brems_nh": (4, "linear"), "brems_stat": (1, "linear"),
    "apec_kt": (6, "linear"), "apec_abund": (2, "exp"), "apec_z": (3, "tanh"),
    "apec_nh": (7, "linear"), "apec_stat": (1, "square_shift"),
    "flux_significance_b": (3, "exp"),
}

SYNTH_PRIVATE_DIM = 2


def _transform(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "linear":
        return z
    if kind == "tanh":
        return np.tanh(0.8 * z)
    if kind == "exp":
        return np.exp(0.3 * z)
    if kind == "square_shift":
        return z + 0.15 * z * z
    raise ValueError(kind)


def synth_dataset(n: int, latent_dim: int = 8, noise_sigma: float = 0.1, seed: int = 0,
                  spectral_dim: int = SPECTRAL_DIM, text_dim: int = TEXT_DIM,
                  missing_rate: float = 0.0,
                  fractions: Sequence[float] = DEFAULT_FRACTIONS) -> DatasetStore:
    """Generate a paired dataset with a known shared latent.

    Each source draws ``z ~ N(0, I_latent_dim)`` and a text-private factor
    ``u ~ N(0, I_2)``. Embeddings are::

        spectral = A z + noise_sigma * e1
        text     = B z + noise_sigma * (C u + e2)

    with fixed seeded Gaussian ``A``, ``B``, ``C`` scaled to unit coordinate
    variance. Physical variables are monotone functions of one latent
    coordinate (or of ``u`` for the two variability variables) plus
    ``noise_sigma`` Gaussian noise. With ``noise_sigma = 0`` both embeddings
    are exact linear images of ``z``.
    """
    if n < 8:
        raise InsufficientDataError(f"synth_dataset needs n >= 8, got {n}")
    if not 1 <= latent_dim <= min(64, spectral_dim):
        raise ValueError(f"latent_dim must be in [1, {min(64, spectral_dim)}], got {latent_dim}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    if not 0.0 <= missing_rate < 1.0:
        raise ValueError("missing_rate must be in [0, 1)")

    mix_rng = make_rng(seed, 0)
    A = mix_rng.standard_normal((spectral_dim, latent_dim)) / math.sqrt(latent_dim)
    B = mix_rng.standard_normal((text_dim, latent_dim)) / math.sqrt(latent_dim)
    C = mix_rng.standard_normal((text_dim, SYNTH_PRIVATE_DIM)) / math.sqrt(SYNTH_PRIVATE_DIM)
    scales = np.exp(mix_rng.uniform(-1.0, 1.5, size=len(VARIABLES)))

    rng = make_rng(seed, 1)
    z = rng.standard_normal((n, latent_dim))
    u = rng.standard_normal((n, SYNTH_PRIVATE_DIM))
    spectral = z @ A.T + noise_sigma * rng.standard_normal((n, spectral_dim))
    text = z @ B.T + noise_sigma * (u @ C.T + rng.standard_normal((n, text_dim)))

    values = np.empty((n, len(VARIABLES)))
    for j, name in enumerate(VARIABLES):
        a, b = _SYNTH_RECIPES[name]
        driver = u[:, b] if a == "private" else _transform(b, z[:, a % latent_dim])
        driver = (driver - driver.mean()) / driver.std()
        values[:, j] = scales[j] * (driver + noise_sigma * rng.standard_normal(n))
    missing = rng.random(values.shape) < missing_rate

    ids = [f"SYN{i:06d}" for i in range(n)]
    physicals = [
        PhysicalRecord(sid, {name: (None if missing[i, j] else float(values[i, j]))
                             for j, name in enumerate(VARIABLES)})
        for i, sid in enumerate(ids)
    ]
    splits = make_splits(ids, seed, fractions)
    return join_dataset((ids, spectral), (ids, text), physicals, splits)


def synth_driver(name: str, latent_dim: int) -> int | None:
    """Latent coordinate that generates ``name`` in :func:`synth_dataset` (None if text-private)."""
    a, _ = _SYNTH_RECIPES[name]
    return None if a == "private" else a % latent_dim
