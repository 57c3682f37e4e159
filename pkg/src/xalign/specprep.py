"""Spectrum preparation: event binning, min-max normalization, and a small
fully-connected autoencoder that compresses 400-bin spectra to 64-d vectors."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, InsufficientDataError, ShapeError, TrainingError
from .numcore import AdamState, MlpSpec, Params, adam_step, init_params, make_rng, mlp_backward, mlp_forward

logger = logging.getLogger(__name__)

N_BINS = 400
E_MIN = 0.5
E_MAX = 8.0


@dataclass(frozen=True)
class BinnedSpectrum:
    bins: np.ndarray
    discarded: int = 0
    empty: bool = False


@dataclass(frozen=True)
class NormalizedSpectrum:
    bins: np.ndarray
    degenerate: bool = False


def bin_edges(n_bins: int = N_BINS, spacing: str = "linear") -> np.ndarray:
    if spacing == "linear":
        return np.linspace(E_MIN, E_MAX, n_bins + 1)
    if spacing == "log":
        return np.geomspace(E_MIN, E_MAX, n_bins + 1)
    raise ValueError(f"spacing must be 'linear' or 'log', got {spacing!r}")


def bin_events(energies: Sequence[float], exposure_time: float, n_bins: int = N_BINS,
               spacing: str = "linear") -> BinnedSpectrum:
    """Histogram photon energies (keV) into a count-rate spectrum.

    Bins are lower-inclusive and upper-exclusive, except the last one which
    also takes events at exactly 8.0 keV. Each bin holds
    ``count / (exposure_time * bin_width)``. Out-of-range events are dropped
    and counted in ``discarded``.
    """
    if not exposure_time > 0:
        raise ValueError(f"exposure_time must be positive, got {exposure_time}")
    e = np.asarray(energies, dtype=np.float64).ravel()
    edges = bin_edges(n_bins, spacing)
    in_range = (e >= E_MIN) & (e <= E_MAX)
    kept = e[in_range]
    idx = np.searchsorted(edges, kept, side="right") - 1
    idx = np.minimum(idx, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins).astype(np.float64)
    rates = counts / (exposure_time * np.diff(edges))
    if e.size == 0:
        logger.warning("empty event list; returning an all-zero spectrum")
    return BinnedSpectrum(rates, discarded=int(e.size - kept.size), empty=e.size == 0)


def minmax_normalize(spectrum: np.ndarray) -> NormalizedSpectrum:
    """Rescale to [0, 1]. Constant input yields zeros and ``degenerate=True``."""
    x = np.asarray(spectrum, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return NormalizedSpectrum(np.zeros_like(x), degenerate=True)
    return NormalizedSpectrum((x - lo) / (hi - lo))


def reconstruction_mae(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.abs(np.asarray(x) - np.asarray(y))))


@dataclass
class Autoencoder:
    encoder_spec: MlpSpec
    decoder_spec: MlpSpec
    encoder: Params
    decoder: Params
    loss_curve: list[float] = field(default_factory=list)

    @property
    def bottleneck(self) -> int:
        return self.encoder_spec.output_dim


def train_autoencoder(spectra: np.ndarray, bottleneck: int = 64, hidden_dims: Sequence[int] = (256,),
                      epochs: int = 200, lr: float = 1e-3, batch_size: int = 64,
                      seed: int = 0) -> Autoencoder:
    """Fit encoder ``n_bins -> hidden -> bottleneck`` and its mirror decoder.

    The objective is mean absolute reconstruction error, optimized with Adam.
    ``loss_curve[e]`` is the full-data MAE measured after epoch ``e``, with
    ``loss_curve[0]`` the untrained value.
    """
    X = np.asarray(spectra, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InsufficientDataError("train_autoencoder needs at least 2 spectra in a 2-d array")
    n, dim = X.shape
    if not 0 < bottleneck < dim:
        raise ValueError(f"bottleneck must be in (0, {dim}), got {bottleneck}")

    enc_spec = MlpSpec(dim, tuple(hidden_dims), bottleneck)
    dec_spec = MlpSpec(bottleneck, tuple(reversed(tuple(hidden_dims))), dim)
    params = {f"enc.{k}": v for k, v in init_params(enc_spec, make_rng(seed, 0)).items()}
    params.update({f"dec.{k}": v for k, v in init_params(dec_spec, make_rng(seed, 1)).items()})
    state = AdamState.for_params(params, lr)
    shuffle_rng = make_rng(seed, 2)

    def split(p):
        return ({k[4:]: v for k, v in p.items() if k.startswith("enc.")},
                {k[4:]: v for k, v in p.items() if k.startswith("dec.")})

    def full_mae(p):
        e, d = split(p)
        z, _ = mlp_forward(enc_spec, e, X)
        y, _ = mlp_forward(dec_spec, d, z)
        return reconstruction_mae(y, X)

    curve = [full_mae(params)]
    for epoch in range(1, epochs + 1):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, batch_size):
            xb = X[order[start:start + batch_size]]
            e, d = split(params)
            z, enc_cache = mlp_forward(enc_spec, e, xb, mode="train")
            y, dec_cache = mlp_forward(dec_spec, d, z, mode="train")
            g = np.sign(y - xb) / y.size
            dgrads, dz = mlp_backward(dec_cache, g)
            egrads, _ = mlp_backward(enc_cache, dz)
            grads = {f"enc.{k}": v for k, v in egrads.items()}
            grads.update({f"dec.{k}": v for k, v in dgrads.items()})
            params, state = adam_step(state, params, grads)
        loss = full_mae(params)
        if not np.isfinite(loss):
            raise TrainingError(f"autoencoder loss became non-finite at epoch {epoch}", epoch)
        curve.append(loss)
    enc, dec = split(params)
    return Autoencoder(enc_spec, dec_spec, enc, dec, curve)


def encode_spectra(model: Autoencoder, spectra: np.ndarray) -> np.ndarray:
    """Deterministic (eval-mode) bottleneck embeddings, one row per spectrum."""
    X = np.atleast_2d(np.asarray(spectra, dtype=np.float64))
    if X.shape[1] != model.encoder_spec.input_dim:
        raise ShapeError(f"spectra have {X.shape[1]} bins, encoder expects {model.encoder_spec.input_dim}")
    z, _ = mlp_forward(model.encoder_spec, model.encoder, X)
    return z


def decode(model: Autoencoder, codes: np.ndarray) -> np.ndarray:
    y, _ = mlp_forward(model.decoder_spec, model.decoder, np.atleast_2d(codes))
    return y


# ---------------------------------------------------------------------------
# CSV readers
# ---------------------------------------------------------------------------


def load_raw_spectra(path: str | Path, n_bins: int = N_BINS) -> tuple[list[str], np.ndarray]:
    """Read ``source_id,b0,...,b{n-1}`` rows; values must be finite and >= 0."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FormatError(f"{path}: empty file")
        if header != ["source_id", *(f"b{i}" for i in range(n_bins))]:
            raise FormatError(f"{path}:1: header must be source_id,b0..b{n_bins - 1}")
        ids, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != n_bins + 1:
                raise FormatError(f"{path}:{lineno}: expected {n_bins} bins, got {len(rec) - 1}")
            try:
                vals = [float(v) for v in rec[1:]]
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric bin value") from None
            if not all(np.isfinite(vals)) or min(vals) < 0:
                raise FormatError(f"{path}:{lineno}: bins must be finite and non-negative")
            ids.append(rec[0])
            rows.append(vals)
    if not rows:
        raise FormatError(f"{path}: no spectra")
    return ids, np.array(rows)


def load_event_lists(events_path: str | Path, exposures_path: str | Path) -> tuple[list[str], dict[str, list[float]], dict[str, float]]:
    """Read ``source_id,energy_kev`` events and a ``source_id,exposure_s`` manifest."""
    events_path, exposures_path = Path(events_path), Path(exposures_path)
    exposures: dict[str, float] = {}
    with open(exposures_path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["source_id", "exposure_s"]:
            raise FormatError(f"{exposures_path}:1: header must be 'source_id,exposure_s'")
        for lineno, rec in enumerate(reader, start=2):
            try:
                exposures[rec[0]] = float(rec[1])
            except (ValueError, IndexError):
                raise FormatError(f"{exposures_path}:{lineno}: bad exposure row {rec}") from None
            if not exposures[rec[0]] > 0:
                raise FormatError(f"{exposures_path}:{lineno}: exposure must be positive")
    if not exposures:
        raise FormatError(f"{exposures_path}: no sources")
    events: dict[str, list[float]] = {sid: [] for sid in exposures}
    with open(events_path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["source_id", "energy_kev"]:
            raise FormatError(f"{events_path}:1: header must be 'source_id,energy_kev'")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != 2 or rec[0] not in events:
                raise FormatError(f"{events_path}:{lineno}: bad row or unknown source {rec[:1]}")
            try:
                events[rec[0]].append(float(rec[1]))
            except ValueError:
                raise FormatError(f"{events_path}:{lineno}: energy is not a number") from None
    return list(exposures), events, exposures


def write_spectra_csv(path: str | Path, ids: Sequence[str], spectra: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", *(f"b{i}" for i in range(spectra.shape[1]))])
        for sid, row in zip(ids, spectra):
            w.writerow([sid, *(repr(float(v)) for v in row)])
