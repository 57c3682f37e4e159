"""Run configuration: flat ``section.key=value`` files overridable from the CLI.

Example::

    # quickstart
    seed=7
    align.shared_dim=64
    align.text_hidden=256
    grid.lr=1e-4,1e-3
    grid.hidden_dims=64|256,128
    regress.k=3

Lists are comma separated. For ``grid.hidden_dims`` alternatives are
separated by ``|`` and each alternative is a comma-separated layer list.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .align import AlignmentConfig
from .errors import ConfigError

REGRESS_DEFAULTS = {"k": 3, "bootstrap_n": 1000, "moe_metric": "pearson", "standardize": False}
ANOMALY_DEFAULTS = {"n_trees": 100, "subsample_size": 256, "q": 0.01,
                    "representation": "post_both", "split": "test"}
SYNTH_DEFAULTS = {"n": 512, "latent_dim": 8, "noise": 0.1, "missing_rate": 0.0}
GRID_DEFAULTS = {
    "lr": [1e-4, 1e-3],
    "shared_dim": [16, 64, 128],
    "dropout": [0.1, 0.5],
    "hidden_dims": [(16,), (256,), (1024,)],
    "ensemble_size": 5,
}

_ALIGN_FIELDS = {f.name: f for f in dataclasses.fields(AlignmentConfig)}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce_like(default, text: str):
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text.strip()


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


@dataclass
class RunConfig:
    seed: int = 0
    align: AlignmentConfig = field(default_factory=AlignmentConfig)
    grid: dict = field(default_factory=lambda: dict(GRID_DEFAULTS))
    regress: dict = field(default_factory=lambda: dict(REGRESS_DEFAULTS))
    anomaly: dict = field(default_factory=lambda: dict(ANOMALY_DEFAULTS))
    synth: dict = field(default_factory=lambda: dict(SYNTH_DEFAULTS))

    def set(self, key: str, value: str) -> None:
        """Apply one ``section.key=value`` assignment."""
        try:
            self._set(key.strip(), value.strip())
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None

    def _set(self, key: str, value: str) -> None:
        if key == "seed":
            self.seed = int(value)
            return
        section, _, name = key.partition(".")
        if section == "align" and name in _ALIGN_FIELDS:
            current = getattr(self.align, name)
            if name in ("spectral_hidden", "text_hidden"):
                parsed = tuple(_int_list(value))
            elif name == "temperature_grid":
                parsed = tuple(_float_list(value))
            else:
                parsed = _coerce_like(current, value)
            self.align = self.align.replace(**{name: parsed})
        elif section == "grid" and name in GRID_DEFAULTS:
            if name == "lr" or name == "dropout":
                self.grid[name] = _float_list(value)
            elif name == "shared_dim":
                self.grid[name] = _int_list(value)
            elif name == "hidden_dims":
                self.grid[name] = [tuple(_int_list(alt)) for alt in value.split("|") if alt.strip()]
            else:
                self.grid[name] = int(value)
        elif section in ("regress", "anomaly", "synth"):
            table = getattr(self, section)
            if name not in table:
                raise ConfigError(f"unknown config key {key!r}")
            table[name] = _coerce_like(table[name], value)
        else:
            raise ConfigError(f"unknown config key {key!r}")

    def apply(self, assignments: Iterable[str]) -> RunConfig:
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"expected key=value, got {item!r}")
            k, v = item.split("=", 1)
            self.set(k, v)
        return self

    def grid_space(self) -> dict:
        return {k: self.grid[k] for k in ("lr", "shared_dim", "dropout", "hidden_dims")}

    def to_dict(self) -> dict:
        grid = {k: ([list(h) for h in v] if k == "hidden_dims" else v) for k, v in self.grid.items()}
        return {"seed": self.seed, "align": self.align.to_dict(), "grid": grid,
                "regress": dict(self.regress), "anomaly": dict(self.anomaly), "synth": dict(self.synth)}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def parse_config_text(text: str, source: str = "<config>") -> list[str]:
    """Return ``key=value`` assignments from config text, skipping blanks and ``#`` comments."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        out.append(line)
    return out


def load_run_config(path: str | Path | None = None, overrides: Iterable[str] = (),
                    seed: int | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        cfg.apply(parse_config_text(path.read_text(), str(path)))
    cfg.apply(overrides)
    if seed is not None:
        cfg.seed = seed
    cfg.align = cfg.align.replace(seed=cfg.seed)
    return cfg
