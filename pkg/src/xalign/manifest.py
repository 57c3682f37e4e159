"""Provenance manifest kept in every output directory."""

from __future__ import annotations

import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable

from . import __version__

MANIFEST_NAME = "manifest.json"


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """Append-only record of commands run against one output directory."""

    def __init__(self, out_dir: str | Path):
        self.out_dir = Path(out_dir)
        self.path = self.out_dir / MANIFEST_NAME
        if self.path.exists():
            self.data = json.loads(self.path.read_text())
        else:
            self.data = {"tool": "xalign", "tool_version": __version__, "runs": []}

    def record(self, command: str, config_hash: str, seed: int, inputs: Iterable[str | Path],
               outputs: Iterable[str | Path], started: str) -> dict:
        run = {
            "command": command,
            "tool_version": __version__,
            "config_hash": config_hash,
            "seed": seed,
            "started": started,
            "finished": _now(),
            "inputs": {str(Path(p).resolve()): file_digest(p) for p in inputs if Path(p).is_file()},
            "outputs": {self._rel(p): file_digest(p) for p in outputs if Path(p).is_file()},
        }
        self.data["runs"].append(run)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        return run

    def _rel(self, p: str | Path) -> str:
        p = Path(p).resolve()
        try:
            return str(p.relative_to(self.out_dir.resolve()))
        except ValueError:
            return str(p)

    def verify(self) -> list[str]:
        """Paths whose current digest differs from the one recorded (or that vanished).

        Only the latest record of each path is checked, since later runs may
        legitimately overwrite earlier outputs.
        """
        latest: dict[Path, str] = {}
        for run in self.data["runs"]:
            for p, digest in run["inputs"].items():
                latest[Path(p)] = digest
            for p, digest in run["outputs"].items():
                path = Path(p)
                latest[path if path.is_absolute() else self.out_dir / path] = digest
        problems = []
        for path, digest in latest.items():
            if not path.is_file():
                problems.append(f"missing: {path}")
            elif file_digest(path) != digest:
                problems.append(f"modified: {path}")
        return problems


start_time = _now
