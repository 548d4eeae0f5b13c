"""CSV metrics and run manifests."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .. import __version__
from .config import ExperimentConfig, config_hash, config_to_dict

MANIFEST_NAME = "run_manifest.json"


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path, header, rows) -> Path:
    """Write rows in the given order; floats as ``repr`` so reruns are byte-identical."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                if len(row) != len(header):
                    raise ValueError(f"row has {len(row)} cells, header has {len(header)}")
                w.writerow([_cell(v) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc
    return path


def read_csv(path) -> tuple[list[str], list[dict]]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        return list(reader.fieldnames or []), rows


@dataclass
class RunManifest:
    study: str
    config: ExperimentConfig
    checkpoints: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    started: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        doc = {
            "study": self.study,
            "config_hash": config_hash(self.config),
            "artifact_version": __version__,
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(),
            "checkpoints": [str(p) for p in self.checkpoints],
            "outputs": [str(p) for p in self.outputs],
            "config": config_to_dict(self.config),
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path
