"""
Run manifest written next to every command's outputs.

Data is kept in a small JSON file so a run can be audited and repeated:
identical manifests (same config, seeds, version and input digests) with
"reproducible": true reproduce identical output digests. Wall-clock runs are
marked "reproducible": false because their t_sec columns vary between reruns.

Schema:
  {
    "command": "evolve",
    "config":  {"bits": 8, "epsilon_pct": 5.0, ...},
    "seeds":   [1234],
    "reproducible": true,
    "version": "0.1.0",
    "inputs":  {"model.npz": "<sha256>"},
    "outputs": {"best.chr": "<sha256>", "runlog.csv": "<sha256>"}
  }
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Any

from src import __version__

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict[str, Any] = field(default_factory=dict)
    seeds: list[int] = field(default_factory=list)
    version: str = __version__
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    reproducible: bool = True

    def add_input(self, path: str) -> None:
        self.inputs[os.path.basename(path)] = file_digest(path)

    def add_outputs(self, root: str, names: list[str]) -> None:
        for name in names:
            self.outputs[name.replace(os.sep, "/")] = file_digest(os.path.join(root, name))

    def save(self, root: str) -> str:
        path = os.path.join(root, MANIFEST_NAME)
        os.makedirs(root, exist_ok=True)
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")
        logger.info("Wrote %s (%d output file(s))", path, len(self.outputs))
        return path

    @classmethod
    def load(cls, root: str) -> "RunManifest":
        with open(os.path.join(root, MANIFEST_NAME), "r") as f:
            return cls(**json.load(f))
