"""Append-only result store with fingerprint-keyed resume.

One JSON record per line; a crashed writer can only damage the final line,
which the reader skips, so previously committed results always survive.
Fingerprints are content hashes over every field that affects results.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

from statebench.errors import ConfigurationError

STORE_ENV_VAR = "STATEBENCH_STORE"
SCHEMA_VERSION = 1


def fingerprint(obj: dict) -> str:
    """Stable content hash of a JSON-serializable mapping."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class RunStore:
    """Line-delimited record log plus a checkpoint directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.log_path = self.root / "records.jsonl"
        self.checkpoint_dir = self.root / "checkpoints"
        self.checkpoint_dir.mkdir(exist_ok=True)
        self._index: dict[str, dict] | None = None

    def append(self, obj: dict) -> None:
        line = json.dumps(obj, sort_keys=True, separators=(",", ":"))
        if "\n" in line:
            raise ConfigurationError("record serialized with embedded newline")
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        if self._index is not None and "fingerprint" in obj:
            self._index[obj["fingerprint"]] = obj

    def records(self) -> list[dict]:
        if not self.log_path.exists():
            return []
        out = []
        with open(self.log_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError:
                    # torn tail from an interrupted writer
                    continue
        return out

    def index(self) -> dict[str, dict]:
        if self._index is None:
            self._index = {}
            for obj in self.records():
                fp = obj.get("fingerprint") or obj.get("trace_id")
                if fp:
                    self._index[fp] = obj
        return self._index

    def get(self, fp: str) -> dict | None:
        return self.index().get(fp)

    def checkpoint_path(self, fp: str) -> Path:
        return self.checkpoint_dir / f"{fp}.ckpt"


def default_store_root() -> Path:
    return Path(os.environ.get(STORE_ENV_VAR, "runs"))
