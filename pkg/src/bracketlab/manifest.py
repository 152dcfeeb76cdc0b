"""Run manifests: config snapshot, content hashes, outputs, and timings.

A manifest pins everything needed to re-run a pipeline bit-identically:
explicit seeds live in the config snapshot, inputs and outputs are recorded
by SHA-256.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__

MANIFEST_NAME = "run_manifest.json"


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def hash_config(config: dict) -> str:
    return sha256_text(json.dumps(config, sort_keys=True))


def hash_tree(root) -> str:
    """Stable hash of a directory: file names and contents, sorted."""
    root = Path(root)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(str(path.relative_to(root)).encode("utf-8"))
        digest.update(bytes.fromhex(sha256_file(path)))
    return digest.hexdigest()


@dataclass
class RunManifest:
    config: dict
    input_hashes: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)  # relative path -> sha256
    timings: dict[str, float] = field(default_factory=dict)
    status: str = "running"
    error: str | None = None
    tool_version: str = __version__
    created_utc: str = ""

    def __post_init__(self):
        if not self.created_utc:
            self.created_utc = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())

    def record_output(self, run_dir, path):
        path = Path(path)
        rel = str(path.relative_to(run_dir)) if path.is_relative_to(run_dir) else str(path)
        self.outputs[rel] = hash_tree(path) if path.is_dir() else sha256_file(path)

    def save(self, run_dir) -> Path:
        out = Path(run_dir) / MANIFEST_NAME
        with open(out, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)
        return out


def load_manifest(run_dir) -> RunManifest:
    with open(Path(run_dir) / MANIFEST_NAME, encoding="utf-8") as fh:
        return RunManifest(**json.load(fh))


class StageTimer:
    def __init__(self, manifest: RunManifest, name: str):
        self.manifest = manifest
        self.name = name

    def __enter__(self):
        self._start = time.monotonic()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.manifest.timings[self.name] = round(time.monotonic() - self._start, 3)
        return False
