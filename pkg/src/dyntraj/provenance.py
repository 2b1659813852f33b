"""Hashing helpers for config fingerprints and artifact provenance."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path


def canonical_json(obj) -> str:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        obj = dataclasses.asdict(obj)
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def fingerprint(obj, length: int = 16) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:length]


def file_sha256(path) -> str:
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file() and not p.name.endswith(".prov.json"):
                h.update(p.relative_to(path).as_posix().encode("utf-8"))
                h.update(p.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()
