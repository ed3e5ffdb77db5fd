"""Deterministic artifact I/O: canonical JSON, JSON-lines with a metadata header, atomic writes."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

META_KEY = "_meta"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def digest(obj, length: int = 12) -> str:
    if isinstance(obj, bytes):
        data = obj
    elif isinstance(obj, str):
        data = obj.encode()
    else:
        data = canonical_json(obj).encode()
    return hashlib.sha256(data).hexdigest()[:length]


def file_digest(path, length: int = 12) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:length]


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory and rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n").encode())


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_jsonl(path, rows, meta=None) -> None:
    lines = []
    if meta is not None:
        lines.append(canonical_json({META_KEY: meta}))
    lines.extend(canonical_json(r) for r in rows)
    atomic_write_bytes(path, ("\n".join(lines) + "\n" if lines else "").encode())


def append_jsonl(path, row) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(canonical_json(row) + "\n")


def read_jsonl(path):
    """Return ``(meta, rows)``; meta is None when the file has no header line."""
    meta, rows = None, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if META_KEY in obj and len(obj) == 1:
                meta = obj[META_KEY]
            else:
                rows.append(obj)
    return meta, rows
