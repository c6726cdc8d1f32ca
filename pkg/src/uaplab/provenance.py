"""Atomic artifact writes and the hash chain that ``uaplab verify`` re-checks.

Every artifact ``X`` may carry a sidecar ``X.meta.json`` holding its own
sha256, the hash of the config that produced it and the sha256 of each input
artifact it was derived from.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

META_SUFFIX = ".meta.json"


def atomic_write_bytes(path, data: bytes) -> Path:
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
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + META_SUFFIX)


def _relative_to(path, base: Path) -> str:
    """``path`` relative to ``base`` so a moved tree still verifies; absolute across drives."""
    target = Path(path).resolve()
    try:
        return Path(os.path.relpath(target, base.resolve())).as_posix()
    except ValueError:
        return str(target)


def write_meta(path, cfg_hash: str, inputs=(), extra: dict | None = None) -> Path:
    """Record provenance for an artifact that has already been written."""
    path = Path(path)
    record = {
        "artifact": path.name,
        "sha256": sha256_file(path),
        "config_hash": cfg_hash,
        "inputs": {_relative_to(p, path.parent): sha256_file(p) for p in inputs},
    }
    if extra:
        record.update(extra)
    return atomic_write_text(meta_path(path), json.dumps(record, indent=2, sort_keys=True) + "\n")


def verify_tree(root) -> list[str]:
    """Re-check every sidecar under ``root``; return a list of problems (empty = ok)."""
    root = Path(root)
    problems = []
    metas = sorted(root.rglob("*" + META_SUFFIX))
    if not metas:
        problems.append(f"no provenance records under {root}")
    for meta in metas:
        record = json.loads(meta.read_text())
        artifact = meta.with_name(record["artifact"])
        if not artifact.exists():
            problems.append(f"{artifact}: missing")
            continue
        if sha256_file(artifact) != record["sha256"]:
            problems.append(f"{artifact}: content hash mismatch")
        for inp, digest in record.get("inputs", {}).items():
            inp_path = Path(inp)
            if not inp_path.is_absolute():
                inp_path = meta.parent / inp_path
            if not inp_path.exists():
                problems.append(f"{artifact}: input {inp} missing")
            elif sha256_file(inp_path) != digest:
                problems.append(f"{artifact}: input {inp} changed since derivation")
    if (root / "FAILED").exists():
        problems.append(f"{root}: run marked FAILED")
    return problems
