"""Run manifests: resolved config, input/output hashes, code version.

Manifests hold no timestamps or host details, so rerunning a command with
the same inputs rewrites the same bytes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def git_blob_hash(data: bytes) -> str:
    """Object id git assigns to a blob with this content."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def code_version(root: Path | None = None) -> str:
    """Hash over ``path blob-hash`` lines of every package source file."""
    root = Path(root) if root is not None else Path(__file__).resolve().parent
    lines = []
    for p in sorted(root.rglob("*.py")):
        rel = p.relative_to(root).as_posix()
        lines.append(f"{rel} {git_blob_hash(p.read_bytes())}")
    return git_blob_hash("\n".join(lines).encode())


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path, obj) -> str:
    Path(path).write_text(dumps(obj), encoding="utf-8")
    return str(path)


def write_manifest(out_dir, command: str, config: dict, inputs, outputs, seed: int) -> Path:
    out_dir = Path(out_dir)
    record = {
        "command": command,
        "seed": seed,
        "config": config,
        "code_version": code_version(),
        "inputs": {Path(p).name: sha256_file(p) for p in inputs},
        "outputs": {Path(p).name: sha256_file(p) for p in outputs},
    }
    path = out_dir / f"manifest-{command}.json"
    write_json(path, record)
    return path
