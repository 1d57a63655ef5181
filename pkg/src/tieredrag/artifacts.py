"""Versioned JSON manifests that pin every stage output to the digests of its inputs.

A manifest records the sha256 of each input file and of each binary output
it describes. Loading a manifest re-hashes all of them and, recursively, the
manifests it was built from, so a regenerated upstream file makes every
downstream artifact stale.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

ARTIFACT_VERSION = 1


class ArtifactError(RuntimeError):
    """A missing, malformed or incompatible artifact."""


class StaleArtifactError(ArtifactError):
    """An input or output no longer matches the digest recorded for it."""


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def dumps(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_bytes_atomic(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _rel(path: Path, base: Path) -> str:
    return Path(os.path.relpath(path.resolve(), base.resolve())).as_posix()


def write_manifest(path, kind: str, payload: dict, inputs: dict | None = None, outputs: dict | None = None) -> dict:
    """Write a manifest; ``inputs``/``outputs`` map a role to a file path.

    Paths are stored relative to the manifest so a whole output directory
    can be moved or compared byte for byte.
    """
    path = Path(path)
    base = path.parent
    base.mkdir(parents=True, exist_ok=True)
    doc = {
        "artifact": kind,
        "version": ARTIFACT_VERSION,
        "inputs": {role: {"path": _rel(Path(p), base), "sha256": file_digest(p)} for role, p in sorted((inputs or {}).items())},
        "outputs": {role: {"path": _rel(Path(p), base), "sha256": file_digest(p)} for role, p in sorted((outputs or {}).items())},
        "payload": payload,
    }
    write_bytes_atomic(path, dumps(doc).encode())
    return doc


def _check_entries(doc: dict, base: Path, section: str, origin: Path) -> None:
    for role, entry in doc[section].items():
        target = base / entry["path"]
        if not target.exists():
            raise ArtifactError(f"{origin}: {section[:-1]} {role!r} missing at {target}")
        if file_digest(target) != entry["sha256"]:
            raise StaleArtifactError(f"{origin}: {section[:-1]} {role!r} ({target}) changed since this artifact was written")


def read_manifest(path, kind: str | None = None, verify: bool = True) -> dict:
    """Load a manifest, check its kind and version, and verify its digest chain."""
    return _read(Path(path), kind, verify, set())


def _read(path: Path, kind: str | None, verify: bool, seen: set) -> dict:
    if not path.exists():
        raise ArtifactError(f"missing artifact {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{path}: not a JSON artifact ({exc})") from None
    if not isinstance(doc, dict) or "artifact" not in doc:
        raise ArtifactError(f"{path}: not an artifact manifest")
    if doc.get("version") != ARTIFACT_VERSION:
        raise ArtifactError(f"{path}: unsupported artifact version {doc.get('version')!r}")
    if kind is not None and doc["artifact"] != kind:
        raise ArtifactError(f"{path}: expected a {kind!r} artifact, found {doc['artifact']!r}")
    if verify:
        base = path.parent
        _check_entries(doc, base, "inputs", path)
        _check_entries(doc, base, "outputs", path)
        seen.add(path.resolve())
        for entry in doc["inputs"].values():
            upstream = (base / entry["path"]).resolve()
            if upstream.suffix == ".json" and upstream not in seen:
                _read(upstream, None, True, seen)
    return doc


def resolve(manifest_path, doc: dict, section: str, role: str) -> Path:
    """Absolute path of an input or output named in a manifest."""
    return Path(manifest_path).parent / doc[section][role]["path"]
