"""Self-describing binary artifact files: a JSON manifest plus raw arrays.

The layout is canonical so that save -> load -> save reproduces the file
byte for byte: arrays are packed tightly in name order, the manifest is
serialized with sorted keys, and every numeric payload is little-endian
64-bit.  Loading recomputes the expected layout and refuses anything that
does not match, so truncated or hand-edited files fail loudly instead of
yielding silently wrong arrays.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["ArtifactContainer", "ContainerError", "save_container", "load_container"]

MAGIC = b"EPRB1\n"
_VERSION = 1
_DTYPES = ("<f8", "<i8")


class ContainerError(RuntimeError):
    """Raised when a file fails structural or provenance validation."""


@dataclass
class ArtifactContainer:
    """Named arrays plus free-form JSON metadata (e.g. the config hash)."""

    meta: dict = field(default_factory=dict)
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.arrays = {name: _canonical_array(name, arr) for name, arr in self.arrays.items()}


def _canonical_array(name: str, arr) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        out = np.ascontiguousarray(arr, dtype="<f8")
    elif arr.dtype.kind in "iub":
        out = np.ascontiguousarray(arr, dtype="<i8")
    else:
        raise ContainerError(f"array {name!r} has unsupported dtype {arr.dtype}")
    return out


def _layout(arrays: dict[str, np.ndarray]) -> tuple[dict, int]:
    """Manifest entries with offsets for tight name-ordered packing."""
    entries = {}
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name]
        entries[name] = {
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
        }
        offset += arr.nbytes
    return entries, offset


def save_container(container: ArtifactContainer, path) -> None:
    entries, total = _layout(container.arrays)
    manifest = {
        "version": _VERSION,
        "meta": container.meta,
        "arrays": entries,
    }
    try:
        blob = json.dumps(manifest, sort_keys=True, separators=(",", ":"), allow_nan=False)
    except (TypeError, ValueError) as exc:
        raise ContainerError(f"metadata is not canonically serializable: {exc}") from exc
    head = blob.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for name in sorted(container.arrays):
            fh.write(container.arrays[name].tobytes())
    assert Path(path).stat().st_size == len(MAGIC) + 8 + len(head) + total


def load_container(path, config_hash: str | None = None) -> ArtifactContainer:
    """Read and validate an artifact file.

    With ``config_hash`` given, the manifest must carry the same value in
    ``meta["config_hash"]``; this ties reloaded arrays to the experiment
    configuration that produced them.
    """
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"{path}: not an artifact file (bad magic)")
    (head_len,) = struct.unpack_from("<Q", raw, len(MAGIC))
    body = len(MAGIC) + 8
    if body + head_len > len(raw):
        raise ContainerError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[body : body + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: unreadable manifest: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("version") != _VERSION:
        raise ContainerError(f"{path}: unsupported container version")
    entries = manifest.get("arrays")
    meta = manifest.get("meta")
    if not isinstance(entries, dict) or not isinstance(meta, dict):
        raise ContainerError(f"{path}: malformed manifest")

    payload = raw[body + head_len :]
    offset = 0
    arrays = {}
    for name in sorted(entries):
        ent = entries[name]
        if ent.get("dtype") not in _DTYPES:
            raise ContainerError(f"{path}: array {name!r} has unsupported dtype {ent.get('dtype')!r}")
        shape = tuple(ent.get("shape", ()))
        if not all(isinstance(s, int) and s >= 0 for s in shape):
            raise ContainerError(f"{path}: array {name!r} has malformed shape {shape}")
        if ent.get("offset") != offset:
            raise ContainerError(f"{path}: array {name!r} breaks the canonical packing")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + nbytes > len(payload):
            raise ContainerError(f"{path}: array {name!r} extends past end of file")
        arrays[name] = np.frombuffer(payload, dtype=ent["dtype"], count=nbytes // 8, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise ContainerError(f"{path}: {len(payload) - offset} trailing payload bytes")

    if config_hash is not None and meta.get("config_hash") != config_hash:
        raise ContainerError(
            f"{path}: config hash mismatch (file {meta.get('config_hash')!r}, expected {config_hash!r})"
        )
    return ArtifactContainer(meta=meta, arrays=arrays)
