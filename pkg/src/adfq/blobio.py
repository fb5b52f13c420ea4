"""Manifest + blob tensor files.

One JSON manifest (format tag, free-form metadata, per-tensor name/shape/
offset/byte_length) plus one binary blob of little-endian IEEE-754
binary32 values, row-major, concatenated in manifest order.  Checkpoints,
quantizer bundles and datasets all reuse this encoding; writes are atomic
(temp file + rename) and byte-deterministic.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .errors import CheckpointError

_DTYPE = np.dtype("<f4")


def _paths(base: str) -> tuple[str, str]:
    if base.endswith(".json"):
        base = base[:-5]
    return base + ".json", base + ".bin"


def atomic_write_bytes(path: str, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj) -> str:
    """Canonical JSON: sorted keys, repr floats, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def write_tensor_file(base: str, fmt: str, version: int, meta: dict,
                      tensors: list[tuple[str, np.ndarray]]) -> None:
    manifest_path, blob_path = _paths(base)
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        raw = arr.astype(_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": offset, "byte_length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = dict(meta)
    manifest["format"] = fmt
    manifest["version"] = version
    manifest["blob"] = os.path.basename(blob_path)
    manifest["tensors"] = entries
    atomic_write_bytes(blob_path, b"".join(chunks))
    atomic_write_text(manifest_path, dump_json(manifest))


def read_tensor_file(base: str, fmt: str, version: int
                     ) -> tuple[dict, dict[str, np.ndarray]]:
    manifest_path, blob_path = _paths(base)
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except OSError as e:
        raise CheckpointError(f"cannot read manifest {manifest_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt manifest {manifest_path}: {e}") from e
    if manifest.get("format") != fmt or manifest.get("version") != version:
        raise CheckpointError(
            f"{manifest_path}: expected format {fmt} v{version}, got "
            f"{manifest.get('format')} v{manifest.get('version')}")
    blob_path = os.path.join(os.path.dirname(os.path.abspath(manifest_path)),
                             manifest.get("blob", ""))
    try:
        with open(blob_path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read blob {blob_path}: {e}") from e
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest.get("tensors", []):
        name = entry.get("name", "<unnamed>")
        shape = tuple(int(s) for s in entry["shape"])
        offset, length = int(entry["offset"]), int(entry["byte_length"])
        expected = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if length != expected:
            raise CheckpointError(
                f"tensor {name!r}: byte_length {length} does not match shape {shape}")
        if offset + length > len(blob):
            raise CheckpointError(
                f"tensor {name!r}: blob truncated (need {offset + length} bytes, "
                f"have {len(blob)})")
        flat = np.frombuffer(blob, dtype=_DTYPE, count=length // _DTYPE.itemsize,
                             offset=offset)
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r} in manifest")
        tensors[name] = flat.reshape(shape).astype(np.float64)
    return manifest, tensors
