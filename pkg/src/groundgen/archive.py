"""Flat checkpoint archive: one JSON manifest plus named float arrays.

Layout: magic line, 8-byte big-endian header length, UTF-8 JSON header,
raw little-endian array bytes. The header stores the sha256 of the binary
payload, so tampering is detected on load. No timestamps anywhere: saving
the same state twice produces identical bytes.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

MAGIC = b"GGARCHIVE1\n"


class CorruptArchiveError(RuntimeError):
    pass


def save_archive(
    path: Path | str, manifest: dict, arrays: dict[str, np.ndarray]
) -> str:
    """Write manifest + arrays; returns the sha256 of the whole file."""
    index = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append(
            {
                "name": name,
                "dtype": str(arr.dtype),
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(data),
            }
        )
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = {
        "manifest": manifest,
        "arrays": index,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    blob = MAGIC + len(header_bytes).to_bytes(8, "big") + header_bytes + payload
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_archive(path: Path | str) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise CorruptArchiveError(f"corrupt checkpoint: bad magic in {path}")
    base = len(MAGIC)
    header_len = int.from_bytes(blob[base : base + 8], "big")
    try:
        header = json.loads(blob[base + 8 : base + 8 + header_len])
    except json.JSONDecodeError as exc:
        raise CorruptArchiveError(f"corrupt checkpoint: bad header in {path}") from exc
    payload = blob[base + 8 + header_len :]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptArchiveError(f"corrupt checkpoint: payload hash mismatch in {path}")
    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).copy()
        arrays[entry["name"]] = arr.reshape(entry["shape"])
    return header["manifest"], arrays


def file_hash(path: Path | str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def module_params_hash(module) -> str:
    """sha256 over a torch module's state dict (names + raw bytes)."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()
