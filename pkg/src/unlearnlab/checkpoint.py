"""Self-contained checkpoint container: a text header (version, provenance,
tensor directory) followed by raw little-endian f64 payloads.

The payload is written exactly as the arrays' bytes, so save/load round trips
are bitwise lossless; a sha256 of the payload ("content hash") is recorded in
the header for integrity and provenance.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .denoiser import DenoiserConfig
from .params import ParamStore

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError"]

MAGIC = b"UNLEARNLAB-CKPT v1\n"


class CheckpointError(ValueError):
    pass


def _payload_bytes(arrays: list[np.ndarray]) -> tuple[bytes, list[int]]:
    offsets = []
    chunks = []
    pos = 0
    for arr in arrays:
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        offsets.append(pos)
        chunks.append(buf)
        pos += len(buf)
    return b"".join(chunks), offsets


def save_checkpoint(path: str | Path, store: ParamStore,
                    denoiser_config: DenoiserConfig | None = None,
                    config_digest: str = "", step_count: int = 0) -> str:
    """Write the store (values, masks, budget bookkeeping) to one file.

    Returns the payload content hash.
    """
    names = store.names()
    arrays = [store.value(n) for n in names]
    mask_names = [n for n in names if store.mask(n) is not None]
    arrays += [store.mask(n) for n in mask_names]
    payload, offsets = _payload_bytes(arrays)
    content_hash = hashlib.sha256(payload).hexdigest()

    tensor_dir = [
        {"name": n, "shape": list(store.value(n).shape), "offset": offsets[i]}
        for i, n in enumerate(names)
    ]
    mask_dir = [
        {"name": n, "shape": list(store.mask(n).shape),
         "offset": offsets[len(names) + i]}
        for i, n in enumerate(mask_names)
    ]
    header = {
        "version": 1,
        "config_digest": config_digest,
        "content_hash": content_hash,
        "step_count": int(step_count),
        "denoiser": denoiser_config.to_dict() if denoiser_config else None,
        "tensors": tensor_dir,
        "masks": mask_dir,
        "budgeted": list(store._budgeted),
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode())
        fh.write(b"\n")
        fh.write(payload)
    return content_hash


def load_checkpoint(path: str | Path) -> tuple[ParamStore, DenoiserConfig | None, dict]:
    """Read a checkpoint; returns (store, denoiser config, header metadata)."""
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        header = json.loads(fh.readline().decode())
        payload = fh.read()
    if hashlib.sha256(payload).hexdigest() != header["content_hash"]:
        raise CheckpointError(f"{path}: payload does not match content hash")

    def read_array(entry) -> np.ndarray:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        return arr.reshape(shape).copy()

    store = ParamStore()
    for entry in header["tensors"]:
        store.add(entry["name"], read_array(entry))
    for entry in header["masks"]:
        store.attach_mask(entry["name"], read_array(entry))
    store._budgeted = tuple(header.get("budgeted", ()))
    dcfg = DenoiserConfig.from_dict(header["denoiser"]) \
        if header.get("denoiser") else None
    meta = {k: header[k] for k in ("version", "config_digest", "content_hash",
                                   "step_count")}
    return store, dcfg, meta
