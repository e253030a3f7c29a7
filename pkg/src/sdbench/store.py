"""Model persistence: a JSON manifest plus one little-endian float64 payload.

Same layout idea as the GSF grid files, but float64 so that reloaded models
predict bit-for-bit what the in-memory ones did. Any ndarray leaf of the
state, and any rectangular list of Python floats, moves to the payload; the
manifest keeps a placeholder with its offset, shape and original kind.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

PAYLOAD_DTYPE = "<f8"


class StoreError(ValueError):
    pass


def _float_list(obj) -> bool:
    if not isinstance(obj, list) or not obj:
        return False
    stack = [obj]
    while stack:
        cur = stack.pop()
        for v in cur:
            if isinstance(v, list):
                stack.append(v)
            elif type(v) is not float:
                return False
    try:
        arr = np.asarray(obj, dtype=np.float64)
    except ValueError:
        return False
    return arr.dtype == np.float64


def _pack(obj, chunks, offset):
    if isinstance(obj, np.ndarray) or _float_list(obj):
        kind = "array" if isinstance(obj, np.ndarray) else "list"
        arr = np.ascontiguousarray(obj, dtype=np.float64)
        chunks.append(arr.ravel())
        ref = {"__payload__": kind, "offset": offset[0], "shape": list(arr.shape)}
        offset[0] += arr.size
        return ref
    if isinstance(obj, dict):
        return {str(k): _pack(v, chunks, offset) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_pack(v, chunks, offset) for v in obj]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return {"__float__": repr(obj)}
    return obj


def _unpack(obj, payload):
    if isinstance(obj, dict):
        if "__payload__" in obj:
            size = int(np.prod(obj["shape"])) if obj["shape"] else 1
            arr = payload[obj["offset"]:obj["offset"] + size].reshape(obj["shape"])
            if arr.size != size:
                raise StoreError("payload is shorter than the manifest implies")
            return arr.copy() if obj["__payload__"] == "array" else arr.tolist()
        if "__float__" in obj:
            return float(obj["__float__"])
        return {k: _unpack(v, payload) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_unpack(v, payload) for v in obj]
    return obj


def save_bundle(state: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = []
    manifest = _pack(state, chunks, [0])
    payload = path.with_suffix(".f64")
    data = np.concatenate(chunks) if chunks else np.empty(0)
    data.astype(PAYLOAD_DTYPE).tofile(payload)
    doc = {"payload": payload.name, "dtype": PAYLOAD_DTYPE, "size": int(data.size),
           "state": manifest}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def load_bundle(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        payload = np.fromfile(path.parent / doc["payload"], dtype=doc["dtype"])
    except (OSError, KeyError, ValueError) as exc:
        raise StoreError(f"cannot read model bundle {path}: {exc}") from exc
    if payload.size != doc["size"]:
        raise StoreError(f"{path}: payload has {payload.size} values, expected {doc['size']}")
    return _unpack(doc["state"], payload.astype(np.float64))
