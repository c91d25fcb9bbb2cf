"""Self-describing tensor container.

Layout (all integers little-endian)::

    magic    8 bytes   b"FBOCCTNS"
    version  uint16    1
    hlen     uint32    byte length of the JSON header
    header   hlen bytes UTF-8 JSON: {"tensors": [{"name", "dtype", "shape",
                                      "offset", "nbytes"}, ...]}
    payload  concatenated raw row-major little-endian tensor bytes; offsets
             are relative to the start of the payload

The header is written with sorted keys and no whitespace, so writing the same
tensors always yields the same bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .classes import NUM_CLASSES

MAGIC = b"FBOCCTNS"
VERSION = 1
_PREFIX = struct.Struct("<8sHI")

DTYPES = {
    "bool": np.dtype("bool"),
    "uint8": np.dtype("<u1"),
    "int8": np.dtype("<i1"),
    "uint16": np.dtype("<u2"),
    "int16": np.dtype("<i2"),
    "uint32": np.dtype("<u4"),
    "int32": np.dtype("<i4"),
    "uint64": np.dtype("<u8"),
    "int64": np.dtype("<i8"),
    "float16": np.dtype("<f2"),
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
}


class ContainerError(ValueError):
    """Malformed container; ``field`` names the offending header entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _dtype_name(dt: np.dtype) -> str:
    if dt.name not in DTYPES:
        raise ContainerError("dtype", f"unsupported dtype {dt}")
    return dt.name


def encode(tensors: dict) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.asarray(arr)
        dname = _dtype_name(a.dtype)
        raw = np.ascontiguousarray(a, dtype=DTYPES[dname]).tobytes()
        entries.append({"name": str(name), "dtype": dname, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def decode(data: bytes) -> dict:
    if len(data) < _PREFIX.size:
        raise ContainerError("magic", "file too short")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ContainerError("magic", f"bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError("version", f"unsupported version {version}")
    start = _PREFIX.size
    if start + hlen > len(data):
        raise ContainerError("header", "header length exceeds file size")
    try:
        header = json.loads(data[start : start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError("header", f"invalid JSON ({exc})") from None
    if not isinstance(header, dict) or not isinstance(header.get("tensors"), list):
        raise ContainerError("tensors", "header must hold a 'tensors' list")
    payload = memoryview(data)[start + hlen :]
    out = {}
    for i, e in enumerate(header["tensors"]):
        for key in ("name", "dtype", "shape", "offset", "nbytes"):
            if not isinstance(e, dict) or key not in e:
                raise ContainerError(f"tensors[{i}].{key}", "missing")
        name = e["name"]
        if e["dtype"] not in DTYPES:
            raise ContainerError(f"{name}.dtype", f"unknown dtype {e['dtype']!r}")
        shape = e["shape"]
        if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
            raise ContainerError(f"{name}.shape", f"invalid shape {shape!r}")
        dt = DTYPES[e["dtype"]]
        expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if e["nbytes"] != expected:
            raise ContainerError(f"{name}.nbytes", f"payload length mismatch: header says {e['nbytes']}, shape needs {expected}")
        lo, hi = e["offset"], e["offset"] + e["nbytes"]
        if lo < 0 or hi > len(payload):
            raise ContainerError(f"{name}.offset", f"payload length mismatch: need bytes [{lo}, {hi}), have {len(payload)}")
        out[name] = np.frombuffer(payload[lo:hi], dtype=dt).reshape(shape).copy()
    return out


def write_container(path, tensors: dict) -> None:
    Path(path).write_bytes(encode(tensors))


def read_container(path) -> dict:
    return decode(Path(path).read_bytes())


def read_occ_gt(path):
    """Occ3D-style ground truth: ``semantics`` plus ``mask_camera``.

    Accepts this package's container or an Occ3D ``labels.npz``.
    """
    from .occ_head import OccupancyGrid

    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            tensors = {k: z[k] for k in z.files}
    else:
        tensors = read_container(path)
    if "semantics" not in tensors:
        raise ContainerError("semantics", "missing from ground truth")
    sem = tensors["semantics"]
    if sem.ndim != 3:
        raise ContainerError("semantics", f"expected X x Y x Z, got shape {sem.shape}")
    bad = np.argwhere((sem < 0) | (sem >= NUM_CLASSES))
    if len(bad):
        raise ContainerError("semantics", f"labels outside [0, {NUM_CLASSES - 1}] at indices {bad[:20].tolist()}")
    mask = tensors.get("mask_camera")
    if mask is not None and mask.shape != sem.shape:
        raise ContainerError("mask_camera", f"shape {mask.shape} differs from semantics {sem.shape}")
    return OccupancyGrid(sem.astype(np.int64), None if mask is None else mask.astype(bool))


def write_occ_gt(path, gt) -> None:
    write_container(path, {"semantics": gt.labels.astype(np.uint8), "mask_camera": gt.camera_mask.astype(np.uint8)})
