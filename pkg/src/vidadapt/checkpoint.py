"""Versioned binary container of named arrays plus a JSON metadata block.

Layout (all integers little-endian)::

    b"VDCK" | uint32 version | uint64 header length | header JSON | array bytes

The header lists each array's name, dtype, shape, offset, size and CRC-32. Nested
state (optimizer state dicts, RNG states) is stored by ``pack_tree``: tensors
and arrays go to the array section and everything else stays in the JSON.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"VDCK"
CONTAINER_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def _little_endian(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    if array.dtype.byteorder == ">":
        array = array.astype(array.dtype.newbyteorder("<"))
    return array


def write_container(path: str | Path, arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> Path:
    """Write ``arrays`` (in insertion order) and ``meta`` to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name, array in arrays.items():
        array = _little_endian(np.asarray(array))
        blob = array.tobytes(order="C")
        entries.append(
            {
                "name": name,
                "dtype": array.dtype.str,
                "shape": list(array.shape),
                "offset": offset,
                "nbytes": len(blob),
                "crc32": zlib.crc32(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"version": CONTAINER_VERSION, "meta": meta, "arrays": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(_PREFIX.pack(MAGIC, CONTAINER_VERSION, len(header)))
        handle.write(header)
        for blob in blobs:
            handle.write(blob)
    return path


def read_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Read a container written by write_container.

    Raises:
        CheckpointError: if the file is missing, truncated, not a container,
            written by a different container version, has a malformed header,
            or holds an array whose bytes fail their checksum.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"corrupt checkpoint {path}: truncated prefix")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"corrupt checkpoint {path}: bad magic {magic!r}")
    if version != CONTAINER_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has version {version}, expected {CONTAINER_VERSION}"
        )
    start = _PREFIX.size
    try:
        header = json.loads(raw[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: unreadable header") from exc
    body = start + header_len
    arrays: dict[str, np.ndarray] = {}
    try:
        for entry in header["arrays"]:
            name = entry["name"]
            begin = body + int(entry["offset"])
            end = begin + int(entry["nbytes"])
            if end > len(raw):
                raise CheckpointError(f"corrupt checkpoint {path}: array {name} truncated")
            blob = raw[begin:end]
            if zlib.crc32(blob) != entry["crc32"]:
                raise CheckpointError(f"corrupt checkpoint {path}: array {name} fails its checksum")
            arrays[name] = np.frombuffer(blob, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        meta = header["meta"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: malformed header ({exc!r})") from exc
    return arrays, meta


def pack_tree(tree: Any, prefix: str, arrays: dict[str, np.ndarray]) -> Any:
    """Move tensors/arrays of a nested structure into ``arrays``; return JSON-able rest."""
    if isinstance(tree, torch.Tensor):
        arrays[prefix] = tree.detach().cpu().numpy()
        return {"__tensor__": prefix}
    if isinstance(tree, np.ndarray):
        arrays[prefix] = tree
        return {"__ndarray__": prefix}
    if isinstance(tree, dict):
        return {
            "__dict__": [
                [key, pack_tree(value, f"{prefix}/{key}", arrays)] for key, value in tree.items()
            ]
        }
    if isinstance(tree, (list, tuple)):
        tag = "__list__" if isinstance(tree, list) else "__tuple__"
        return {tag: [pack_tree(v, f"{prefix}/{i}", arrays) for i, v in enumerate(tree)]}
    if tree is None or isinstance(tree, (bool, int, float, str)):
        return tree
    raise CheckpointError(f"cannot store {type(tree).__name__} at {prefix}")


def unpack_tree(packed: Any, arrays: dict[str, np.ndarray]) -> Any:
    """Inverse of pack_tree."""
    if isinstance(packed, dict):
        if "__tensor__" in packed:
            return torch.from_numpy(arrays[packed["__tensor__"]].copy())
        if "__ndarray__" in packed:
            return arrays[packed["__ndarray__"]].copy()
        if "__dict__" in packed:
            return {key: unpack_tree(value, arrays) for key, value in packed["__dict__"]}
        if "__list__" in packed:
            return [unpack_tree(v, arrays) for v in packed["__list__"]]
        if "__tuple__" in packed:
            return tuple(unpack_tree(v, arrays) for v in packed["__tuple__"])
        raise CheckpointError(f"unknown packed node {sorted(packed)}")
    return packed


def state_arrays(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {
        f"{prefix}/{name}": tensor.detach().cpu().numpy()
        for name, tensor in module.state_dict().items()
    }


def load_state_arrays(module: torch.nn.Module, prefix: str, arrays: dict[str, np.ndarray]) -> None:
    head = f"{prefix}/"
    state = {
        name[len(head) :]: torch.from_numpy(array.copy())
        for name, array in arrays.items()
        if name.startswith(head)
    }
    try:
        module.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint does not fit {type(module).__name__}: {exc}") from exc
