"""ParameterStore and the on-disk container (JSON manifest + raw blob).

File layout::

    0      8 bytes   magic b"SIMVACK1"
    8      8 bytes   manifest length L, uint64 little-endian
    16     L bytes   UTF-8 JSON manifest
    16+L   ...       blob: little-endian array data in manifest order

The manifest is ``{"format", "arrays", "config", "metadata"}`` where
``arrays`` maps name -> {shape, dtype ("f32"|"f64"), offset, byte_length};
offsets are relative to the blob start and must be contiguous.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import torch

MAGIC = b"SIMVACK1"
FORMAT = "simva-container/1"
_HEADER = 16

DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_TAGS = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}


class FormatError(ValueError):
    """Raised when a container file is malformed."""


class StructureError(ValueError):
    """Raised when two stores do not have matching names/shapes."""


def dtype_tag(arr: np.ndarray) -> str:
    try:
        return _TAGS[arr.dtype]
    except KeyError:
        raise TypeError(f"unsupported dtype {arr.dtype}; containers hold f32/f64 only") from None


class ParameterStore:
    """Ordered name -> array map with metadata; the unit of checkpointing."""

    def __init__(self, arrays: Iterable[tuple[str, np.ndarray]] | dict | None = None,
                 metadata: dict[str, Any] | None = None,
                 config: dict[str, Any] | None = None):
        self.arrays: OrderedDict[str, np.ndarray] = OrderedDict()
        items = arrays.items() if isinstance(arrays, dict) else (arrays or [])
        for name, arr in items:
            if name in self.arrays:
                raise StructureError(f"duplicate parameter name {name!r}")
            arr = np.ascontiguousarray(arr)
            dtype_tag(arr)
            self.arrays[name] = arr
        self.metadata = dict(metadata or {})
        self.config = dict(config or {})

    @classmethod
    def from_module(cls, module: torch.nn.Module, **kw) -> "ParameterStore":
        arrays = [(name, p.detach().cpu().numpy().copy()) for name, p in module.named_parameters()]
        return cls(arrays, **kw)

    def load_into(self, module: torch.nn.Module) -> None:
        params = dict(module.named_parameters())
        diff = set(params) ^ set(self.arrays)
        if diff:
            raise StructureError(f"store/module name mismatch: {sorted(diff)}")
        with torch.no_grad():
            for name, p in params.items():
                arr = self.arrays[name]
                if tuple(arr.shape) != tuple(p.shape):
                    raise StructureError(f"shape mismatch for {name}: {arr.shape} vs {tuple(p.shape)}")
                p.copy_(torch.from_numpy(arr).to(p.dtype))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def items(self):
        return self.arrays.items()

    def names(self) -> list[str]:
        return list(self.arrays)

    def size(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.arrays.items():
            h.update(name.encode())
            h.update(dtype_tag(arr).encode())
            h.update(np.asarray(arr.shape, dtype="<i8").tobytes())
            h.update(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
        return h.hexdigest()[:16]

    def copy(self) -> "ParameterStore":
        return ParameterStore([(k, v.copy()) for k, v in self.arrays.items()],
                              metadata=self.metadata, config=self.config)

    def equal(self, other: "ParameterStore") -> bool:
        """Bitwise equality of names, shapes, dtypes and values."""
        if list(self.arrays) != list(other.arrays):
            return False
        return all(a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
                   for a, b in zip(self.arrays.values(), other.arrays.values()))

    def save(self, path: str | Path) -> None:
        save_container(path, self.arrays, config=self.config, metadata=self.metadata)

    @classmethod
    def load(cls, path: str | Path) -> "ParameterStore":
        arrays, config, metadata = load_container(path)
        return cls(arrays, metadata=metadata, config=config)


def pack_container(arrays: dict[str, np.ndarray], config: dict | None = None,
                   metadata: dict | None = None) -> bytes:
    manifest: dict[str, Any] = {"format": FORMAT, "arrays": {}, "config": config or {},
                                "metadata": metadata or {}}
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        tag = dtype_tag(np.asarray(arr))
        data = np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes()
        manifest["arrays"][name] = {"shape": [int(s) for s in arr.shape], "dtype": tag,
                                    "offset": offset, "byte_length": len(data)}
        chunks.append(data)
        offset += len(data)
    head = json.dumps(manifest).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def unpack_container(buf: bytes) -> tuple[OrderedDict[str, np.ndarray], dict, dict]:
    if len(buf) < _HEADER or buf[:8] != MAGIC:
        raise FormatError("bad magic at byte 0: not a simva container")
    (mlen,) = struct.unpack("<Q", buf[8:16])
    if _HEADER + mlen > len(buf):
        raise FormatError(f"manifest spans bytes [16, {16 + mlen}) but file has {len(buf)} bytes")
    try:
        manifest = json.loads(buf[_HEADER:_HEADER + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest at bytes [16, {16 + mlen}) is not valid JSON: {exc}") from None
    if manifest.get("format") != FORMAT:
        raise FormatError(f"unknown container format {manifest.get('format')!r}")
    blob = memoryview(buf)[_HEADER + mlen:]
    base = _HEADER + mlen
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    expected = 0
    for name, entry in manifest["arrays"].items():
        tag = entry.get("dtype")
        if tag not in DTYPES:
            raise FormatError(f"array {name!r}: unsupported dtype {tag!r}")
        shape = tuple(int(s) for s in entry["shape"])
        off, nbytes = int(entry["offset"]), int(entry["byte_length"])
        if off != expected:
            raise FormatError(f"array {name!r}: offset {off} (file byte {base + off}) is not "
                              f"contiguous; expected {expected} (file byte {base + expected})")
        want = int(np.prod(shape, dtype=np.int64)) * DTYPES[tag].itemsize
        if want != nbytes:
            raise FormatError(f"array {name!r}: shape {list(shape)} x {tag} needs {want} bytes, "
                              f"manifest says byte_length {nbytes}")
        if off + nbytes > len(blob):
            raise FormatError(f"array {name!r}: needs file bytes [{base + off}, {base + off + nbytes}) "
                              f"but file ends at byte {len(buf)}")
        arrays[name] = np.frombuffer(blob[off:off + nbytes], dtype=DTYPES[tag]).reshape(shape).copy()
        expected = off + nbytes
    if expected != len(blob):
        raise FormatError(f"{len(blob) - expected} trailing bytes after byte {base + expected}")
    return arrays, manifest.get("config", {}), manifest.get("metadata", {})


def save_container(path: str | Path, arrays: dict[str, np.ndarray], config: dict | None = None,
                   metadata: dict | None = None) -> None:
    Path(path).write_bytes(pack_container(arrays, config, metadata))


def load_container(path: str | Path):
    return unpack_container(Path(path).read_bytes())
