"""Binary checkpoint container shared by models, banks and distilled data.

Layout (little-endian):
  magic "PSSC" | version u32 = 1 | header-length u32 | header JSON (UTF-8)
  then repeated tensor records:
  name-length u16 | name UTF-8 | ndim u8 | dims u64 each | payload raw f32 row-major

The header JSON carries {"kind": ..., "config": {...}}. Round-trips are
bit-exact for float32 tensors; other dtypes are stored as f32.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"PSSC"
VERSION = 1


class ArtifactError(IOError):
    """Checkpoint or artifact cannot be used (base for IO failures)."""


class BadMagicError(ArtifactError):
    """File does not start with the container magic."""


class VersionMismatchError(ArtifactError):
    """Container version is not supported."""


class TruncatedRecordError(ArtifactError):
    """File ends in the middle of a tensor record."""


def write_container(path, kind: str, config: dict, tensors: dict[str, np.ndarray]) -> None:
    header = json.dumps({"kind": kind, "config": config}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(header)))
        f.write(header)
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype=np.float32)
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                f.write(struct.pack("<Q", dim))
            f.write(data.tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedRecordError(f"truncated record: expected {n} bytes for {what}, got {len(buf)}")
    return buf


def read_container(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    """Returns (kind, config, tensors) with f32 arrays."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise BadMagicError(f"bad magic: expected {MAGIC!r}, got {magic!r}")
        version, header_len = struct.unpack("<II", _read_exact(f, 8, "version/header length"))
        if version != VERSION:
            raise VersionMismatchError(f"unsupported container version {version} (expected {VERSION})")
        header = json.loads(_read_exact(f, header_len, "header").decode("utf-8"))
        tensors: dict[str, np.ndarray] = {}
        while True:
            lead = f.read(2)
            if not lead:
                break
            if len(lead) != 2:
                raise TruncatedRecordError("truncated record: partial name length")
            (name_len,) = struct.unpack("<H", lead)
            name = _read_exact(f, name_len, "tensor name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, f"ndim of {name}"))
            dims = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim, f"dims of {name}"))
            count = int(np.prod(dims)) if ndim else 1
            payload = _read_exact(f, 4 * count, f"payload of {name}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return header["kind"], header["config"], tensors
