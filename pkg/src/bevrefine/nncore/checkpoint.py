"""Binary checkpoint format: versioned header + named little-endian arrays.

Layout:
  magic ``b"BVRF"``, u32 version, u32 header byte length, header (utf-8
  ``key=value`` lines), u32 entry count, then per entry: u16 name length,
  name bytes, u8 dtype code (0 = float32, 1 = float64), u8 ndim, ndim x u32
  dims, raw little-endian values.
"""
from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

MAGIC = b"BVRF"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    """Malformed checkpoint file or a name/shape mismatch on load."""


def _encode_header(header: dict[str, str]) -> bytes:
    lines = []
    for k, v in header.items():
        k, v = str(k), str(v)
        if "=" in k or "\n" in k or "\n" in v:
            raise ValueError(f"header key/value cannot contain '=' in key or newlines: {k!r}")
        lines.append(f"{k}={v}")
    return "\n".join(lines).encode("utf-8")


def _decode_header(raw: bytes) -> dict[str, str]:
    out: dict[str, str] = {}
    if not raw:
        return out
    for line in raw.decode("utf-8").split("\n"):
        key, _, value = line.partition("=")
        out[key] = value
    return out


def save_checkpoint(path, arrays: dict[str, np.ndarray], header: dict[str, str] | None = None) -> None:
    """Write named arrays atomically (temp file + rename)."""
    header_bytes = _encode_header(header or {})
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", VERSION))
            f.write(struct.pack("<I", len(header_bytes)))
            f.write(header_bytes)
            f.write(struct.pack("<I", len(arrays)))
            for name in sorted(arrays):
                arr = np.asarray(arrays[name])
                if arr.dtype == np.float32:
                    code = 0
                elif arr.dtype == np.float64:
                    code = 1
                else:
                    raise ValueError(f"unsupported dtype {arr.dtype} for '{name}'")
                name_b = name.encode("utf-8")
                f.write(struct.pack("<H", len(name_b)))
                f.write(name_b)
                f.write(struct.pack("<BB", code, arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read a checkpoint; returns (arrays, header)."""
    with open(path, "rb") as f:
        raw = f.read()

    def take(n, what):
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = raw[off:off + n]
        off += n
        return chunk

    off = 0
    if take(4, "magic") != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", take(4, "header length"))
    header = _decode_header(take(hlen, "header"))
    (count,) = struct.unpack("<I", take(4, "entry count"))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2, "dtype/ndim"))
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"unknown dtype code {code} for '{name}'")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        n_vals = int(np.prod(shape)) if ndim else 1
        dtype = _DTYPE_CODES[code]
        data = take(n_vals * dtype.itemsize, f"values of '{name}'")
        arrays[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    return arrays, header


def load_into(module, path) -> dict[str, str]:
    """Load a checkpoint into a module, rejecting name/shape mismatches."""
    arrays, header = load_checkpoint(path)
    try:
        module.load_state_arrays(arrays)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    return header
