"""Checkpoint container: plain-text header + raw little-endian arrays.

Layout::

    version = mp-ckpt-v1
    dtype = float64
    meta.<key> = <value>          # free-form model/run metadata
    param = <name> <d0> <d1> ...  # one line per array, in declaration order
    end = header
    <flat arrays, little-endian IEEE-754, concatenated in header order>

Round-trips are exact: bytes written for an array are its C-order buffer.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

VERSION = "mp-ckpt-v1"

_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params, meta=None) -> None:
    """Write named arrays plus metadata.

    Args:
        path: output file.
        params: iterable of (name, array-or-Value) in declaration order.
        meta: optional dict of string-convertible metadata values.
    """
    items = []
    dtype = None
    for name, val in params:
        arr = np.asarray(val.data if hasattr(val, "data") else val)
        if arr.dtype.name not in _DTYPES:
            raise CheckpointError(f"parameter {name!r} has unsupported dtype {arr.dtype}")
        if any(ch.isspace() for ch in name) or not name:
            raise CheckpointError(f"invalid parameter name {name!r}")
        if dtype is None:
            dtype = arr.dtype.name
        elif arr.dtype.name != dtype:
            raise CheckpointError(f"mixed parameter dtypes: {dtype} vs {arr.dtype.name} ({name})")
        items.append((name, arr))
    if dtype is None:
        dtype = "float64"

    lines = [f"version = {VERSION}", f"dtype = {dtype}"]
    for key, value in (meta or {}).items():
        text = str(value)
        if "\n" in text or "\n" in str(key):
            raise CheckpointError(f"meta entry {key!r} contains a newline")
        lines.append(f"meta.{key} = {text}")
    for name, arr in items:
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"param = {name} {dims}".rstrip())
    lines.append("end = header")

    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        le = _DTYPES[dtype]
        for _, arr in items:
            fh.write(np.ascontiguousarray(arr, dtype=le).tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (meta: dict, params: OrderedDict[name, ndarray])."""
    with open(path, "rb") as fh:
        raw = fh.read()

    header_lines = []
    offset = 0
    for line in raw.split(b"\n"):
        offset += len(line) + 1
        text = line.decode("ascii", errors="replace")
        header_lines.append(text)
        if text.strip() == "end = header":
            break
    else:
        raise CheckpointError(f"{path}: missing header terminator")

    meta: dict[str, str] = {}
    specs: list[tuple[str, tuple[int, ...]]] = []
    dtype = None
    version = None
    for text in header_lines[:-1]:
        if "=" not in text:
            raise CheckpointError(f"{path}: malformed header line {text!r}")
        key, _, value = text.partition("=")
        key, value = key.strip(), value.strip()
        if key == "version":
            version = value
        elif key == "dtype":
            dtype = value
        elif key.startswith("meta."):
            meta[key[len("meta."):]] = value
        elif key == "param":
            fields = value.split()
            name, dims = fields[0], tuple(int(d) for d in fields[1:])
            specs.append((name, dims))
        else:
            raise CheckpointError(f"{path}: unknown header key {key!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version!r}")
    if dtype not in _DTYPES:
        raise CheckpointError(f"{path}: unsupported dtype {dtype!r}")

    np_dtype = np.dtype(_DTYPES[dtype])
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    cursor = offset
    for name, dims in specs:
        count = int(np.prod(dims)) if dims else 1
        nbytes = count * np_dtype.itemsize
        chunk = raw[cursor:cursor + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated data for parameter {name!r}")
        params[name] = np.frombuffer(chunk, dtype=np_dtype).reshape(dims).astype(dtype)
        cursor += nbytes
    if cursor != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - cursor} trailing bytes after parameters")
    return meta, params
