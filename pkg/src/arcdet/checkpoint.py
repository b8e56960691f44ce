"""Tensor (de)serialization.

File layout: an ASCII header with one `name shape dtype byte-offset`
line per tensor, a blank line, then the concatenated raw tensor data as
little-endian 32-bit floats in row-major order.  Tensors are written
sorted by name, so saving a loaded file reproduces it byte for byte.
"""

from __future__ import annotations

import numpy as np


class CheckpointError(ValueError):
    """Checkpoint file is malformed or inconsistent."""


def save_tensors(path: str, tensors: dict[str, np.ndarray]) -> None:
    names = sorted(tensors)
    header_lines = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        if arr.ndim == 0:
            raise CheckpointError(f"tensor {name!r} must have at least one axis")
        if any(ch.isspace() for ch in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        shape = ",".join(str(s) for s in arr.shape)
        header_lines.append(f"{name} {shape} float32 {offset}")
        blob = arr.tobytes(order="C")
        blobs.append(blob)
        offset += len(blob)
    header = "\n".join(header_lines) + "\n\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for blob in blobs:
            fh.write(blob)


def load_tensors(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise CheckpointError(f"{path}: missing blank line after header")
    try:
        header = raw[: sep + 1].decode("ascii")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: header is not ASCII") from exc
    blob = raw[sep + 2 :]
    out: dict[str, np.ndarray] = {}
    expected_offset = 0
    for lineno, line in enumerate(header.splitlines(), start=1):
        parts = line.split()
        if len(parts) != 4:
            raise CheckpointError(f"{path}:{lineno}: expected 4 header fields")
        name, shape_s, dtype_s, offset_s = parts
        if dtype_s != "float32":
            raise CheckpointError(f"{path}:{lineno}: unsupported dtype {dtype_s!r}")
        try:
            shape = tuple(int(s) for s in shape_s.split(","))
            offset = int(offset_s)
        except ValueError as exc:
            raise CheckpointError(f"{path}:{lineno}: {exc}") from exc
        if offset != expected_offset:
            raise CheckpointError(
                f"{path}:{lineno}: offset {offset}, expected {expected_offset}"
            )
        count = int(np.prod(shape)) if shape else 0
        nbytes = count * 4
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}:{lineno}: blob truncated for {name!r}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        out[name] = arr.reshape(shape).copy()
        expected_offset = offset + nbytes
    if expected_offset != len(blob):
        raise CheckpointError(
            f"{path}: blob has {len(blob)} bytes, header accounts for {expected_offset}"
        )
    return out
