"""Pipe-delimited ASCII header + little-endian float32 payload files.

Every binary artifact in the package (flow dumps, feature maps, descriptor
blocks, PCA and codebook models) is a sequence of records of the form::

    MAGIC|field|field|...\\n<payload bytes>

The header tells the reader how many float32 values follow.
"""

from __future__ import annotations

from typing import BinaryIO, Sequence

import numpy as np

F32 = np.dtype("<f4")


class FormatError(ValueError):
    """Raised when a binary record header is malformed or inconsistent."""


def write_record(fh: BinaryIO, magic: str, fields: Sequence[object], payload: np.ndarray) -> None:
    header = "|".join([magic, *(str(f) for f in fields)])
    if "\n" in header:
        raise FormatError(f"header field contains a newline: {header!r}")
    fh.write(header.encode("ascii") + b"\n")
    fh.write(np.ascontiguousarray(payload, dtype=F32).tobytes())


def read_header(fh: BinaryIO, magic: str, n_fields: int) -> list[str] | None:
    """Read one header line; ``None`` at clean end of file."""
    line = fh.readline()
    if not line:
        return None
    try:
        text = line.decode("ascii").rstrip("\n")
    except UnicodeDecodeError as exc:
        raise FormatError("header is not ASCII") from exc
    parts = text.split("|")
    if parts[0] != magic:
        raise FormatError(f"expected magic {magic!r}, got {parts[0]!r}")
    if len(parts) != n_fields + 1:
        raise FormatError(f"{magic} header needs {n_fields} fields, got {len(parts) - 1}")
    return parts[1:]


def read_payload(fh: BinaryIO, count: int) -> np.ndarray:
    nbytes = count * F32.itemsize
    raw = fh.read(nbytes)
    if len(raw) != nbytes:
        raise FormatError(f"truncated payload: wanted {nbytes} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=F32).copy()


def parse_int(value: str, name: str) -> int:
    try:
        out = int(value)
    except ValueError as exc:
        raise FormatError(f"{name} is not an integer: {value!r}") from exc
    if out < 0:
        raise FormatError(f"{name} must be nonnegative, got {out}")
    return out
