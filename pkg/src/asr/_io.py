"""Atomic file writes and little-endian record reading."""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """Base class for malformed binary files; ``code`` names the failure."""

    code = "format"


class BadMagicError(FormatError):
    code = "bad_magic"


class VersionMismatchError(FormatError):
    code = "version_mismatch"


class TruncatedFileError(FormatError):
    code = "truncated"

    def __init__(self, section: str):
        self.section = section
        super().__init__(f"file truncated in section '{section}'")


class DimensionMismatchError(FormatError):
    code = "dimension_mismatch"


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


class Reader:
    """Sequential reader that names the section when data runs out."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, section: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(section)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, section: str) -> tuple:
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), section))

    def f32(self, count: int, section: str) -> np.ndarray:
        raw = self.take(4 * count, section)
        return np.frombuffer(raw, dtype="<f4").astype(np.float64)

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise DimensionMismatchError(
                f"{len(self.data) - self.pos} unexpected trailing bytes")


def f32_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()
