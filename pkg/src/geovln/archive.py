"""Manifest + raw payload archives.

Used for checkpoints and for externally supplied per-view features.  An
archive is a tar file with two members:

``manifest.txt``
    ``# key=value`` header lines, then one ``path<TAB>shape<TAB>dtype`` line
    per array (shape as ``3x4``, scalars as ``-``, dtype as a numpy
    little-endian descriptor such as ``<f8``).
``payload.bin``
    The arrays' raw little-endian bytes, concatenated in manifest order.
"""

from __future__ import annotations

import io
import os
import tarfile
import tempfile
from collections.abc import Mapping
from pathlib import Path

import numpy as np

MANIFEST = "manifest.txt"
PAYLOAD = "payload.bin"


class ArchiveError(ValueError):
    pass


def _shape_text(shape: tuple[int, ...]) -> str:
    return "x".join(str(s) for s in shape) if shape else "-"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "-" else tuple(int(s) for s in text.split("x"))


def write_archive(path: str | os.PathLike, arrays: Mapping[str, np.ndarray], header: Mapping[str, str] | None = None) -> None:
    """Atomically write ``arrays`` (in the given order) to ``path``."""
    lines = []
    for key, value in (header or {}).items():
        if "\n" in str(value) or "=" in str(key):
            raise ArchiveError(f"header entry {key!r} is not a single key=value line")
        lines.append(f"# {key}={value}")
    payload = io.BytesIO()
    for name, array in arrays.items():
        if any(c.isspace() for c in name):
            raise ArchiveError(f"array path {name!r} contains whitespace")
        # ascontiguousarray promotes 0-d arrays to 1-d, so restore the shape
        arr = np.ascontiguousarray(array).reshape(np.shape(array))
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        lines.append(f"{name}\t{_shape_text(arr.shape)}\t{arr.dtype.str}")
        payload.write(arr.tobytes(order="C"))
    manifest = ("\n".join(lines) + "\n").encode()

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=target.name, suffix=".tmp")
    os.close(fd)
    try:
        with tarfile.open(tmp, "w") as tar:
            for member, blob in ((MANIFEST, manifest), (PAYLOAD, payload.getvalue())):
                info = tarfile.TarInfo(member)
                info.size = len(blob)
                info.mtime = 0
                tar.addfile(info, io.BytesIO(blob))
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_archive(path: str | os.PathLike) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Return ``(header, arrays)`` with arrays in manifest order."""
    try:
        with tarfile.open(path, "r") as tar:
            manifest = tar.extractfile(MANIFEST).read().decode()
            payload = tar.extractfile(PAYLOAD).read()
    except (KeyError, tarfile.TarError) as exc:
        raise ArchiveError(f"{path}: not a manifest+payload archive ({exc})") from exc

    header: dict[str, str] = {}
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for line in manifest.splitlines():
        if not line:
            continue
        if line.startswith("# "):
            key, _, value = line[2:].partition("=")
            header[key] = value
            continue
        try:
            name, shape_text, dtype_text = line.split("\t")
        except ValueError as exc:
            raise ArchiveError(f"{path}: malformed manifest line {line!r}") from exc
        shape = _parse_shape(shape_text)
        dtype = np.dtype(dtype_text)
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(payload):
            raise ArchiveError(f"{path}: payload truncated at {name}")
        arrays[name] = np.frombuffer(payload, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise ArchiveError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return header, arrays
