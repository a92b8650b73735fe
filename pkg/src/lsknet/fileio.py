"""Bit-exact binary formats plus PGM/PPM image ingestion.

Tensor files ("LSKT"): 8-byte magic ``LSKT0001``, four little-endian unsigned
64-bit dims (n, c, h, w), then n*c*h*w little-endian IEEE-754 float32 values
in row-major order.

Weight files ("LSKW"): 8-byte magic ``LSKW0001``, a little-endian unsigned
32-bit manifest byte length, a UTF-8 JSON manifest mapping dotted tensor
names to (byte offset, shape), then the contiguous float32 payload.

Images: binary 8-bit PGM (P5) and PPM (P6) only; values are scaled to [0, 1]
and grayscale is replicated to three channels.

Readers never read past declared lengths; every malformed input maps to a
distinct error kind (bad magic, truncation, dim overflow, manifest problems).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .backbone import ActivationRecord
from .errors import (
    BadMagicError,
    DimOverflowError,
    FormatError,
    ManifestError,
    TruncatedFileError,
)

__all__ = [
    "TENSOR_MAGIC",
    "WEIGHTS_MAGIC",
    "Manifest",
    "read_tensor",
    "write_tensor",
    "read_weights",
    "write_weights",
    "read_image",
    "save_record",
    "load_record",
]

TENSOR_MAGIC = b"LSKT0001"
WEIGHTS_MAGIC = b"LSKW0001"
MAX_ELEMENTS = 1 << 31  # refuse absurd allocations before they happen
_F4 = np.dtype("<f4")


def _read_exact(fh: BinaryIO, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise TruncatedFileError(f"truncated while reading {what}: wanted {count} bytes, got {len(data)}")
    return data


def _open(target, mode: str):
    if isinstance(target, (str, Path)):
        return open(target, mode), True
    return target, False


# ---------------------------------------------------------------------------
# LSKT tensors
# ---------------------------------------------------------------------------

def write_tensor(target, x: np.ndarray) -> None:
    """Write a rank-4 float array as an LSKT file (path or binary stream)."""
    if x.ndim != 4:
        raise FormatError(f"write_tensor: expected rank-4 array, got shape {x.shape}")
    fh, owned = _open(target, "wb")
    try:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<4Q", *x.shape))
        fh.write(np.ascontiguousarray(x, dtype=_F4).tobytes())
    finally:
        if owned:
            fh.close()


def read_tensor(target, expected_shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Read an LSKT file back into a float32 (n, c, h, w) array."""
    fh, owned = _open(target, "rb")
    try:
        magic = _read_exact(fh, 8, "magic")
        if magic != TENSOR_MAGIC:
            raise BadMagicError(f"not a tensor file: magic {magic!r}")
        dims = struct.unpack("<4Q", _read_exact(fh, 32, "dims"))
        if any(d < 1 for d in dims):
            raise DimOverflowError(f"invalid dims {dims}: all must be >= 1")
        count = 1
        for d in dims:
            count *= d
        if count > MAX_ELEMENTS:
            raise DimOverflowError(f"dims {dims} declare {count} elements (limit {MAX_ELEMENTS})")
        if expected_shape is not None and tuple(dims) != tuple(expected_shape):
            raise FormatError(f"tensor shape {dims} does not match expected {tuple(expected_shape)}")
        payload = _read_exact(fh, count * 4, "tensor payload")
        return np.frombuffer(payload, dtype=_F4).reshape(dims).copy()
    finally:
        if owned:
            fh.close()


# ---------------------------------------------------------------------------
# LSKW weight files
# ---------------------------------------------------------------------------

@dataclass
class Manifest:
    """Ordered name -> (byte offset, shape) directory of a weight file."""

    entries: dict[str, tuple[int, tuple[int, ...]]]
    format_version: int = 1


def write_weights(target, arrays: Mapping[str, np.ndarray]) -> Manifest:
    """Write named float arrays contiguously; returns the manifest written."""
    entries: dict[str, tuple[int, tuple[int, ...]]] = {}
    blobs: list[bytes] = []
    offset = 0
    for name, arr in arrays.items():
        blob = np.ascontiguousarray(arr, dtype=_F4).tobytes()
        entries[name] = (offset, tuple(arr.shape))
        blobs.append(blob)
        offset += len(blob)
    manifest = Manifest(entries=entries)
    doc = {
        "format_version": manifest.format_version,
        "entries": [
            {"name": name, "offset": off, "shape": list(shape)}
            for name, (off, shape) in entries.items()
        ],
    }
    payload = json.dumps(doc).encode("utf-8")
    fh, owned = _open(target, "wb")
    try:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)
    finally:
        if owned:
            fh.close()
    return manifest


def read_weights(target) -> tuple[dict[str, np.ndarray], Manifest]:
    """Read a weight file into an ordered name -> float32 array map."""
    fh, owned = _open(target, "rb")
    try:
        magic = _read_exact(fh, 8, "magic")
        if magic != WEIGHTS_MAGIC:
            raise BadMagicError(f"not a weights file: magic {magic!r}")
        (manifest_len,) = struct.unpack("<I", _read_exact(fh, 4, "manifest length"))
        manifest_raw = _read_exact(fh, manifest_len, "manifest")
        try:
            doc = json.loads(manifest_raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ManifestError(f"manifest is not valid UTF-8 JSON: {exc}") from exc
        if not isinstance(doc, dict) or "entries" not in doc:
            raise ManifestError("manifest missing 'entries'")
        version = doc.get("format_version", 1)
        payload = fh.read()

        entries: dict[str, tuple[int, tuple[int, ...]]] = {}
        spans: list[tuple[int, int, str]] = []
        for item in doc["entries"]:
            try:
                name = item["name"]
                offset = int(item["offset"])
                shape = tuple(int(s) for s in item["shape"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"malformed manifest entry {item!r}") from exc
            if name in entries:
                raise ManifestError(f"duplicate tensor name {name!r}")
            if not shape or any(s < 1 for s in shape) or len(shape) > 4:
                raise DimOverflowError(f"tensor {name!r}: invalid shape {shape}")
            count = 1
            for s in shape:
                count *= s
            if count > MAX_ELEMENTS:
                raise DimOverflowError(f"tensor {name!r}: {count} elements exceeds limit")
            end = offset + count * 4
            if offset < 0 or end > len(payload):
                raise TruncatedFileError(
                    f"tensor {name!r}: extent [{offset}, {end}) outside payload of {len(payload)} bytes"
                )
            entries[name] = (offset, shape)
            spans.append((offset, end, name))
        spans.sort()
        for (s0, e0, n0), (s1, _e1, n1) in zip(spans, spans[1:]):
            if s1 < e0:
                raise ManifestError(f"tensors {n0!r} and {n1!r} overlap in the payload")

        arrays = {
            name: np.frombuffer(payload, dtype=_F4, count=int(np.prod(shape)), offset=off)
            .reshape(shape)
            .copy()
            for name, (off, shape) in entries.items()
        }
        return arrays, Manifest(entries=entries, format_version=version)
    finally:
        if owned:
            fh.close()


# ---------------------------------------------------------------------------
# PGM / PPM images
# ---------------------------------------------------------------------------

def read_image(target) -> np.ndarray:
    """Read a binary P5/P6 image into a (1, 3, h, w) float32 tensor in [0, 1]."""
    fh, owned = _open(target, "rb")
    try:
        data = fh.read()
    finally:
        if owned:
            fh.close()
    if len(data) < 2 or data[:2] not in (b"P5", b"P6"):
        raise BadMagicError(f"not a binary PGM/PPM: starts with {data[:2]!r}")
    kind = data[:2]

    pos = 2
    tokens: list[int] = []
    while len(tokens) < 3:
        if pos >= len(data):
            raise TruncatedFileError("image header ended before width/height/maxval")
        ch = data[pos : pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace():
                pos += 1
            token = data[start:pos]
            if not token.isdigit():
                raise FormatError(f"non-numeric header token {token!r}")
            tokens.append(int(token))
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = tokens
    if width < 1 or height < 1:
        raise DimOverflowError(f"invalid image size {width}x{height}")
    if not 0 < maxval <= 255:
        raise FormatError(f"only 8-bit images supported, maxval={maxval}")
    n_channels = 1 if kind == b"P5" else 3
    need = width * height * n_channels
    raw = data[pos : pos + need]
    if len(raw) != need:
        raise TruncatedFileError(f"image payload: wanted {need} bytes, got {len(raw)}")
    pixels = np.frombuffer(raw, dtype=np.uint8).astype(np.float32) / np.float32(maxval)
    if kind == b"P5":
        plane = pixels.reshape(1, 1, height, width)
        return np.repeat(plane, 3, axis=1)
    return pixels.reshape(1, height, width, 3).transpose(0, 3, 1, 2).copy()


# ---------------------------------------------------------------------------
# activation-record directories (mask export for the analysis pipeline)
# ---------------------------------------------------------------------------

RECORD_MANIFEST = "manifest.json"


def save_record(record: ActivationRecord, directory: str | Path) -> list[Path]:
    """Write one LSKT file per (block, kernel) mask: ``B_<stage>_<depth>_<n>``.

    A manifest.json carries the per-kernel receptive fields and block keys so
    the analysis stage can rebuild the record.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for (stage, depth), masks in sorted(record.masks.items()):
        for n_idx in range(record.n_kernels):
            path = out / f"B_{stage}_{depth}_{n_idx + 1}.lskt"
            write_tensor(path, masks[:, n_idx : n_idx + 1])
            written.append(path)
    doc = {
        "format_version": 1,
        "rf": list(record.rf),
        "blocks": [[s, d] for s, d in sorted(record.masks.keys())],
    }
    (out / RECORD_MANIFEST).write_text(json.dumps(doc, indent=1))
    return written


def load_record(directory: str | Path) -> ActivationRecord:
    """Rebuild an activation record from a mask directory."""
    src = Path(directory)
    manifest_path = src / RECORD_MANIFEST
    if not manifest_path.is_file():
        raise ManifestError(f"no {RECORD_MANIFEST} in {src}")
    try:
        doc = json.loads(manifest_path.read_text())
        rf = tuple(int(v) for v in doc["rf"])
        blocks = [tuple(int(v) for v in pair) for pair in doc["blocks"]]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"malformed record manifest in {src}: {exc}") from exc
    record = ActivationRecord(rf=rf)
    for stage, depth in blocks:
        parts = []
        for n_idx in range(len(rf)):
            path = src / f"B_{stage}_{depth}_{n_idx + 1}.lskt"
            if not path.is_file():
                raise FormatError(f"missing mask file {path.name} in {src}")
            parts.append(read_tensor(path))
        record.masks[(stage, depth)] = np.concatenate(parts, axis=1)
    return record
