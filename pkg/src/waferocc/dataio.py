"""WMD1 binary dataset files and a CSV-manifest converter.

Layout (little-endian)::

    b"WMD1"  u32 count
    count x [ u16 h | u16 w | u8 label | h*w bytes of cells ]
"""

from __future__ import annotations

import csv
import hashlib
import os
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .wafer import DatasetSplit, Label, WaferMap

MAGIC = b"WMD1"
_HEADER = struct.Struct("<4sI")
_RECORD = struct.Struct("<HHB")


class DatasetFormatError(ValueError):
    """Base class for WMD1 parse failures."""


class BadMagicError(DatasetFormatError):
    pass


class TruncatedRecordError(DatasetFormatError):
    pass


class InvalidCellError(DatasetFormatError):
    pass


class RecordValidationError(DatasetFormatError):
    pass


def dumps(maps: Iterable[WaferMap]) -> bytes:
    maps = list(maps)
    chunks = [_HEADER.pack(MAGIC, len(maps))]
    for m in maps:
        h, w = m.cells.shape
        if h > 0xFFFF or w > 0xFFFF:
            raise ValueError(f"map {h}x{w} exceeds the u16 extent limit")
        chunks.append(_RECORD.pack(h, w, int(m.label)))
        chunks.append(np.ascontiguousarray(m.cells, dtype=np.uint8).tobytes())
    return b"".join(chunks)


def loads(buf: bytes) -> list[WaferMap]:
    if len(buf) < _HEADER.size:
        raise TruncatedRecordError("file shorter than the WMD1 header")
    magic, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    pos = _HEADER.size
    maps = []
    for i in range(count):
        if pos + _RECORD.size > len(buf):
            raise TruncatedRecordError(f"record {i}: header truncated at byte {pos}")
        h, w, code = _RECORD.unpack_from(buf, pos)
        pos += _RECORD.size
        if h == 0 or w == 0:
            raise RecordValidationError(f"record {i}: zero extent {h}x{w}")
        try:
            label = Label(code)
        except ValueError:
            raise RecordValidationError(f"record {i}: unknown label code {code}") from None
        n = h * w
        if pos + n > len(buf):
            raise TruncatedRecordError(f"record {i}: expected {n} cell bytes, {len(buf) - pos} left")
        cells = np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos).reshape(h, w).copy()
        pos += n
        if cells.max() > 2:
            raise InvalidCellError(f"record {i}: cell value {int(cells.max())} outside {{0,1,2}}")
        if not cells.any():
            raise RecordValidationError(f"record {i}: map has no dies")
        maps.append(WaferMap(cells, label))
    if pos != len(buf):
        raise DatasetFormatError(f"{len(buf) - pos} trailing bytes after {count} records")
    return maps


def save_dataset(maps: Iterable[WaferMap] | DatasetSplit, path) -> None:
    """Write maps (or every map of a split, train then valid then test) to ``path``."""
    if isinstance(maps, DatasetSplit):
        maps = [*maps.train, *maps.valid, *maps.test]
    data = dumps(maps)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_dataset(path) -> list[WaferMap]:
    return loads(Path(path).read_bytes())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def parse_grid(text: str) -> np.ndarray:
    """Parse a text grid: one row per line, cells as digits, optionally separated."""
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        tokens = line.replace(",", " ").split()
        if len(tokens) == 1:
            tokens = list(tokens[0])
        try:
            rows.append([int(t) for t in tokens])
        except ValueError:
            raise DatasetFormatError(f"non-numeric cell in grid row {line!r}") from None
    if not rows:
        raise RecordValidationError("empty grid")
    if len({len(r) for r in rows}) != 1:
        raise RecordValidationError("grid rows have unequal lengths")
    cells = np.asarray(rows)
    if cells.min() < 0 or cells.max() > 2:
        raise InvalidCellError("grid cell outside {0,1,2}")
    return cells.astype(np.uint8)


def convert_manifest(csv_path) -> list[WaferMap]:
    """Read a ``map_path,label`` CSV; relative map paths resolve against the CSV's folder."""
    csv_path = Path(csv_path)
    base = csv_path.parent
    maps = []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"map_path", "label"} <= set(reader.fieldnames):
            raise DatasetFormatError("manifest needs columns map_path,label")
        for row in reader:
            p = Path(row["map_path"])
            if not p.is_absolute():
                p = base / p
            cells = parse_grid(p.read_text())
            try:
                label = Label.parse(row["label"] or "")
            except ValueError as exc:
                raise DatasetFormatError(str(exc)) from None
            try:
                maps.append(WaferMap(cells, label))
            except ValueError as exc:
                raise RecordValidationError(f"{p}: {exc}") from None
    return maps


def write_grid(wmap: WaferMap, path) -> None:
    Path(path).write_text("\n".join("".join(str(v) for v in row) for row in wmap.cells) + "\n")


def write_manifest(maps: Sequence[WaferMap], folder) -> Path:
    """Export maps as text grids plus a manifest; the inverse of :func:`convert_manifest`."""
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    manifest = folder / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["map_path", "label"])
        for i, m in enumerate(maps):
            name = f"map_{i:06d}.txt"
            write_grid(m, folder / name)
            writer.writerow([name, m.label.pretty])
    return manifest
