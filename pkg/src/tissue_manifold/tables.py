"""Voxel tables: N sequence vectors plus optional coordinates and mask."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError

DEFAULT_CHANNELS = ("T1", "T1c", "T2", "FLAIR", "ADC")
_COORDS = ("x", "y", "z")


@dataclass(frozen=True)
class VoxelTable:
    """Rows of normalized or raw intensities, one per voxel.

    ``labels`` is hidden metadata (phantom component indices) and is never
    written to disk.
    """

    values: np.ndarray
    channels: tuple = DEFAULT_CHANNELS
    coords: np.ndarray | None = None
    mask: np.ndarray | None = None
    labels: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values.reshape(1, -1)
        if values.ndim != 2 or values.shape[0] < 1:
            raise InputError("a voxel table needs at least one row")
        channels = tuple(str(c) for c in self.channels)
        if len(channels) != values.shape[1]:
            if self.channels == DEFAULT_CHANNELS:
                channels = tuple(f"c{i}" for i in range(values.shape[1])) \
                    if values.shape[1] != len(DEFAULT_CHANNELS) else DEFAULT_CHANNELS
            else:
                raise InputError(f"{len(channels)} channel names for {values.shape[1]} columns")
        if len(set(channels)) != len(channels):
            raise InputError("channel names must be unique")
        if set(channels) & set(_COORDS) or "mask" in channels:
            raise InputError("channel names may not reuse x, y, z or mask")
        if not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(values), axis=1))[0])
            raise InputError(f"non-finite intensity in row {bad}")
        n = values.shape[0]
        coords = self.coords
        if coords is not None:
            coords = np.asarray(coords, dtype=np.int64)
            if coords.shape != (n, 3):
                raise InputError("coords must have shape (N, 3)")
        mask = self.mask
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (n,):
                raise InputError("mask must have one flag per row")
        labels = self.labels
        if labels is not None:
            labels = np.asarray(labels)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def masked_rows(self) -> np.ndarray:
        """Indices of rows inside the mask (all rows when there is no mask)."""
        if self.mask is None:
            return np.arange(self.n)
        return np.flatnonzero(self.mask)

    def masked_values(self) -> np.ndarray:
        return self.values if self.mask is None else self.values[self.mask]

    def subset(self, rows) -> "VoxelTable":
        rows = np.asarray(rows)
        pick = lambda a: None if a is None else a[rows]  # noqa: E731
        return VoxelTable(self.values[rows], self.channels, pick(self.coords),
                          pick(self.mask), pick(self.labels))

    def with_values(self, values) -> "VoxelTable":
        return VoxelTable(values, self.channels, self.coords, self.mask, self.labels)

    def __eq__(self, other):
        if not isinstance(other, VoxelTable):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        return (self.channels == other.channels and same(self.values, other.values)
                and same(self.coords, other.coords) and same(self.mask, other.mask))


def format_float(x: float) -> str:
    """Shortest decimal that round-trips to the same float64."""
    return repr(float(x))


def voxel_table_to_csv(table: VoxelTable) -> str:
    buf = io.StringIO()
    header = []
    if table.coords is not None:
        header += list(_COORDS)
    header += list(table.channels)
    if table.mask is not None:
        header.append("mask")
    buf.write(",".join(header) + "\n")
    for i in range(table.n):
        cells = []
        if table.coords is not None:
            cells += [str(int(c)) for c in table.coords[i]]
        cells += [format_float(v) for v in table.values[i]]
        if table.mask is not None:
            cells.append("1" if table.mask[i] else "0")
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()


def write_voxel_table(path, table: VoxelTable) -> None:
    path = Path(path)
    try:
        path.write_text(voxel_table_to_csv(table), encoding="utf-8", newline="\n")
    except OSError as exc:
        raise OSError(f"cannot write voxel table to {path}: {exc}") from exc


def parse_voxel_table(text: str) -> VoxelTable:
    """Parse CSV text with header ``[x,y,z,]<channels...>[,mask]``."""
    rows = list(csv.reader(io.StringIO(text.replace("\r\n", "\n"))))
    while rows and not rows[-1]:
        rows.pop()
    if not rows or not rows[0] or not any(c.strip() for c in rows[0]):
        raise FormatError("missing header", line=1)
    header = [c.strip() for c in rows[0]]
    if _is_number(header[0]):
        raise FormatError("missing header (first row is numeric)", line=1)
    has_coords = header[:3] == list(_COORDS)
    if not has_coords and any(c in _COORDS for c in header):
        raise FormatError("spatial columns must be x,y,z and come first", line=1)
    has_mask = header[-1] == "mask"
    channels = header[3 if has_coords else 0: -1 if has_mask else None]
    if not channels:
        raise FormatError("no intensity channels in header", line=1)
    if len(set(channels)) != len(channels):
        raise FormatError("duplicate channel names", line=1)
    width = len(header)
    values, coords, mask = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise FormatError(f"expected {width} cells, found {len(row)}", line=lineno)
        cells = [c.strip() for c in row]
        try:
            if has_coords:
                coords.append([int(c) for c in cells[:3]])
            vals = [float(c) for c in cells[3 if has_coords else 0: -1 if has_mask else None]]
            if has_mask:
                if cells[-1] not in ("0", "1"):
                    raise ValueError(cells[-1])
                mask.append(cells[-1] == "1")
        except ValueError as exc:
            raise FormatError(f"non-numeric cell ({exc})", line=lineno) from None
        if not all(np.isfinite(vals)):
            raise FormatError("non-finite intensity", line=lineno)
        values.append(vals)
    if not values:
        raise FormatError("table has no data rows", line=2)
    return VoxelTable(
        np.array(values, dtype=np.float64),
        tuple(channels),
        np.array(coords, dtype=np.int64) if has_coords else None,
        np.array(mask, dtype=bool) if has_mask else None,
    )


def read_voxel_table(path) -> VoxelTable:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read voxel table {path}: {exc}") from exc
    try:
        text = raw.decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path} is not UTF-8: {exc}") from None
    return parse_voxel_table(text)


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True
