"""Spatial data containers and file I/O.

Samples travel as CSV (``x,y,z,value,well``); gridded variables use a
GSLIB-style ASCII layout::

    <title>
    nx ny nz x0 y0 z0 dx dy dz
    1 <variable name>
    v_000
    v_100
    ...

Values are listed x-fastest, then y, then z. ``(x0, y0, z0)`` is the center
of the first cell. Missing cells carry the sentinel ``-999.0``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

MISSING = -999.0
SAMPLE_HEADER = ["x", "y", "z", "value", "well"]


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Location:
    x: float
    y: float
    z: float
    cell: int | None = None

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise DataError(f"non-finite coordinate in {self!r}")

    @property
    def xyz(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.z)


class SampleSet:
    """Hard data: one record per location with a target value and a well id."""

    def __init__(self, coords, values, wells: Sequence[str] | None = None):
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        values = np.asarray(values, dtype=float).ravel()
        if coords.shape[1] != 3:
            raise DataError(f"coords must have 3 columns, got {coords.shape}")
        if coords.shape[0] != values.size:
            raise DataError("coords and values differ in length")
        if not np.all(np.isfinite(coords)):
            raise DataError("non-finite sample coordinate")
        if not np.all(np.isfinite(values)):
            raise DataError("non-finite sample value")
        if wells is None:
            wells = [""] * values.size
        wells = tuple(str(w) for w in wells)
        if len(wells) != values.size:
            raise DataError("wells and values differ in length")
        dup = _first_duplicate(coords)
        if dup is not None:
            i, j = dup
            raise DataError(
                f"duplicate location {tuple(coords[j])} at records {i} and {j}"
            )
        self.coords = _frozen(coords)
        self.values = _frozen(values)
        self.wells = wells

    def __len__(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        return f"SampleSet(n={len(self)})"

    @property
    def locations(self) -> list[Location]:
        return [Location(*map(float, c)) for c in self.coords]

    def subset(self, indices) -> "SampleSet":
        idx = np.asarray(indices, dtype=int)
        return SampleSet(self.coords[idx], self.values[idx], [self.wells[i] for i in idx])

    def with_values(self, values) -> "SampleSet":
        return SampleSet(self.coords, values, self.wells)


def _first_duplicate(coords: np.ndarray):
    seen: dict[tuple, int] = {}
    for i, c in enumerate(map(tuple, coords.tolist())):
        if c in seen:
            return seen[c], i
        seen[c] = i
    return None


def load_samples(path) -> SampleSet:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"sample file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != SAMPLE_HEADER:
            raise DataError(f"{path}: header must be exactly {','.join(SAMPLE_HEADER)}")
        coords, values, wells = [], [], []
        seen: dict[tuple, int] = {}
        # row numbers are 1-based file lines; the header is row 1
        for rownum, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 5:
                raise DataError(f"{path}: row {rownum}: expected 5 fields, got {len(row)}")
            try:
                x, y, z, v = (float(c) for c in row[:4])
            except ValueError:
                raise DataError(f"{path}: row {rownum}: non-numeric coordinate or value") from None
            if not all(math.isfinite(t) for t in (x, y, z, v)):
                raise DataError(f"{path}: row {rownum}: non-finite entry")
            key = (x, y, z)
            if key in seen:
                raise DataError(
                    f"{path}: row {rownum}: duplicate location {key} (first seen at row {seen[key]})"
                )
            seen[key] = rownum
            coords.append(key)
            values.append(v)
            wells.append(row[4].strip())
    if not values:
        raise DataError(f"{path}: no data rows")
    return SampleSet(coords, values, wells)


def write_samples(samples: SampleSet, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SAMPLE_HEADER)
        for (x, y, z), v, well in zip(samples.coords.tolist(), samples.values.tolist(), samples.wells):
            w.writerow([repr(x), repr(y), repr(z), repr(v), well])


@dataclass(frozen=True)
class GridGeometry:
    nx: int
    ny: int
    nz: int
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    cell_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise DataError(f"grid dimensions must be positive, got {self.shape}")
        if min(self.cell_size) <= 0 or not all(map(math.isfinite, self.cell_size)):
            raise DataError(f"cell sizes must be positive, got {self.cell_size}")
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "cell_size", tuple(float(v) for v in self.cell_size))

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny * self.nz

    def ijk(self, index):
        index = np.asarray(index)
        i = index % self.nx
        j = (index // self.nx) % self.ny
        k = index // (self.nx * self.ny)
        return i, j, k

    def index(self, i, j, k):
        return np.asarray(i) + self.nx * (np.asarray(j) + self.ny * np.asarray(k))

    def cell_centers(self, index=None) -> np.ndarray:
        if index is None:
            index = np.arange(self.n_cells)
        i, j, k = self.ijk(index)
        o, d = self.origin, self.cell_size
        return np.column_stack([o[0] + i * d[0], o[1] + j * d[1], o[2] + k * d[2]]).astype(float)

    def locate(self, coords, strict: bool = True) -> np.ndarray:
        """Cell index of each point (snapped to the nearest cell center).

        Points outside the grid raise, or map to -1 when ``strict`` is False.
        """
        c = np.atleast_2d(np.asarray(coords, dtype=float))
        ijk = np.rint((c - np.asarray(self.origin)) / np.asarray(self.cell_size)).astype(np.int64)
        inside = np.all((ijk >= 0) & (ijk < np.asarray(self.shape)), axis=1)
        if strict and not inside.all():
            bad = int(np.flatnonzero(~inside)[0])
            raise DataError(f"location {tuple(c[bad])} (row {bad}) is outside the grid")
        out = self.index(ijk[:, 0], ijk[:, 1], ijk[:, 2])
        return np.where(inside, out, -1)


@dataclass(frozen=True)
class GridVolume:
    """A regular 3D lattice holding one scalar per cell (x-fastest order)."""

    geometry: GridGeometry
    values: np.ndarray = field(repr=False)
    name: str = "value"

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).ravel()
        if vals.size != self.geometry.n_cells:
            raise DataError(
                f"grid '{self.name}' has {vals.size} values, expected {self.geometry.n_cells}"
            )
        object.__setattr__(self, "values", _frozen(vals))

    @classmethod
    def full(cls, geometry: GridGeometry, fill: float, name: str = "value") -> "GridVolume":
        return cls(geometry, np.full(geometry.n_cells, fill, dtype=float), name)

    @property
    def missing(self) -> np.ndarray:
        return self.values == MISSING

    def cell(self, i: int, j: int, k: int) -> float:
        return float(self.values[int(self.geometry.index(i, j, k))])

    def as_array(self) -> np.ndarray:
        """Values reshaped to ``(nz, ny, nx)``."""
        g = self.geometry
        return self.values.reshape(g.nz, g.ny, g.nx)

    def with_values(self, values, name: str | None = None) -> "GridVolume":
        return GridVolume(self.geometry, values, self.name if name is None else name)


def load_grid(path) -> GridVolume:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"grid file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if len(lines) < 3:
        raise DataError(f"{path}: truncated header")
    try:
        dims = lines[1].split()
        nx, ny, nz = (int(v) for v in dims[:3])
        x0, y0, z0, dx, dy, dz = (float(v) for v in dims[3:9])
        if len(dims) != 9:
            raise ValueError
    except ValueError:
        raise DataError(f"{path}: line 2 must be 'nx ny nz x0 y0 z0 dx dy dz'") from None
    head = lines[2].split(maxsplit=1)
    if not head or head[0] != "1":
        raise DataError(f"{path}: line 3 must declare exactly 1 variable")
    if len(head) == 2:
        name, body = head[1].strip(), lines[3:]
    else:
        # name on its own line (classic GSLIB)
        if len(lines) < 4:
            raise DataError(f"{path}: missing variable name")
        name, body = lines[3].strip(), lines[4:]
    geometry = GridGeometry(nx, ny, nz, (x0, y0, z0), (dx, dy, dz))
    tokens = " ".join(body).split()
    if len(tokens) != geometry.n_cells:
        raise DataError(
            f"{path}: value count mismatch: header declares {nx}x{ny}x{nz}="
            f"{geometry.n_cells}, file has {len(tokens)}"
        )
    try:
        values = np.array([float(t) for t in tokens])
    except ValueError:
        raise DataError(f"{path}: non-numeric grid value") from None
    return GridVolume(geometry, values, name)


def write_grid(grid: GridVolume, path, title: str | None = None) -> None:
    g = grid.geometry
    header = [
        title or grid.name,
        " ".join(map(str, (g.nx, g.ny, g.nz)))
        + " "
        + " ".join(repr(v) for v in (*g.origin, *g.cell_size)),
        f"1 {grid.name}",
    ]
    body = "\n".join(map(repr, grid.values.tolist()))
    Path(path).write_text("\n".join(header) + "\n" + body + "\n", encoding="utf-8")


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray = field(repr=False)
    names: tuple[str, ...]

    def __post_init__(self):
        vals = np.atleast_2d(np.asarray(self.values, dtype=float))
        names = tuple(self.names)
        if vals.shape[1] != len(names):
            raise DataError(f"{vals.shape[1]} feature columns but {len(names)} names")
        if len(set(names)) != len(names):
            raise DataError(f"feature names are not unique: {names}")
        if not np.all(np.isfinite(vals)):
            raise DataError("feature matrix contains non-finite values")
        object.__setattr__(self, "values", _frozen(vals))
        object.__setattr__(self, "names", names)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def p_total(self) -> int:
        return self.values.shape[1]


COORD_NAMES = ("x", "y", "z")


def as_coords(locations) -> np.ndarray:
    """Accept a SampleSet, a Location list or an ``(n, 3)`` array."""
    if isinstance(locations, SampleSet):
        return np.asarray(locations.coords)
    if isinstance(locations, Location):
        return np.array([locations.xyz])
    if isinstance(locations, (list, tuple)) and locations and isinstance(locations[0], Location):
        return np.array([loc.xyz for loc in locations], dtype=float)
    return np.atleast_2d(np.asarray(locations, dtype=float)).reshape(-1, 3)


def check_same_geometry(grids: Iterable[GridVolume]) -> GridGeometry:
    grids = list(grids)
    if not grids:
        raise DataError("at least one grid is required")
    geom = grids[0].geometry
    for g in grids[1:]:
        if g.geometry != geom:
            raise DataError(f"grid '{g.name}' geometry differs from '{grids[0].name}'")
    return geom


def assemble_features(locations, secondary: Sequence[GridVolume], include_coords: bool = True) -> FeatureMatrix:
    """Build feature rows: secondary grid values in order, then x, y, z cell centers."""
    coords = as_coords(locations)
    geom = check_same_geometry(secondary)
    cells = geom.locate(coords, strict=True)
    cols, names = [], []
    for g in secondary:
        v = g.values[cells]
        miss = np.flatnonzero(v == MISSING)
        if miss.size:
            r = int(miss[0])
            raise DataError(f"grid '{g.name}' is missing at location {tuple(coords[r])} (row {r})")
        cols.append(v)
        names.append(g.name)
    if include_coords:
        centers = geom.cell_centers(cells)
        cols.extend(centers.T)
        names.extend(COORD_NAMES)
    return FeatureMatrix(np.column_stack(cols) if cols else np.empty((len(coords), 0)), tuple(names))
