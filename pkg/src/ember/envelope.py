"""Grid-wide conditional distributions and the products derived from them."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse

from ._kernels import segment_quantile
from .data_model import COORD_NAMES, MISSING, GridGeometry, GridVolume, check_same_geometry
from .errors import DataError
from .forest import ConditionalCDF, EmberModel, forest_weights, predict_features_many

_CHUNK = 2048
QUANTILE_LEVELS = np.linspace(0.0, 1.0, 101)


def _coalesce_rows(rows, cols, vals, n_rows, n_cols):
    """CSR with duplicates summed in input order and column indices sorted."""
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    if rows.size == 0:
        return np.zeros(n_rows + 1, np.int64), cols.astype(np.int64), vals
    first = np.ones(rows.size, dtype=bool)
    first[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
    starts = np.flatnonzero(first)
    data = np.add.reduceat(vals, starts)
    r, c = rows[starts], cols[starts]
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.add.at(indptr, r + 1, 1)
    return np.cumsum(indptr), c.astype(np.int64), data


def _row_cumsum(indptr, data):
    """Cumulative sum restarting at each CSR row, accumulated left to right."""
    out = np.empty_like(data)
    for r in np.flatnonzero(np.diff(indptr)):
        sl = slice(indptr[r], indptr[r + 1])
        out[sl] = np.cumsum(data[sl])
    return out


@dataclass
class Envelope:
    """Sparse per-cell CDFs over a shared sorted support of training targets.

    Row ``c`` of the CSR triplet ``(indptr, indices, weights)`` lists support
    positions (ascending) and their weights for cell ``c``. Cells whose
    features are missing have empty rows and ``valid[c] = False``.
    """

    geometry: GridGeometry
    support: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    valid: np.ndarray
    provenance: dict = field(default_factory=dict)
    cum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.cum = _row_cumsum(self.indptr, self.weights)

    @classmethod
    def from_cdfs(cls, geometry: GridGeometry, cdfs: Sequence[ConditionalCDF | None], provenance=None) -> "Envelope":
        """Assemble an envelope from explicit per-cell CDFs (``None`` = missing)."""
        if len(cdfs) != geometry.n_cells:
            raise DataError(f"need {geometry.n_cells} CDFs, got {len(cdfs)}")
        present = [c for c in cdfs if c is not None]
        support = np.unique(np.concatenate([c.support for c in present])) if present else np.empty(0)
        rows, cols, vals = [], [], []
        for r, c in enumerate(cdfs):
            if c is None:
                continue
            rows.append(np.full(c.support.size, r))
            cols.append(np.searchsorted(support, c.support))
            vals.append(c.weights)
        cat = (lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.empty(0, dt))
        indptr, indices, data = _coalesce_rows(
            cat(rows, np.int64), cat(cols, np.int64), cat(vals, float), geometry.n_cells, support.size
        )
        valid = np.array([c is not None for c in cdfs], dtype=bool)
        return cls(geometry, support, indptr, indices, data, valid, dict(provenance or {}))

    @property
    def n_cells(self) -> int:
        return self.geometry.n_cells

    def _row(self, cell: int) -> slice:
        return slice(self.indptr[cell], self.indptr[cell + 1])

    def cdf(self, cell: int) -> ConditionalCDF | None:
        if not self.valid[cell]:
            return None
        sl = self._row(cell)
        return ConditionalCDF(self.support[self.indices[sl]], self.weights[sl])

    def _per_cell(self, func) -> np.ndarray:
        out = np.full(self.n_cells, np.nan)
        for c in np.flatnonzero(self.valid):
            sl = self._row(c)
            out[c] = func(self.support[self.indices[sl]], self.weights[sl], self.cum[sl])
        return out

    def mean(self) -> np.ndarray:
        return self._per_cell(lambda s, w, _c: float(np.dot(w, s)))

    def std(self) -> np.ndarray:
        def f(s, w, _c):
            mu = np.dot(w, s)
            return float(np.sqrt(max(np.dot(w, (s - mu) ** 2), 0.0)))

        return self._per_cell(f)

    def support_min(self) -> np.ndarray:
        return self._per_cell(lambda s, w, c: s[0])

    def support_max(self) -> np.ndarray:
        return self._per_cell(lambda s, w, c: s[-1])

    def quantile(self, p) -> np.ndarray:
        """Lower-convention quantile per cell; ``p`` scalar or one level per cell."""
        p = np.broadcast_to(np.asarray(p, dtype=float), (self.n_cells,))
        out = np.full(self.n_cells, np.nan)
        cells = np.flatnonzero(self.valid)
        if cells.size == 0:
            return out
        sub_ptr = np.concatenate([[0], np.cumsum(np.diff(self.indptr)[cells])])
        take = np.concatenate([np.arange(self.indptr[c], self.indptr[c + 1]) for c in cells])
        pos = segment_quantile(sub_ptr, self.cum[take], np.ascontiguousarray(p[cells]))
        out[cells] = self.support[self.indices[take[pos]]]
        return out

    def cdf_at(self, t) -> np.ndarray:
        """``F(t) = P(Z <= t)`` per cell (right-continuous)."""
        t = np.broadcast_to(np.asarray(t, dtype=float), (self.n_cells,))
        out = np.full(self.n_cells, np.nan)
        for c in np.flatnonzero(self.valid):
            sl = self._row(c)
            s = self.support[self.indices[sl]]
            k = np.searchsorted(s, t[c], side="right")
            out[c] = 0.0 if k == 0 else min(self.cum[sl][k - 1], 1.0)
        return out

    def prob_interval(self, a: float, b: float) -> np.ndarray:
        if a > b:
            raise DataError(f"interval lower bound {a} exceeds upper bound {b}")
        return self._per_cell(lambda s, w, _c: float(min(w[(s >= a) & (s <= b)].sum(), 1.0)))

    def prob_above(self, t: float) -> np.ndarray:
        return 1.0 - self.cdf_at(t)

    def quantile_table(self, levels=QUANTILE_LEVELS) -> np.ndarray:
        """Lossy ``(n_cells, len(levels))`` table; level 0 is the support minimum, 1 the maximum."""
        levels = np.asarray(levels, dtype=float)
        table = np.full((self.n_cells, levels.size), np.nan)
        for j, p in enumerate(levels):
            if p <= 0.0:
                table[:, j] = self.support_min()
            elif p >= 1.0:
                table[:, j] = self.support_max()
            else:
                table[:, j] = self.quantile(p)
        return table

    def dump_csv(self, path, cells=None) -> None:
        """Per-cell CDF atoms as ``cell_index,z,weight``."""
        cells = np.flatnonzero(self.valid) if cells is None else np.asarray(cells, dtype=int)
        lines = ["cell_index,z,weight"]
        for c in cells.tolist():
            sl = self._row(c)
            for z, w in zip(self.support[self.indices[sl]].tolist(), self.weights[sl].tolist()):
                lines.append(f"{c},{z!r},{w!r}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _base_rows(model: EmberModel, geometry: GridGeometry, grids: dict, cells: np.ndarray) -> np.ndarray:
    centers = None
    cols = []
    for name in model.base_names:
        if name in grids:
            cols.append(grids[name].values[cells])
        elif name in COORD_NAMES:
            if centers is None:
                centers = geometry.cell_centers(cells)
            cols.append(centers[:, COORD_NAMES.index(name)])
        else:
            raise DataError(f"model feature {name!r} has no matching secondary grid")
    return np.column_stack(cols) if cols else np.empty((cells.size, 0))


def model_id(model: EmberModel) -> str:
    h = hashlib.sha256()
    for t in model.trees:
        h.update(t.threshold.tobytes())
        h.update(t.leaf_samples.tobytes())
    h.update(model.samples.values.tobytes())
    return h.hexdigest()[:16]


def build_envelope(model: EmberModel, samples, secondary: Sequence[GridVolume], geometry: GridGeometry | None = None) -> Envelope:
    """Conditional CDF at every cell whose secondary values are all present."""
    if secondary:
        geom = check_same_geometry(secondary)
        if geometry is not None and geometry != geom:
            raise DataError("requested geometry differs from the secondary grids")
    elif geometry is None:
        raise DataError("geometry is required when no secondary grids are given")
    else:
        geom = geometry
    grids = {g.name: g for g in secondary}
    if len(grids) != len(secondary):
        raise DataError("secondary grid names must be unique")
    needed = [n for n in model.base_names if n not in COORD_NAMES]
    unknown = [n for n in needed if n not in grids]
    if unknown:
        raise DataError(f"no secondary grid for model feature(s) {unknown}")
    valid = np.ones(geom.n_cells, dtype=bool)
    for n in needed:
        valid &= grids[n].values != MISSING
    cells = np.flatnonzero(valid)
    support, inverse = np.unique(model.targets, return_inverse=True)
    inverse = inverse.ravel()
    rows, cols, vals = [], [], []
    for start in range(0, cells.size, _CHUNK):
        chunk = cells[start : start + _CHUNK]
        base = _base_rows(model, geom, grids, chunk)
        Y = predict_features_many(model, geom.cell_centers(chunk), base, samples)
        W = forest_weights(model, Y).tocoo()
        rows.append(chunk[W.row])
        cols.append(inverse[W.col])
        vals.append(W.data)
    cat = (lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.empty(0, dt))
    indptr, indices, data = _coalesce_rows(
        cat(rows, np.int64), cat(cols, np.int64), cat(vals, float), geom.n_cells, support.size
    )
    prov = {"model_id": model_id(model), "features": list(model.feature_names)}
    return Envelope(geom, support, indptr, indices, data, valid, prov)


PRODUCT_KINDS = ("mean", "quantile", "spread", "prob_above", "prob_interval")


def product(envelope: Envelope, kind: str, *args: float) -> GridVolume:
    """Cellwise product grid; missing cells carry the sentinel.

    ``product(env, "mean")``, ``("quantile", p)``, ``("spread", p_lo, p_hi)``,
    ``("prob_above", t)``, ``("prob_interval", a, b)``.
    """
    if kind == "mean":
        _nargs(kind, args, 0)
        vals, name = envelope.mean(), "mean"
    elif kind == "quantile":
        (p,) = _nargs(kind, args, 1)
        _check_level(p)
        vals, name = envelope.quantile(p), f"p{_fmt(100 * p)}"
    elif kind == "spread":
        lo, hi = _nargs(kind, args, 2)
        _check_level(lo)
        _check_level(hi)
        if lo > hi:
            raise DataError(f"spread requires p_lo <= p_hi, got {lo} > {hi}")
        vals, name = envelope.quantile(hi) - envelope.quantile(lo), "spread"
    elif kind == "prob_above":
        (t,) = _nargs(kind, args, 1)
        vals, name = envelope.prob_above(t), f"prob_above_{_fmt(t)}"
    elif kind == "prob_interval":
        a, b = _nargs(kind, args, 2)
        vals, name = envelope.prob_interval(a, b), f"prob_{_fmt(a)}_{_fmt(b)}"
    else:
        raise DataError(f"unknown product kind {kind!r}; expected one of {PRODUCT_KINDS}")
    vals = np.where(envelope.valid, vals, MISSING)
    return GridVolume(envelope.geometry, vals, name)


def _nargs(kind, args, n):
    if len(args) != n:
        raise DataError(f"product {kind!r} takes {n} parameter(s), got {len(args)}")
    return tuple(float(a) for a in args)


def _check_level(p):
    if not 0.0 < p < 1.0:
        raise DataError(f"quantile level must lie in (0, 1), got {p}")


def _fmt(v: float) -> str:
    return f"{v:g}"
