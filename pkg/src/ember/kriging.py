"""Simple and ordinary kriging with anisotropic neighbour search.

All systems for a batch of targets are assembled and solved together, one
LAPACK call per target, so a single-target call and a grid sweep produce the
same numbers bit for bit.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .data_model import SampleSet, as_coords
from .errors import DataError, EmberWarning, NumericalError
from .variography import VariogramModel, apply_linear, rotation_matrix

KINDS = ("simple", "ordinary")
_BLOCK = 512


@dataclass(frozen=True)
class KrigingSpec:
    kind: str
    variogram: VariogramModel
    mean: float | None = None
    max_neighbors: int | None = 32
    max_radius: float = math.inf
    name: str = "krige"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"kriging kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "simple" and (self.mean is None or not math.isfinite(self.mean)):
            raise DataError("simple kriging requires a finite mean")
        if self.max_neighbors is not None and self.max_neighbors < 1:
            raise DataError("max_neighbors must be >= 1")
        if not self.max_radius > 0:
            raise DataError("max_radius must be positive")


@dataclass(frozen=True)
class KrigingResult:
    estimate: float
    variance: float
    n_neighbors: int
    neighbors: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64), repr=False)
    weights: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)


def search_transform(model: VariogramModel) -> np.ndarray:
    """Linear map under which the main structure's anisotropy ellipsoid becomes a sphere.

    Distances in the mapped space are expressed in units of the longest range
    axis, so an isotropic model leaves them unchanged.
    """
    if not model.structures:
        return np.eye(3)
    s = model.structures[0]
    ranges = np.asarray(s.ranges)
    return np.diag(ranges.max() / ranges) @ rotation_matrix(s.angles)


def _merge_colocated(coords, values):
    uniq, inverse = np.unique(coords, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    if uniq.shape[0] == coords.shape[0]:
        return coords, values, np.arange(coords.shape[0])
    sums = np.bincount(inverse, weights=values, minlength=uniq.shape[0])
    counts = np.bincount(inverse, minlength=uniq.shape[0])
    # first original index of each merged group, for reporting
    first = np.full(uniq.shape[0], coords.shape[0], dtype=np.int64)
    np.minimum.at(first, inverse, np.arange(coords.shape[0]))
    order = np.argsort(first, kind="stable")
    return uniq[order], (sums / counts)[order], first[order]


class _Kriger:
    """Pre-processed sample set for repeated kriging with one spec."""

    def __init__(self, spec: KrigingSpec, coords, values):
        self.spec = spec
        coords = np.asarray(coords, dtype=float)
        values = np.asarray(values, dtype=float)
        self.coords, self.values, self.origin_index = _merge_colocated(coords, values)
        self.n = self.values.size
        self.transform = search_transform(spec.variogram)
        self.tree = cKDTree(apply_linear(self.coords, self.transform)) if self.n else None
        self.c0 = spec.variogram.total_sill

    def neighbours(self, targets: np.ndarray, exclude: np.ndarray | None):
        """Neighbour indices (padded with -1) and scaled distances, nearest first."""
        spec = self.spec
        cap = self.n if spec.max_neighbors is None else min(spec.max_neighbors, self.n)
        extra = 1 if exclude is not None else 0
        k = min(cap + extra, self.n)
        m = targets.shape[0]
        if k == 0:
            return np.full((m, 0), -1, dtype=np.int64), np.empty((m, 0))
        dist, idx = self.tree.query(
            apply_linear(targets, self.transform), k=k, distance_upper_bound=spec.max_radius
        )
        dist = np.asarray(dist).reshape(m, k)
        idx = np.asarray(idx).reshape(m, k).astype(np.int64)
        idx[~np.isfinite(dist)] = -1
        if exclude is not None:
            drop = idx == exclude[:, None]
            idx = np.where(drop, -1, idx)
            dist = np.where(drop, np.inf, dist)
            # compact valid entries to the front, stable in distance order
            order = np.argsort(idx < 0, axis=1, kind="stable")
            idx = np.take_along_axis(idx, order, axis=1)
            dist = np.take_along_axis(dist, order, axis=1)
        idx, dist = idx[:, :cap], dist[:, :cap]
        dist = np.where(idx < 0, np.inf, dist)
        return idx, dist

    def solve(self, targets, exclude=None, keep_weights: bool = False):
        targets = np.atleast_2d(np.asarray(targets, dtype=float))
        m = targets.shape[0]
        est = np.empty(m)
        var = np.empty(m)
        count = np.zeros(m, dtype=np.int64)
        weights_out = [None] * m if keep_weights else None
        for start in range(0, m, _BLOCK):
            stop = min(start + _BLOCK, m)
            ex = None if exclude is None else exclude[start:stop]
            self._solve_block(targets[start:stop], ex, start, est, var, count, weights_out)
        negative = var < 0
        if negative.any():
            warnings.warn(
                f"{int(negative.sum())} kriging variance(s) were numerically negative; clamped to 0",
                EmberWarning,
                stacklevel=3,
            )
            var[negative] = 0.0
        return est, var, count, weights_out

    def _solve_block(self, targets, exclude, offset, est, var, count, weights_out):
        spec = self.spec
        idx, dist = self.neighbours(targets, exclude)
        nn = (idx >= 0).sum(axis=1)
        exact = (nn > 0) & (dist[:, 0] == 0.0) if idx.shape[1] else np.zeros(len(targets), bool)
        for t in np.flatnonzero(exact):
            j = idx[t, 0]
            est[offset + t] = self.values[j]
            var[offset + t] = 0.0
            count[offset + t] = 1
            if weights_out is not None:
                weights_out[offset + t] = (self.origin_index[[j]], np.ones(1))
        empty = (nn == 0) & ~exact
        for t in np.flatnonzero(empty):
            if spec.kind == "ordinary":
                raise DataError(
                    f"ordinary kriging: no sample within search radius of target {tuple(targets[t])}"
                )
            est[offset + t] = spec.mean
            var[offset + t] = self.c0
            if weights_out is not None:
                weights_out[offset + t] = (np.empty(0, np.int64), np.empty(0))
        todo = ~exact & ~empty
        for k in np.unique(nn[todo]):
            rows = np.flatnonzero(todo & (nn == k))
            self._solve_group(targets[rows], idx[rows, :k], rows + offset, est, var, count, weights_out)

    def _solve_group(self, targets, nb, out_rows, est, var, count, weights_out):
        spec, model = self.spec, self.spec.variogram
        b, k = nb.shape
        pts = self.coords[nb]  # (b, k, 3)
        lhs_cov = model.covariance(pts[:, :, None, :] - pts[:, None, :, :])
        rhs_cov = model.covariance(pts - targets[:, None, :])
        if spec.kind == "ordinary":
            lhs = np.ones((b, k + 1, k + 1))
            lhs[:, :k, :k] = lhs_cov
            lhs[:, k, k] = 0.0
            rhs = np.ones((b, k + 1))
            rhs[:, :k] = rhs_cov
        else:
            lhs, rhs = lhs_cov, rhs_cov
        try:
            sol = np.linalg.solve(lhs, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            sol = None
        if sol is None or not np.all(np.isfinite(sol)):
            self._raise_singular(nb, lhs)
        w = sol[:, :k]
        z = self.values[nb]
        if spec.kind == "ordinary":
            est[out_rows] = np.sum(w * z, axis=1)
            var[out_rows] = self.c0 - np.sum(w * rhs_cov, axis=1) - sol[:, k]
        else:
            est[out_rows] = spec.mean + np.sum(w * (z - spec.mean), axis=1)
            var[out_rows] = self.c0 - np.sum(w * rhs_cov, axis=1)
        count[out_rows] = k
        if weights_out is not None:
            for r, row in enumerate(out_rows):
                weights_out[row] = (self.origin_index[nb[r]], w[r].copy())

    def _raise_singular(self, nb, lhs):
        for r in range(nb.shape[0]):
            try:
                s = np.linalg.solve(lhs[r], np.ones(lhs.shape[-1]))
                if np.all(np.isfinite(s)):
                    continue
            except np.linalg.LinAlgError:
                pass
            pts = self.coords[nb[r]]
            d = np.linalg.norm(pts[:, None] - pts[None], axis=-1) + np.eye(len(pts)) * np.inf
            a, b = np.unravel_index(np.argmin(d), d.shape)
            raise NumericalError(
                "singular kriging system; nearly co-located samples "
                f"{int(self.origin_index[nb[r][a]])} {tuple(pts[a])} and "
                f"{int(self.origin_index[nb[r][b]])} {tuple(pts[b])}"
            )
        raise NumericalError("singular kriging system")


def krige(spec: KrigingSpec, samples: SampleSet, target) -> KrigingResult:
    """Krige a single target location."""
    k = _Kriger(spec, samples.coords, samples.values)
    est, var, count, w = k.solve(as_coords(target)[:1], keep_weights=True)
    nb, wt = w[0]
    return KrigingResult(float(est[0]), float(var[0]), int(count[0]), nb, wt)


def krige_many(spec: KrigingSpec, samples: SampleSet, targets) -> tuple[np.ndarray, np.ndarray]:
    """Estimates and kriging variances at many targets."""
    est, var, _, _ = _Kriger(spec, samples.coords, samples.values).solve(as_coords(targets))
    return est, var


def loo_estimates(spec: KrigingSpec, coords, values) -> np.ndarray:
    """Leave-one-out estimates on raw arrays (co-located rows are merged first)."""
    k = _Kriger(spec, coords, values)
    # with merged duplicates, exclude the whole group of each row
    merged = k.coords
    lookup = {tuple(c): i for i, c in enumerate(merged.tolist())}
    group = np.array([lookup[tuple(c)] for c in np.asarray(coords, float).tolist()], dtype=np.int64)
    est_u = np.empty(k.n)
    try:
        est_u[:], _, _, _ = k.solve(merged, exclude=np.arange(k.n))
    except (DataError, NumericalError) as exc:
        raise type(exc)(f"leave-one-out: {exc}") from exc
    return est_u[group]


def loo_cross_validate(spec: KrigingSpec, samples: SampleSet) -> np.ndarray:
    """Element i is the kriging estimate at sample i using all other samples."""
    if len(samples) < 2:
        raise DataError("loo_cross_validate needs at least 2 samples")
    out = np.empty(len(samples))
    k = _Kriger(spec, samples.coords, samples.values)
    for start in range(0, len(samples), _BLOCK):
        stop = min(start + _BLOCK, len(samples))
        rows = np.arange(start, stop)
        try:
            out[rows], _, _, _ = k.solve(samples.coords[rows], exclude=rows)
        except (DataError, NumericalError) as exc:
            # locate the failing sample for the message
            for i in rows:
                try:
                    k.solve(samples.coords[[i]], exclude=np.array([i]))
                except (DataError, NumericalError) as inner:
                    raise type(exc)(f"sample {i}: {inner}") from exc
            raise
    return out
