"""Standard Gaussian random fields on a grid, conditioned by residual substitution."""

from __future__ import annotations

import threading
from collections import OrderedDict

import numpy as np
from scipy import linalg
from scipy.spatial import cKDTree

from .._kernels import sgs_path
from ..data_model import GridGeometry, GridVolume
from ..errors import DataError, NumericalError
from ..variography import VariogramModel

DENSE_LIMIT = 8000
SGS_LIMIT = 2_000_000
_JITTER = (0.0, 1e-10, 1e-8, 1e-6)
_ROWS = 256

_cache: OrderedDict = OrderedDict()
_cache_lock = threading.Lock()
_CACHE_SIZE = 4


def _cached(key, build):
    with _cache_lock:
        if key in _cache:
            _cache.move_to_end(key)
            return _cache[key]
    value = build()
    with _cache_lock:
        _cache[key] = value
        while len(_cache) > _CACHE_SIZE:
            _cache.popitem(last=False)
    return value


def clear_cache() -> None:
    with _cache_lock:
        _cache.clear()


def _model_key(model: VariogramModel) -> str:
    return model.to_text()


def cell_covariance(model: VariogramModel, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Covariance between two point sets, assembled in row blocks to bound memory."""
    out = np.empty((a.shape[0], b.shape[0]))
    for s in range(0, a.shape[0], _ROWS):
        out[s : s + _ROWS] = model.covariance(a[s : s + _ROWS, None, :] - b[None, :, :])
    return out


def _dense_factor(model: VariogramModel, geometry: GridGeometry) -> np.ndarray:
    pts = geometry.cell_centers()
    cov = cell_covariance(model, pts, pts)
    for eps in _JITTER:
        try:
            return linalg.cholesky(cov + eps * np.eye(cov.shape[0]), lower=True, check_finite=False)
        except linalg.LinAlgError:
            continue
    raise NumericalError("grid covariance is not positive definite even after jitter 1e-6")


def _sgs_plan(model: VariogramModel, geometry: GridGeometry, max_neighbors: int, path_seed: int):
    n = geometry.n_cells
    pts = geometry.cell_centers()
    order = np.random.default_rng(np.random.SeedSequence(entropy=int(path_seed), spawn_key=(2**31,))).permutation(n)
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    tree = cKDTree(pts)
    k_query = min(n, 8 * max_neighbors)
    nb = np.full((n, max_neighbors), -1, dtype=np.int64)
    w = np.zeros((n, max_neighbors))
    sd = np.ones(n)
    c0 = model.total_sill
    for s in range(0, n, 4096):
        cells = order[s : s + 4096]
        _, idx = tree.query(pts[cells], k=k_query)
        idx = np.asarray(idx).reshape(cells.size, k_query)
        earlier = rank[idx] < rank[cells][:, None]
        # keep the nearest earlier-visited cells, in distance order
        pos = np.argsort(~earlier, axis=1, kind="stable")[:, :max_neighbors]
        cand = np.take_along_axis(idx, pos, axis=1)
        ok = np.take_along_axis(earlier, pos, axis=1)
        cand = np.where(ok, cand, -1)
        counts = ok.sum(axis=1)
        nb[s : s + cells.size] = cand
        for k in np.unique(counts):
            if k == 0:
                continue
            rows = np.flatnonzero(counts == k)
            p = pts[cand[rows, :k]]
            lhs = model.covariance(p[:, :, None, :] - p[:, None, :, :])
            rhs = model.covariance(p - pts[cells[rows]][:, None, :])
            lhs = lhs + 1e-10 * np.eye(k)
            sol = np.linalg.solve(lhs, rhs[..., None])[..., 0]
            w[s + rows, :k] = sol
            sd[s + rows] = np.sqrt(np.maximum(c0 - np.sum(sol * rhs, axis=1), 0.0))
    return order, nb, w, sd


def _weights_to_data(model, geometry, data_cells):
    """``Lambda = C[:, D] C[D, D]^-1`` for residual substitution."""
    pts = geometry.cell_centers()
    pd = pts[data_cells]
    cdd = cell_covariance(model, pd, pd)
    cxd = cell_covariance(model, pts, pd)
    for eps in _JITTER:
        try:
            fac = linalg.cho_factor(cdd + eps * np.eye(cdd.shape[0]), lower=True, check_finite=False)
            return linalg.cho_solve(fac, cxd.T, check_finite=False).T
        except linalg.LinAlgError:
            continue
    raise NumericalError("data covariance is not positive definite; are data cells duplicated?")


def generator_kind(geometry: GridGeometry, dense_limit: int = DENSE_LIMIT) -> str:
    n = geometry.n_cells
    if n <= dense_limit:
        return "dense"
    if n <= SGS_LIMIT:
        return "sgs"
    raise NumericalError(
        f"grid of {n} cells exceeds the simulation capacity ({SGS_LIMIT} cells); split the grid into sub-volumes"
    )


def unconditional_field(
    model: VariogramModel,
    geometry: GridGeometry,
    normals: np.ndarray,
    *,
    dense_limit: int = DENSE_LIMIT,
    max_neighbors: int = 32,
    path_seed: int = 0,
) -> np.ndarray:
    """Zero-mean field with covariance ``model`` driven by the standard normals ``normals``."""
    kind = generator_kind(geometry, dense_limit)
    key = (kind, geometry, _model_key(model))
    if kind == "dense":
        L = _cached(key, lambda: _dense_factor(model, geometry))
        return L @ normals
    key = key + (max_neighbors, path_seed)
    order, nb, w, sd = _cached(key, lambda: _sgs_plan(model, geometry, max_neighbors, path_seed))
    return sgs_path(order, nb, w, sd, normals)


def condition_field(model, geometry, x_uncond, data_cells, data_values) -> np.ndarray:
    """Residual substitution ``X + Lambda (x_d - X_D)``, exact at the data cells."""
    data_cells = np.asarray(data_cells, dtype=np.int64)
    if data_cells.size == 0:
        return x_uncond
    if np.unique(data_cells).size != data_cells.size:
        raise DataError("data cells must be distinct")
    key = ("lambda", geometry, _model_key(model), data_cells.tobytes())
    lam = _cached(key, lambda: _weights_to_data(model, geometry, data_cells))
    out = x_uncond + lam @ (np.asarray(data_values, float) - x_uncond[data_cells])
    out[data_cells] = data_values
    return out


def conditional_gaussian_field(
    spec,
    geometry: GridGeometry,
    data_cells,
    data_values,
    seed,
    *,
    name: str = "X",
) -> GridVolume:
    """One realization of the standard Gaussian field of ``spec.variogram`` honouring ``data_values`` at ``data_cells``.

    ``seed`` is an int or a ``numpy.random.Generator``; the field consumes
    exactly ``geometry.n_cells`` standard normals from it.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    normals = rng.standard_normal(geometry.n_cells)
    x = unconditional_field(
        spec.variogram,
        geometry,
        normals,
        dense_limit=spec.dense_limit,
        max_neighbors=spec.max_neighbors,
        path_seed=spec.seed,
    )
    x = condition_field(spec.variogram, geometry, x, data_cells, data_values)
    return GridVolume(geometry, x, name)
