"""Envelope sampling, conditional simulation loop and the Gaussian baseline."""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .._kernels import gibbs_sweeps, norm_cdf_array
from ..data_model import MISSING, GridGeometry, GridVolume, SampleSet, check_same_geometry, write_grid
from ..errors import DataError, EmberWarning
from ..kriging import KrigingSpec, krige_many
from ..variography import VariogramModel
from .conditioning import (
    U_CLAMP,
    ConditioningInterval,
    SamplingSpec,
    draw_gibbs_uniforms,
    interval_for_value,
    precision_matrix,
)
from .field import condition_field, unconditional_field


def realization_rng(seed: int, index: int) -> np.random.Generator:
    """Stream for realization ``index``; independent of how many run in parallel."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),)))


def sample_envelope(envelope, X: GridVolume) -> GridVolume:
    """``Z = F^-1(G(X))`` per cell with the lower-convention quantile."""
    if X.geometry != envelope.geometry:
        raise DataError("Gaussian field and envelope have different geometries")
    u = np.clip(norm_cdf_array(np.ascontiguousarray(X.values)), U_CLAMP, 1.0 - U_CLAMP)
    z = envelope.quantile(u)
    ok = envelope.valid & ~X.missing
    return GridVolume(envelope.geometry, np.where(ok, z, MISSING), "Z")


@dataclass(frozen=True)
class DataCells:
    """Samples grouped by grid cell; values in one cell are averaged."""

    cells: np.ndarray
    values: np.ndarray
    locations: np.ndarray

    @classmethod
    def from_samples(cls, geometry: GridGeometry, samples: SampleSet) -> "DataCells":
        cells = geometry.locate(samples.coords)
        uniq, first, inv = np.unique(cells, return_index=True, return_inverse=True)
        inv = inv.ravel()
        if uniq.size < cells.size:
            warnings.warn(
                f"{cells.size - uniq.size} sample(s) share a grid cell with another; their values are averaged",
                EmberWarning,
                stacklevel=3,
            )
        # keep first-appearance order so results follow the sample file order
        order = np.argsort(first, kind="stable")
        sums = np.bincount(inv, weights=samples.values, minlength=uniq.size)
        counts = np.bincount(inv, minlength=uniq.size)
        cells_o = uniq[order]
        return cls(cells_o, (sums / counts)[order], geometry.cell_centers(cells_o))


@dataclass(frozen=True)
class RealizationDiagnostics:
    index: int
    gaussian_at_data: np.ndarray
    presnap_at_data: np.ndarray


def _cell_intervals(envelope, data: DataCells, tolerance: float) -> list[ConditioningInterval]:
    out = []
    for n, (c, z) in enumerate(zip(data.cells.tolist(), data.values.tolist())):
        cdf = envelope.cdf(c)
        if cdf is None:
            raise DataError(f"data cell {c} has no envelope CDF (missing secondary value)")
        s = cdf.support
        if z < s[0] - tolerance or z > s[-1] + tolerance:
            warnings.warn(
                f"datum {n} at cell {c}: value {z!r} outside local support [{s[0]!r}, {s[-1]!r}]",
                EmberWarning,
                stacklevel=3,
            )
        u_low, u_high, k = interval_for_value(s, cdf.cumulative, z)
        out.append(ConditioningInterval.from_uniform(u_low, u_high, s[k]))
    return out


def _one_realization(index, envelope, data, lo, hi, Q, spec):
    rng = realization_rng(spec.seed, index)
    u_start, u_sweeps = draw_gibbs_uniforms(rng, data.cells.size, spec.gibbs_iterations)
    normals = rng.standard_normal(envelope.n_cells)
    xd = gibbs_sweeps(Q, lo, hi, u_start, u_sweeps) if data.cells.size else np.empty(0)
    x = unconditional_field(
        spec.variogram,
        envelope.geometry,
        normals,
        dense_limit=spec.dense_limit,
        max_neighbors=spec.max_neighbors,
        path_seed=spec.seed,
    )
    x = condition_field(spec.variogram, envelope.geometry, x, data.cells, xd)
    z = sample_envelope(envelope, GridVolume(envelope.geometry, x, "X")).values.copy()
    presnap = z[data.cells].copy()
    z[data.cells] = data.values
    return GridVolume(envelope.geometry, z, f"real_{index + 1:04d}"), RealizationDiagnostics(index, xd, presnap)


def simulate(model, envelope, samples: SampleSet, spec: SamplingSpec, *, threads: int = 1, return_diagnostics: bool = False):
    """``spec.n_realizations`` conditional realizations drawn from the envelope.

    Each realization: truncated Gibbs at the data cells, a conditioned Gaussian
    field, quantile lookup in every cell CDF, then data cells set to the
    observed values. Realization ``i`` depends only on ``(spec.seed, i)``.
    """
    mid = envelope.provenance.get("model_id")
    if model is not None and mid is not None:
        from ..envelope import model_id

        if model_id(model) != mid:
            raise DataError("envelope was built from a different model")
    data = DataCells.from_samples(envelope.geometry, samples)
    intervals = _cell_intervals(envelope, data, spec.tolerance)
    lo = np.array([iv.g_low for iv in intervals], dtype=float)
    hi = np.array([iv.g_high for iv in intervals], dtype=float)
    Q = np.ascontiguousarray(precision_matrix(spec.variogram, data.locations)) if data.cells.size else np.zeros((0, 0))

    def job(i):
        return _one_realization(i, envelope, data, lo, hi, Q, spec)

    # warm the shared factorizations once so workers only read them
    results = [job(0)]
    rest = range(1, spec.n_realizations)
    if threads > 1 and len(rest) > 0:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results += list(ex.map(job, rest))
    else:
        results += [job(i) for i in rest]
    reals = [r for r, _ in results]
    if return_diagnostics:
        return reals, [d for _, d in results]
    return reals


def posterior_mean(realizations) -> GridVolume:
    """Cellwise mean over realizations, ignoring missing values."""
    realizations = list(realizations)
    if not realizations:
        raise DataError("posterior_mean needs at least one realization")
    geom = check_same_geometry(realizations)
    total = np.zeros(geom.n_cells)
    count = np.zeros(geom.n_cells)
    for r in realizations:
        ok = ~r.missing
        total[ok] += r.values[ok]
        count[ok] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), MISSING)
    return GridVolume(geom, mean, "posterior_mean")


def gaussian_baseline_simulate(
    samples: SampleSet,
    trend_spec: KrigingSpec,
    residual_variogram: VariogramModel | None,
    geometry: GridGeometry,
    n_realizations: int,
    seed: int,
    *,
    threads: int = 1,
    dense_limit: int | None = None,
    max_neighbors: int = 32,
    trend: np.ndarray | None = None,
) -> list[GridVolume]:
    """Kriging trend plus a Gaussian residual field conditioned on the data residuals.

    ``residual_variogram=None`` means a zero-sill residual: every realization
    is the kriging map (with data cells set to the data).
    """
    if n_realizations < 1:
        raise DataError("n_realizations must be >= 1")
    data = DataCells.from_samples(geometry, samples)
    if trend is None:
        trend, _ = krige_many(trend_spec, samples, geometry.cell_centers())
    trend = np.asarray(trend, dtype=float)
    if residual_variogram is None:
        z = trend.copy()
        z[data.cells] = data.values
        return [GridVolume(geometry, z, f"real_{i + 1:04d}") for i in range(n_realizations)]
    sill = residual_variogram.total_sill
    unit = residual_variogram.normalized()
    kw = {} if dense_limit is None else {"dense_limit": dense_limit}
    spec = SamplingSpec(unit, n_realizations, seed, 0, max_neighbors=max_neighbors, **kw)
    resid = (data.values - trend[data.cells]) / np.sqrt(sill)

    def job(i):
        rng = realization_rng(seed, i)
        normals = rng.standard_normal(geometry.n_cells)
        x = unconditional_field(
            unit, geometry, normals, dense_limit=spec.dense_limit, max_neighbors=max_neighbors, path_seed=seed
        )
        x = condition_field(unit, geometry, x, data.cells, resid)
        z = trend + np.sqrt(sill) * x
        z[data.cells] = data.values
        return GridVolume(geometry, z, f"real_{i + 1:04d}")

    out = [job(0)]
    if threads > 1 and n_realizations > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            out += list(ex.map(job, range(1, n_realizations)))
    else:
        out += [job(i) for i in range(1, n_realizations)]
    return out


def write_realizations(realizations, out_dir, spec: SamplingSpec | None = None) -> list[str]:
    """Write ``real_0001.grd``... and return manifest lines (file, seed, spawn index, spec hash)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    digest = spec.digest() if spec is not None else "-"
    seed = spec.seed if spec is not None else "-"
    for i, r in enumerate(realizations):
        name = f"real_{i + 1:04d}.grd"
        write_grid(r, out_dir / name, title=f"realization {i + 1}")
        lines.append(f"{name} seed={seed} stream={i} spec_sha256={digest}")
    return lines
