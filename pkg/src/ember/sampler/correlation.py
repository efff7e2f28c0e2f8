"""Correlation of standardized envelope residuals, used to infer the sampling field's variogram."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..data_model import SampleSet
from ..errors import DataError, EmberWarning
from ..variography import ExperimentalVariogram, VariogramModel, fit_variogram, lag_pairs


@dataclass(frozen=True)
class CorrelationSeries:
    """Binned mean products of standardized residuals; ``rho`` is NaN where a bin is empty."""

    lag: np.ndarray
    count: np.ndarray
    rho: np.ndarray
    distance: np.ndarray
    direction: tuple[float, float, float] = (1.0, 0.0, 0.0)
    angle_tol: float = 90.0
    lag_width: float = 1.0

    def as_variogram(self) -> ExperimentalVariogram:
        """The same series read as a unit-sill semivariogram ``1 - rho``."""
        return ExperimentalVariogram(
            self.lag, self.count, 1.0 - self.rho, self.distance, self.direction, self.angle_tol, self.lag_width
        )


def standardized_residuals(values, mean, std) -> tuple[np.ndarray, np.ndarray]:
    """``r = (z - mean) / std`` and the mask of usable entries (finite, ``std > 0``)."""
    values, mean, std = (np.asarray(a, dtype=float) for a in (values, mean, std))
    usable = np.isfinite(mean) & np.isfinite(std) & (std > 0)
    r = np.full(values.shape, np.nan)
    r[usable] = (values[usable] - mean[usable]) / std[usable]
    return r, usable


def correlation_from_moments(
    coords,
    values,
    mean,
    std,
    *,
    lag_width: float,
    n_lags: int,
    direction=(1.0, 0.0, 0.0),
    angle_tol: float = 90.0,
) -> CorrelationSeries:
    """Lag-binned ``mean(r_i r_j)``, clamped to [-1, 1], from per-sample moments."""
    coords = np.asarray(coords, dtype=float)
    r, usable = standardized_residuals(values, mean, std)
    dropped = int((~usable).sum())
    if dropped:
        warnings.warn(f"{dropped} sample(s) with degenerate local distribution excluded", EmberWarning, stacklevel=2)
    if usable.sum() < 3:
        raise DataError(f"residual correlation needs at least 3 usable samples, got {int(usable.sum())}")
    keep = np.flatnonzero(usable)
    rr = r[keep]
    i, j, b, dist = lag_pairs(coords[keep], direction, angle_tol, lag_width, n_lags)
    count = np.bincount(b, minlength=n_lags)
    lag = lag_width * np.arange(1, n_lags + 1)
    rho = np.full(n_lags, np.nan)
    mean_dist = lag.copy()
    if np.all(rr == 0.0):
        warnings.warn("all residuals are zero; correlation is undefined at every lag", EmberWarning, stacklevel=2)
        return CorrelationSeries(lag, count, rho, mean_dist, tuple(direction), angle_tol, lag_width)
    prod = np.bincount(b, weights=rr[i] * rr[j], minlength=n_lags)
    dsum = np.bincount(b, weights=dist, minlength=n_lags)
    occ = count > 0
    rho[occ] = np.clip(prod[occ] / count[occ], -1.0, 1.0)
    mean_dist[occ] = dsum[occ] / count[occ]
    return CorrelationSeries(lag, count, rho, mean_dist, tuple(float(d) for d in direction), angle_tol, lag_width)


def envelope_moments(envelope, samples: SampleSet) -> tuple[np.ndarray, np.ndarray]:
    """Envelope mean and standard deviation at each sample's cell (NaN if the cell is missing)."""
    cells = envelope.geometry.locate(samples.coords)
    mean = np.full(len(samples), np.nan)
    std = np.full(len(samples), np.nan)
    for n, c in enumerate(cells.tolist()):
        cdf = envelope.cdf(c)
        if cdf is not None:
            mean[n], std[n] = cdf.mean(), cdf.std()
    return mean, std


def residual_correlation(
    envelope,
    samples: SampleSet,
    *,
    lag_width: float,
    n_lags: int,
    direction=(1.0, 0.0, 0.0),
    angle_tol: float = 90.0,
) -> CorrelationSeries:
    """Correlation series of ``(z_i - mean_i) / std_i`` with moments read from the envelope."""
    mean, std = envelope_moments(envelope, samples)
    return correlation_from_moments(
        samples.coords,
        samples.values,
        mean,
        std,
        lag_width=lag_width,
        n_lags=n_lags,
        direction=direction,
        angle_tol=angle_tol,
    )


def fit_sampling_variogram(series, shape: str, init: VariogramModel, *, anisotropic: bool = False) -> VariogramModel:
    """Unit-sill model fitted to one or more correlation series."""
    series = [series] if isinstance(series, CorrelationSeries) else list(series)
    exps = [s.as_variogram() for s in series]
    if not any(e.occupied.any() and np.isfinite(e.gamma[e.occupied]).any() for e in exps):
        raise DataError("no occupied lag bins to fit")
    cleaned = []
    for e in exps:
        ok = e.occupied & np.isfinite(e.gamma)
        cleaned.append(
            ExperimentalVariogram(e.lag, np.where(ok, e.count, 0), np.where(ok, e.gamma, np.nan), e.distance,
                                  e.direction, e.angle_tol, e.lag_width)
        )
    return fit_variogram(cleaned, shape, init.normalized(), anisotropic=anisotropic, total_sill=1.0)
