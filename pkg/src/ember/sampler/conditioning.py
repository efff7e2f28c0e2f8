"""Sampling settings, conditioning intervals and the truncated Gibbs sampler."""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .._kernels import gibbs_sweeps, norm_ppf
from ..data_model import SampleSet
from ..errors import DataError, EmberWarning, NumericalError
from ..variography import VariogramModel
from .field import DENSE_LIMIT, cell_covariance

U_CLAMP = 1e-7
GIBBS_JITTER = 1e-8


@dataclass(frozen=True)
class SamplingSpec:
    """Settings of the sampling random function and the simulation loop.

    ``variogram`` models the standard Gaussian field behind the uniform field
    and must have unit total sill. ``tolerance`` is how far a datum may sit
    outside its local support before it is reported.
    """

    variogram: VariogramModel
    n_realizations: int = 1
    seed: int = 0
    gibbs_iterations: int = 100
    tolerance: float = 1e-9
    dense_limit: int = DENSE_LIMIT
    max_neighbors: int = 32

    def __post_init__(self):
        if abs(self.variogram.total_sill - 1.0) > 1e-9:
            raise DataError(
                f"sampling variogram must have unit total sill, got {self.variogram.total_sill}; "
                "use VariogramModel.normalized()"
            )
        if self.n_realizations < 1:
            raise DataError("n_realizations must be >= 1")
        if self.gibbs_iterations < 0:
            raise DataError("gibbs_iterations must be >= 0")
        if self.tolerance < 0:
            raise DataError("tolerance must be >= 0")
        if self.max_neighbors < 1:
            raise DataError("max_neighbors must be >= 1")

    def digest(self) -> str:
        text = "\n".join(
            [
                self.variogram.to_text(),
                f"n_realizations={self.n_realizations}",
                f"seed={self.seed}",
                f"gibbs_iterations={self.gibbs_iterations}",
                f"tolerance={self.tolerance!r}",
                f"dense_limit={self.dense_limit}",
                f"max_neighbors={self.max_neighbors}",
            ]
        )
        return hashlib.sha256(text.encode()).hexdigest()


@dataclass(frozen=True)
class ConditioningInterval:
    """Admissible uniform values ``(u_low, u_high]`` for one datum and their Gaussian images."""

    u_low: float
    u_high: float
    g_low: float
    g_high: float
    atom: float = math.nan

    def __post_init__(self):
        if not 0.0 <= self.u_low < self.u_high <= 1.0:
            raise DataError(f"invalid conditioning interval ({self.u_low}, {self.u_high}]")
        if self.g_low > self.g_high:
            raise DataError(f"invalid Gaussian bounds [{self.g_low}, {self.g_high}]")

    @classmethod
    def from_uniform(cls, u_low: float, u_high: float, atom: float = math.nan) -> "ConditioningInterval":
        """Gaussian bounds are taken at the clamped uniform bounds, so they are always finite."""
        g_lo = norm_ppf(min(max(u_low, U_CLAMP), 1.0 - U_CLAMP))
        g_hi = norm_ppf(min(max(u_high, U_CLAMP), 1.0 - U_CLAMP))
        return cls(float(u_low), float(u_high), g_lo, g_hi, float(atom))


def interval_for_value(support: np.ndarray, cum: np.ndarray, z: float) -> tuple[float, float, int]:
    """``(u_low, u_high, k)`` for the atom ``k`` nearest ``z`` (ties go to the lower atom)."""
    k = int(np.argmin(np.abs(support - z)))
    u_low = float(cum[k - 1]) if k > 0 else 0.0
    u_high = min(float(cum[k]), 1.0)
    if k == support.size - 1:
        u_high = 1.0
    return u_low, u_high, k


def conditioning_intervals(envelope, samples: SampleSet, tolerance: float = 1e-9) -> list[ConditioningInterval]:
    """One interval per sample from the envelope CDF of the sample's cell."""
    cells = envelope.geometry.locate(samples.coords)
    out = []
    for i, (c, z) in enumerate(zip(cells.tolist(), samples.values.tolist())):
        cdf = envelope.cdf(c)
        if cdf is None:
            raise DataError(f"sample {i} lies in cell {c}, which has no envelope CDF")
        s = cdf.support
        if z < s[0] - tolerance or z > s[-1] + tolerance:
            warnings.warn(
                f"sample {i}: value {z!r} outside local support [{s[0]!r}, {s[-1]!r}]; "
                "conditioning on the nearest atom",
                EmberWarning,
                stacklevel=2,
            )
        u_low, u_high, k = interval_for_value(s, cdf.cumulative, z)
        out.append(ConditioningInterval.from_uniform(u_low, u_high, s[k]))
    return out


def precision_matrix(model: VariogramModel, locations: np.ndarray) -> np.ndarray:
    cov = cell_covariance(model, locations, locations)
    for eps in (0.0, GIBBS_JITTER):
        try:
            fac = linalg.cho_factor(cov + eps * np.eye(cov.shape[0]), lower=True, check_finite=False)
            return linalg.cho_solve(fac, np.eye(cov.shape[0]), check_finite=False)
        except linalg.LinAlgError:
            continue
    raise NumericalError(
        "correlation matrix among data locations is not positive definite after jitter 1e-8"
    )


def draw_gibbs_uniforms(rng: np.random.Generator, n: int, iterations: int):
    """Uniforms consumed by one Gibbs run: start values, then one row per sweep."""
    return rng.random(n), rng.random((iterations, n))


def gibbs_truncated_gaussian(
    intervals,
    locations,
    spec: SamplingSpec,
    seed,
    *,
    precision: np.ndarray | None = None,
) -> np.ndarray:
    """Correlated standard Gaussian values at the data, each inside its interval.

    Starts from independent truncated draws and performs
    ``spec.gibbs_iterations`` full sweeps in data order.
    """
    intervals = list(intervals)
    n = len(intervals)
    if n == 0:
        return np.empty(0)
    loc = np.atleast_2d(np.asarray(locations, dtype=float))
    if loc.shape != (n, 3):
        raise DataError(f"need one 3D location per interval, got shape {loc.shape}")
    lo = np.array([iv.g_low for iv in intervals], dtype=float)
    hi = np.array([iv.g_high for iv in intervals], dtype=float)
    if np.any(lo > hi):
        raise DataError("empty conditioning interval")
    Q = precision_matrix(spec.variogram, loc) if precision is None else precision
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    u_start, u_sweeps = draw_gibbs_uniforms(rng, n, spec.gibbs_iterations)
    return gibbs_sweeps(np.ascontiguousarray(Q), lo, hi, u_start, u_sweeps)
