"""Experimental variograms, parametric models and weighted least-squares fitting.

Range convention: spherical ranges are exact; exponential and gaussian use
the practical range (95% of the sill), i.e. ``1 - exp(-3 r)`` and
``1 - exp(-3 r^2)`` with ``r`` the range-scaled lag.

Anisotropy uses ZXZ Euler angles in degrees. The model frame is obtained by
rotating the world axes by ``angles[0]`` about z, then ``angles[1]`` about the
new x axis, then ``angles[2]`` about the new z axis. A lag is expressed in that
frame first and only then divided by ``ranges`` axis by axis.

Model text format::

    nugget = 0.1
    [structure]
    shape = spherical
    sill = 0.9
    ranges = 400 400 6
    angles = 0 0 0
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConvergenceWarning, DataError, EmberWarning

SHAPES = ("spherical", "exponential", "gaussian")


def _rot_z(deg):
    t = math.radians(deg)
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_x(deg):
    t = math.radians(deg)
    c, s = math.cos(t), math.sin(t)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_matrix(angles) -> np.ndarray:
    """Matrix taking world-frame lags to model-frame lags (ZXZ convention)."""
    a, b, g = angles
    active = _rot_z(a) @ _rot_x(b) @ _rot_z(g)
    return active.T


def apply_linear(h: np.ndarray, m: np.ndarray) -> np.ndarray:
    """``h @ m.T`` written elementwise, so rounding never depends on batch shape."""
    return np.stack(
        [h[..., 0] * m[r, 0] + h[..., 1] * m[r, 1] + h[..., 2] * m[r, 2] for r in range(3)],
        axis=-1,
    )


def _unit_shape(shape: str, r: np.ndarray) -> np.ndarray:
    if shape == "spherical":
        rc = np.minimum(r, 1.0)
        return 1.5 * rc - 0.5 * rc**3
    if shape == "exponential":
        return 1.0 - np.exp(-3.0 * r)
    if shape == "gaussian":
        return 1.0 - np.exp(-3.0 * r * r)
    raise ValueError(f"unknown variogram shape {shape!r}")


@dataclass(frozen=True)
class Structure:
    shape: str
    sill: float
    ranges: tuple[float, float, float]
    angles: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise DataError(f"unknown variogram shape {self.shape!r}; expected one of {SHAPES}")
        ranges = tuple(float(r) for r in np.broadcast_to(np.asarray(self.ranges, float), 3))
        angles = tuple(float(a) for a in np.broadcast_to(np.asarray(self.angles, float), 3))
        if not self.sill > 0 or not math.isfinite(self.sill):
            raise DataError(f"structure sill must be positive, got {self.sill}")
        if min(ranges) <= 0 or not all(map(math.isfinite, ranges)):
            raise DataError(f"structure ranges must be positive, got {ranges}")
        object.__setattr__(self, "sill", float(self.sill))
        object.__setattr__(self, "ranges", ranges)
        object.__setattr__(self, "angles", angles)

    def scaled_lag(self, h: np.ndarray) -> np.ndarray:
        hp = h if self.angles == (0.0, 0.0, 0.0) else apply_linear(h, rotation_matrix(self.angles))
        ax, ay, az = self.ranges
        return np.sqrt((hp[..., 0] / ax) ** 2 + (hp[..., 1] / ay) ** 2 + (hp[..., 2] / az) ** 2)

    def gamma(self, h: np.ndarray) -> np.ndarray:
        return self.sill * _unit_shape(self.shape, self.scaled_lag(h))


@dataclass(frozen=True)
class VariogramModel:
    nugget: float = 0.0
    structures: tuple[Structure, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "structures", tuple(self.structures))
        if self.nugget < 0 or not math.isfinite(self.nugget):
            raise DataError(f"nugget must be >= 0, got {self.nugget}")
        if not self.total_sill > 0:
            raise DataError("variogram total sill must be positive")
        object.__setattr__(self, "nugget", float(self.nugget))

    @classmethod
    def isotropic(cls, shape: str, sill: float, range_: float, nugget: float = 0.0) -> "VariogramModel":
        return cls(nugget, (Structure(shape, sill, (range_,) * 3),))

    @property
    def total_sill(self) -> float:
        return self.nugget + sum(s.sill for s in self.structures)

    def gamma(self, h) -> np.ndarray:
        """Semivariance for displacement vector(s) ``h`` of shape ``(..., 3)``."""
        h = np.asarray(h, dtype=float)
        g = np.zeros(h.shape[:-1])
        for s in self.structures:
            g = g + s.gamma(h)
        nonzero = np.any(h != 0.0, axis=-1)
        return np.where(nonzero, g + self.nugget, 0.0)

    def covariance(self, h) -> np.ndarray:
        """``C(h) = sill - gamma(h)``; ``C(0)`` is the total sill, nugget included."""
        return self.total_sill - self.gamma(h)

    def correlation(self, h) -> np.ndarray:
        return self.covariance(h) / self.total_sill

    def cov_matrix(self, a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
        a = np.atleast_2d(a)
        b = a if b is None else np.atleast_2d(b)
        return self.covariance(a[:, None, :] - b[None, :, :])

    def normalized(self) -> "VariogramModel":
        """Same shape with unit total sill."""
        s = self.total_sill
        return VariogramModel(self.nugget / s, tuple(replace(t, sill=t.sill / s) for t in self.structures))

    def scale_ranges(self, factor: float) -> "VariogramModel":
        return VariogramModel(
            self.nugget,
            tuple(replace(t, ranges=tuple(r * factor for r in t.ranges)) for t in self.structures),
        )

    def with_shape(self, shape: str) -> "VariogramModel":
        return VariogramModel(self.nugget, tuple(replace(t, shape=shape) for t in self.structures))

    @property
    def max_range(self) -> float:
        return max((max(s.ranges) for s in self.structures), default=0.0)

    # -- text serialization -------------------------------------------------
    def to_text(self) -> str:
        lines = [f"nugget = {self.nugget!r}"]
        for s in self.structures:
            lines += [
                "[structure]",
                f"shape = {s.shape}",
                f"sill = {s.sill!r}",
                "ranges = " + " ".join(repr(r) for r in s.ranges),
                "angles = " + " ".join(repr(a) for a in s.angles),
            ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "VariogramModel":
        nugget = 0.0
        blocks: list[dict[str, str]] = []
        current: dict[str, str] | None = None
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line == "[structure]":
                current = {}
                blocks.append(current)
                continue
            if "=" not in line:
                raise DataError(f"variogram line {lineno}: expected 'key = value'")
            key, val = (t.strip() for t in line.split("=", 1))
            if current is None:
                if key != "nugget":
                    raise DataError(f"variogram line {lineno}: unexpected key {key!r} before [structure]")
                nugget = float(val)
            else:
                current[key] = val
        structures = []
        for b in blocks:
            missing = {"shape", "sill", "ranges"} - b.keys()
            if missing:
                raise DataError(f"variogram structure missing keys: {sorted(missing)}")
            structures.append(
                Structure(
                    b["shape"],
                    float(b["sill"]),
                    _triple(b["ranges"]),
                    _triple(b.get("angles", "0 0 0")),
                )
            )
        return cls(nugget, tuple(structures))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "VariogramModel":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"variogram file not found: {path}")
        return cls.from_text(path.read_text(encoding="utf-8"))


def _triple(text: str) -> tuple[float, float, float]:
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) == 1:
        vals *= 3
    if len(vals) != 3:
        raise DataError(f"expected 1 or 3 numbers, got {text!r}")
    return tuple(vals)


def model_gamma(model: VariogramModel, h) -> float | np.ndarray:
    """Semivariance of ``model`` at displacement ``h`` (a 3-vector or ``(n, 3)``)."""
    h = np.asarray(h, dtype=float)
    out = model.gamma(h)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ExperimentalVariogram:
    lag: np.ndarray
    count: np.ndarray
    gamma: np.ndarray
    distance: np.ndarray | None = None
    direction: tuple[float, float, float] = (1.0, 0.0, 0.0)
    angle_tol: float = 90.0
    lag_width: float = 1.0

    def __post_init__(self):
        lag = np.asarray(self.lag, float)
        count = np.asarray(self.count, dtype=np.int64)
        gamma = np.asarray(self.gamma, float)
        dist = lag if self.distance is None else np.asarray(self.distance, float)
        if not (lag.shape == count.shape == gamma.shape == dist.shape):
            raise DataError("lag, count and gamma must have equal lengths")
        if np.any(np.diff(lag) <= 0):
            raise DataError("lag centers must be strictly increasing")
        object.__setattr__(self, "lag", lag)
        object.__setattr__(self, "count", count)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "distance", dist)
        object.__setattr__(self, "direction", tuple(float(d) for d in self.direction))

    @property
    def occupied(self) -> np.ndarray:
        return self.count > 0

    def to_csv(self, path) -> None:
        rows = ["lag,count,gamma"]
        for h, n, g in zip(self.lag.tolist(), self.count.tolist(), self.gamma.tolist()):
            rows.append(f"{h!r},{n},{g!r}")
        Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def _unit(direction) -> np.ndarray:
    u = np.asarray(direction, dtype=float).ravel()
    n = np.linalg.norm(u)
    if u.size != 3 or n == 0:
        raise DataError(f"direction must be a non-zero 3-vector, got {direction}")
    return u / n


def lag_pairs(coords, direction, angle_tol: float, lag_width: float, n_lags: int):
    """Enumerate point pairs falling in lag bins ``k * lag_width`` (k = 1..n_lags).

    Bin k collects separations in ``[(k - 0.5) w, (k + 0.5) w)`` whose
    direction lies inside the cone of half-angle ``angle_tol`` about
    ``±direction``. Returns ``(i, j, bin, distance)`` arrays with zero-based bins.
    """
    if lag_width <= 0:
        raise DataError("lag_width must be positive")
    if n_lags < 1:
        raise DataError("n_lags must be >= 1")
    coords = np.asarray(coords, dtype=float)
    u = _unit(direction)
    tree = cKDTree(coords)
    pairs = tree.query_pairs(r=(n_lags + 0.5) * lag_width, output_type="ndarray")
    if pairs.size == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, empty, np.empty(0)
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    i, j = pairs[:, 0], pairs[:, 1]
    d = coords[j] - coords[i]
    dist = np.sqrt(np.sum(d * d, axis=1))
    keep = dist > 0
    if angle_tol < 90.0:
        cosang = np.abs(d @ u) / np.where(dist > 0, dist, 1.0)
        keep &= cosang >= math.cos(math.radians(angle_tol)) - 1e-12
    b = np.floor(dist / lag_width + 0.5).astype(np.int64)
    keep &= (b >= 1) & (b <= n_lags)
    return i[keep], j[keep], b[keep] - 1, dist[keep]


def empirical_variogram(
    samples,
    direction=(1.0, 0.0, 0.0),
    angle_tol: float = 90.0,
    lag_width: float = 1.0,
    n_lags: int = 10,
) -> ExperimentalVariogram:
    """Matheron estimator ``gamma(h) = sum (z_i - z_j)^2 / (2 N(h))`` per lag bin."""
    coords, values = np.asarray(samples.coords), np.asarray(samples.values)
    if values.size < 2:
        raise DataError("empirical_variogram needs at least 2 samples")
    i, j, b, dist = lag_pairs(coords, direction, angle_tol, lag_width, n_lags)
    count = np.bincount(b, minlength=n_lags)
    sq = np.bincount(b, weights=(values[i] - values[j]) ** 2, minlength=n_lags)
    dsum = np.bincount(b, weights=dist, minlength=n_lags)
    lag = lag_width * np.arange(1, n_lags + 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma = np.where(count > 0, sq / (2.0 * count), np.nan)
        mean_dist = np.where(count > 0, dsum / count, lag)
    if count.sum() == 0:
        warnings.warn("no sample pairs fall inside the direction cone / lag range", EmberWarning, stacklevel=2)
    return ExperimentalVariogram(lag, count, gamma, mean_dist, tuple(_unit(direction)), angle_tol, lag_width)


def variogram_objective(model: VariogramModel, exps: Sequence[ExperimentalVariogram]) -> float:
    """Pair-count weighted squared misfit over occupied bins."""
    total = 0.0
    for e in exps:
        occ = e.occupied
        if not occ.any():
            continue
        h = np.outer(e.distance[occ], np.asarray(e.direction))
        r = e.gamma[occ] - model.gamma(h)
        total += float(np.sum(e.count[occ] * r * r))
    return total


def _unpack(theta, template: VariogramModel, anisotropic: bool, total_sill):
    ns = len(template.structures)
    nugget = theta[0]
    sills = list(theta[1 : 1 + ns])
    if total_sill is not None:
        scale = total_sill / (nugget + sum(sills))
        nugget, sills = nugget * scale, [s * scale for s in sills]
    pos = 1 + ns
    structures = []
    for s, c in zip(template.structures, sills):
        if anisotropic:
            mult = theta[pos : pos + 3]
            pos += 3
        else:
            mult = (theta[pos],) * 3
            pos += 1
        structures.append(replace(s, sill=c, ranges=tuple(r * m for r, m in zip(s.ranges, mult))))
    return VariogramModel(nugget, tuple(structures))


def fit_variogram(
    exps: ExperimentalVariogram | Sequence[ExperimentalVariogram],
    shape: str | None,
    init: VariogramModel,
    *,
    anisotropic: bool = False,
    total_sill: float | None = None,
    max_iter: int = 500,
    rtol: float = 1e-6,
) -> VariogramModel:
    """Weighted least-squares fit by derivative-free coordinate descent.

    Each parameter (nugget, structure sills, range multipliers) is probed
    multiplicatively by a per-parameter factor that grows after a successful
    move and shrinks (square root) after a failed one. Angles stay fixed.
    ``total_sill`` pins the sum of nugget and sills (e.g. 1 for correlation
    models). The result never has a larger objective than ``init``. The
    search stops once every factor is within ``rtol`` of 1 or the objective
    has dropped below ``rtol**2`` times its starting value.
    """
    if isinstance(exps, ExperimentalVariogram):
        exps = [exps]
    n_occ = sum(int(e.occupied.sum()) for e in exps)
    if n_occ < 3:
        raise DataError(f"fit_variogram needs >= 3 occupied lag bins, got {n_occ}")
    if not init.structures:
        raise DataError("initial model needs at least one structure")
    template = init.with_shape(shape) if shape else init
    if total_sill is not None:
        template = _unpack(
            [template.nugget] + [s.sill for s in template.structures] + [1.0] * (len(template.structures) * (3 if anisotropic else 1)),
            template,
            anisotropic,
            total_sill,
        )

    ns = len(template.structures)
    n_rng = ns * (3 if anisotropic else 1)
    theta = np.array([template.nugget] + [s.sill for s in template.structures] + [1.0] * n_rng)
    steps = np.full(theta.size, 2.0)
    nugget_probe = 0.01 * template.total_sill

    def objective(t):
        return variogram_objective(_unpack(t, template, anisotropic, total_sill), exps)

    best = objective(theta)
    floor = rtol * rtol * best
    converged = False
    for _ in range(max_iter):
        for j in range(theta.size):
            p = theta[j]
            if j == 0 and p == 0.0:
                cands = [nugget_probe * steps[j]]
            else:
                cands = [p * steps[j], p / steps[j]]
                if j == 0:
                    cands.append(0.0)
            moved = False
            for c in cands:
                trial = theta.copy()
                trial[j] = c
                val = objective(trial)
                if val < best:
                    theta, best, moved = trial, val, True
                    break
            steps[j] = min(steps[j] ** 2, 1e3) if moved else math.sqrt(steps[j])
        if best <= floor or np.all(steps - 1.0 <= rtol):
            converged = True
            break
    if not converged:
        warnings.warn(
            f"fit_variogram reached the iteration cap ({max_iter}); returning best-so-far",
            ConvergenceWarning,
            stacklevel=2,
        )
    return _unpack(theta, template, anisotropic, total_sill)
