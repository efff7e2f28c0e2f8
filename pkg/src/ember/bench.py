"""Synthetic layered reservoir testbed, error metrics and the comparison harness."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data_model import (
    MISSING,
    GridGeometry,
    GridVolume,
    SampleSet,
    assemble_features,
    check_same_geometry,
)
from .envelope import Envelope, build_envelope
from .errors import DataError
from .forest import ForestParams, train
from .kriging import KrigingSpec, krige_many
from .sampler import (
    SamplingSpec,
    correlation_from_moments,
    fit_sampling_variogram,
    gaussian_baseline_simulate,
    simulate,
)
from .variography import Structure, VariogramModel, empirical_variogram, fit_variogram

ZONE_CODES = {"channel": 1.0, "shoreface": 2.0}
ZONE_KINDS = ("channel", "shoreface")
METHODS = ("Ember", "Emb Short Vario", "Gaussian", "Gau Short Vario")
METRIC_COLUMNS = ("var_error", "iqr_error", "var_sim_err", "iqr_sim_err")
SHORT_RANGE_FACTOR = 0.15


@dataclass(frozen=True)
class TestbedSpec:
    """Desk-scale layered reservoir: zones of ``layers_per_zone`` layers alternate in kind."""

    __test__ = False  # not a pytest class

    nx: int = 24
    ny: int = 24
    nz: int = 8
    layers_per_zone: int = 2
    first_zone: str = "shoreface"
    n_belts: int = 2
    channel_width: float | None = None
    net_to_gross: float = 0.3
    poro_in: float = 0.25
    poro_out: float = 0.06
    shore_base: float = 0.15
    shore_amplitude: float = 0.07
    shore_azimuth: float = 30.0
    noise_sd: float = 0.015
    noise_range: float = 2.0
    seis_noise: float = 0.5
    seis_zones: tuple[str, ...] = ("channel",)
    n_wells: int = 8
    n_wells_many: int = 36

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz, self.layers_per_zone) < 1:
            raise DataError("testbed dimensions and layers_per_zone must be positive")
        if self.first_zone not in ZONE_KINDS:
            raise DataError(f"first_zone must be one of {ZONE_KINDS}")
        if self.nz < 2 * self.layers_per_zone:
            raise DataError("testbed needs at least one zone of each kind (nz >= 2 * layers_per_zone)")
        for name in ("poro_in", "poro_out", "shore_base"):
            v = getattr(self, name)
            if not 0.0 <= v <= 0.35:
                raise DataError(f"{name} must lie in [0, 0.35], got {v}")
        if not 0.0 < self.net_to_gross < 1.0:
            raise DataError("net_to_gross must lie in (0, 1)")
        if self.n_belts < 1:
            raise DataError("n_belts must be >= 1")
        if min(self.n_wells, self.n_wells_many) < 1 or max(self.n_wells, self.n_wells_many) > self.nx * self.ny:
            raise DataError("well counts must lie in [1, nx * ny]")
        if any(z not in ZONE_KINDS for z in self.seis_zones):
            raise DataError(f"seis_zones entries must be in {ZONE_KINDS}")
        for name in ("noise_sd", "seis_noise", "shore_amplitude"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be >= 0")

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(self.nx, self.ny, self.nz)

    def layer_kinds(self) -> list[str]:
        other = {"channel": "shoreface", "shoreface": "channel"}
        kinds, kind = [], self.first_zone
        for k in range(self.nz):
            if k and k % self.layers_per_zone == 0:
                kind = other[kind]
            kinds.append(kind)
        return kinds


@dataclass(frozen=True)
class Testbed:
    truth: GridVolume
    secondary: list[GridVolume]
    zones: GridVolume
    wells: SampleSet
    channel: np.ndarray = field(repr=False)

    def __iter__(self):
        return iter((self.truth, self.secondary, self.zones, self.wells))


def _stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(tag),)))


def _smooth_noise(rng, shape, sigma):
    white = rng.standard_normal(shape)
    if sigma > 0:
        white = ndimage.gaussian_filter(white, sigma=(0.5 * sigma, sigma, sigma), mode="reflect")
    sd = white.std()
    return white / sd if sd > 0 else white


def place_wells(spec: TestbedSpec, n_wells: int, seed: int) -> np.ndarray:
    """``(n_wells, 2)`` column indices ``(i, j)``: one well per block of a stratified layout."""
    rng = _stream(seed, 11 + n_wells)
    bx = max(1, min(spec.nx, math.ceil(math.sqrt(n_wells * spec.nx / spec.ny))))
    by = max(1, min(spec.ny, math.ceil(n_wells / bx)))
    while bx * by < n_wells:
        bx = min(spec.nx, bx + 1)
        by = min(spec.ny, math.ceil(n_wells / bx))
    xe = np.linspace(0, spec.nx, bx + 1).round().astype(int)
    ye = np.linspace(0, spec.ny, by + 1).round().astype(int)
    blocks = np.sort(rng.choice(bx * by, size=n_wells, replace=False))
    cols = []
    for b in blocks.tolist():
        a, c = b % bx, b // bx
        cols.append((int(rng.integers(xe[a], xe[a + 1])), int(rng.integers(ye[c], ye[c + 1]))))
    return np.array(cols, dtype=np.int64)


def well_samples(truth: GridVolume, columns: np.ndarray) -> SampleSet:
    g = truth.geometry
    coords, values, names = [], [], []
    for w, (i, j) in enumerate(columns.tolist()):
        cells = g.index(np.full(g.nz, i), np.full(g.nz, j), np.arange(g.nz))
        coords.append(g.cell_centers(cells))
        values.append(truth.values[cells])
        names += [f"W{w + 1:02d}"] * g.nz
    return SampleSet(np.vstack(coords), np.concatenate(values), names)


def blind_well_column(spec: TestbedSpec, seed: int) -> np.ndarray:
    """A ``(1, 2)`` column index drawn away from the wells of both scenarios."""
    used = {tuple(c) for n in (spec.n_wells, spec.n_wells_many) for c in place_wells(spec, n, seed).tolist()}
    free = [(i, j) for j in range(spec.ny) for i in range(spec.nx) if (i, j) not in used]
    if not free:
        raise DataError("no column left for a blind well")
    pick = free[int(_stream(seed, 31).integers(len(free)))]
    return np.array([pick], dtype=np.int64)


def generate_testbed(spec: TestbedSpec, seed: int, n_wells: int | None = None) -> Testbed:
    """Truth porosity, secondaries ``seis`` and ``noise``, zone labels and well samples."""
    g = spec.geometry
    nx, ny, nz = spec.nx, spec.ny, spec.nz
    kinds = spec.layer_kinds()
    shape = (nz, ny, nx)
    truth = np.empty(shape)
    channel = np.zeros(shape, dtype=bool)
    zones = np.empty(shape)
    noise = spec.noise_sd * _smooth_noise(_stream(seed, 1), shape, spec.noise_range)

    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny))
    az = math.radians(spec.shore_azimuth)
    proj = math.sin(az) * ii + math.cos(az) * jj
    span = proj.max() - proj.min()
    trend = 2.0 * (proj - proj.min()) / span - 1.0 if span > 0 else np.zeros_like(proj, dtype=float)

    width = spec.channel_width or max(1.0, spec.net_to_gross * ny / spec.n_belts)
    rng_ch = _stream(seed, 2)
    zone_id = [k // spec.layers_per_zone for k in range(nz)]
    belts = {}
    for z in sorted(set(zone_id)):
        belts[z] = [
            (
                rng_ch.uniform(width, max(width, ny - width)),
                rng_ch.uniform(0.5, 1.0) * ny / 8.0,
                nx * rng_ch.uniform(0.6, 1.2),
                rng_ch.uniform(0, 2 * math.pi),
            )
            for _ in range(spec.n_belts)
        ]
    for k in range(nz):
        zones[k] = ZONE_CODES[kinds[k]]
        if kinds[k] == "shoreface":
            truth[k] = spec.shore_base + spec.shore_amplitude * trend
        else:
            shift = rng_ch.uniform(-1.0, 1.0)
            mask = np.zeros((ny, nx), dtype=bool)
            for y0, amp, wav, phase in belts[zone_id[k]]:
                yc = y0 + shift + amp * np.sin(2 * math.pi * ii / wav + phase)
                mask |= np.abs(jj - yc) < width / 2.0
            channel[k] = mask
            truth[k] = np.where(mask, spec.poro_in, spec.poro_out)
    truth = np.clip(truth + noise, 0.0, 0.35)

    rng_s = _stream(seed, 3)
    seis = spec.seis_noise * rng_s.standard_normal(shape)
    resolved = np.isin(zones, [ZONE_CODES[z] for z in spec.seis_zones])
    seis = seis + np.where(resolved, channel.astype(float), 0.0)
    noise_grid = _stream(seed, 4).standard_normal(shape)

    truth_g = GridVolume(g, truth.ravel(), "porosity")
    secondary = [GridVolume(g, seis.ravel(), "seis"), GridVolume(g, noise_grid.ravel(), "noise")]
    zones_g = GridVolume(g, zones.ravel(), "zone")
    cols = place_wells(spec, spec.n_wells if n_wells is None else n_wells, seed)
    return Testbed(truth_g, secondary, zones_g, well_samples(truth_g, cols), channel.ravel())


# -- metrics ------------------------------------------------------------------


def error_spread(e: np.ndarray) -> tuple[float, float]:
    """Population variance and interquartile range (linear interpolation) of errors."""
    e = np.asarray(e, dtype=float)
    if e.size == 0:
        raise DataError("no cells to evaluate")
    q1, q3 = np.quantile(e, [0.25, 0.75])
    return float(np.var(e)), float(q3 - q1)


@dataclass(frozen=True)
class ErrorReport:
    zone: str
    method: str
    case: str
    var_error: float
    iqr_error: float
    var_sim_err: float
    iqr_sim_err: float

    def values(self) -> tuple[float, float, float, float]:
        return (self.var_error, self.iqr_error, self.var_sim_err, self.iqr_sim_err)


def zone_cells(zones: GridVolume, zone_kind: str, exclude=None) -> np.ndarray:
    if zone_kind not in ZONE_CODES:
        raise DataError(f"unknown zone kind {zone_kind!r}")
    sel = zones.values == ZONE_CODES[zone_kind]
    if exclude is not None:
        sel[np.asarray(exclude, dtype=np.int64)] = False
    cells = np.flatnonzero(sel)
    if cells.size == 0:
        raise DataError(f"zone kind {zone_kind!r} selects no cells")
    return cells


def error_metrics(
    truth: GridVolume,
    estimate: GridVolume,
    realizations,
    zones: GridVolume,
    zone_kind: str,
    *,
    exclude_cells=None,
    method: str = "",
    case: str = "",
) -> ErrorReport:
    """Error spread of an estimate and of realizations over one zone kind, well cells excluded."""
    realizations = list(realizations)
    check_same_geometry([truth, estimate, zones, *realizations])
    cells = zone_cells(zones, zone_kind, exclude_cells)
    ok = ~truth.missing[cells] & ~estimate.missing[cells]
    var_e, iqr_e = error_spread(estimate.values[cells][ok] - truth.values[cells][ok])
    if realizations:
        sims = []
        for r in realizations:
            ok_r = ~truth.missing[cells] & ~r.missing[cells]
            sims.append(error_spread(r.values[cells][ok_r] - truth.values[cells][ok_r]))
        var_s, iqr_s = (float(np.mean(col)) for col in zip(*sims))
    else:
        var_s = iqr_s = math.nan
    return ErrorReport(zone_kind, method, case, var_e, iqr_e, var_s, iqr_s)


# -- blind well ---------------------------------------------------------------


@dataclass(frozen=True)
class BlindWellReport:
    rows: list[dict]
    thresholds: tuple[float, ...]
    coverage: float
    cells: np.ndarray

    def to_csv(self, path) -> None:
        cols = ["x", "y", "z", "cell_index", "truth", "p10", "p50", "p90"]
        cols += [f"prob_above_{t:g}" for t in self.thresholds]
        lines = [",".join(cols)]
        for r in self.rows:
            lines.append(",".join(_fmt_field(r[c]) for c in cols))
        lines.append(f"coverage_p10_p90,{self.coverage!r}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt_field(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


def blind_well_report(envelope: Envelope, truth: SampleSet, thresholds=()) -> BlindWellReport:
    """Per-depth truth against P10/P50/P90 and exceedance probabilities of the envelope."""
    thresholds = tuple(float(t) for t in thresholds)
    cells = envelope.geometry.locate(truth.coords, strict=False)
    if np.any(cells < 0):
        raise DataError("blind well path leaves the envelope grid")
    if not np.all(envelope.valid[cells]):
        bad = int(np.flatnonzero(~envelope.valid[cells])[0])
        raise DataError(f"blind well sample {bad} falls in a cell without an envelope CDF")
    rows, covered = [], 0
    for n, c in enumerate(cells.tolist()):
        cdf = envelope.cdf(c)
        p10, p50, p90 = cdf.quantile(0.1), cdf.quantile(0.5), cdf.quantile(0.9)
        z = float(truth.values[n])
        row = {
            "x": truth.coords[n, 0],
            "y": truth.coords[n, 1],
            "z": truth.coords[n, 2],
            "cell_index": int(c),
            "truth": z,
            "p10": p10,
            "p50": p50,
            "p90": p90,
        }
        for t in thresholds:
            row[f"prob_above_{t:g}"] = 1.0 - cdf(t)
        covered += p10 <= z <= p90
        rows.append(row)
    return BlindWellReport(rows, thresholds, covered / len(rows), cells)


# -- comparison harness -------------------------------------------------------


@dataclass(frozen=True)
class BenchConfig:
    testbed: TestbedSpec = TestbedSpec()
    n_realizations: int = 20
    n_trees: int = 100
    min_node_size: int = 1
    embedded_range_factors: tuple[float, ...] = (1.0, 0.5)
    shape: str = "spherical"
    srf_source: str = "residual"

    def __post_init__(self):
        if self.srf_source not in ("residual", "truth"):
            raise DataError("srf_source must be 'residual' or 'truth'")


def truth_variogram(truth: GridVolume, shape: str = "spherical", seed: int = 0, max_points: int = 2000) -> VariogramModel:
    """Anisotropic model fitted to the exhaustive truth along the three grid axes."""
    g = truth.geometry
    cells, axes = _axis_subsample(truth, seed, max_points)
    pts = SampleSet(g.cell_centers(cells), truth.values[cells])
    cs = g.cell_size
    exps = [empirical_variogram(pts, direction=d, angle_tol=22.5, lag_width=w, n_lags=n) for d, w, n in axes]
    var = float(np.var(pts.values))
    init = VariogramModel(
        0.1 * var,
        (Structure(shape, 0.9 * var, (g.nx * cs[0] / 3, g.ny * cs[1] / 3, max(cs[2], g.nz * cs[2] / 3))),),
    )
    return fit_variogram(exps, shape, init, anisotropic=True)


def _axis_subsample(truth: GridVolume, seed: int, max_points: int):
    g = truth.geometry
    cells = np.flatnonzero(~truth.missing)
    if cells.size > max_points:
        cells = np.sort(_stream(seed, 21).choice(cells, max_points, replace=False))
    axes = []
    for axis, n in enumerate(g.shape):
        if n >= 3:
            d = [0.0, 0.0, 0.0]
            d[axis] = 1.0
            axes.append((d, g.cell_size[axis], min(12, n - 1)))
    return cells, axes


def exhaustive_sampling_variogram(
    envelope: Envelope, truth: GridVolume, init: VariogramModel, shape: str = "spherical", seed: int = 0,
    max_points: int = 2000,
) -> VariogramModel:
    """Unit-sill model fitted to the correlation of ``(truth - mean) / std`` over the whole grid."""
    cells, axes = _axis_subsample(truth, seed, max_points)
    cells = cells[envelope.valid[cells]]
    mean, std = envelope.mean()[cells], envelope.std()[cells]
    pts = truth.geometry.cell_centers(cells)
    series = [
        correlation_from_moments(
            pts, truth.values[cells], mean, std, lag_width=w, n_lags=n, direction=d, angle_tol=22.5
        )
        for d, w, n in axes
    ]
    return fit_sampling_variogram(series, shape, init, anisotropic=True)


@dataclass
class BenchResult:
    reports: list[ErrorReport]
    good_variogram: VariogramModel
    estimates: dict = field(default_factory=dict, repr=False)
    sampling_variograms: dict = field(default_factory=dict, repr=False)

    def lookup(self, case: str, zone: str, method: str) -> ErrorReport:
        for r in self.reports:
            if (r.case, r.zone, r.method) == (case, zone, method):
                return r
        raise KeyError((case, zone, method))

    def to_csv(self, path) -> None:
        lines = ["case,zone,method," + ",".join(METRIC_COLUMNS)]
        for r in self.reports:
            lines.append(f"{r.case},{r.zone},{r.method}," + ",".join(f"{v:.10f}" for v in r.values()))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_bench(config: BenchConfig, seed: int, threads: int = 1) -> BenchResult:
    """Ember and Gaussian estimation/simulation errors for both well scenarios and variogram cases."""
    tb = config.testbed
    base = generate_testbed(tb, seed)
    good = truth_variogram(base.truth, config.shape, seed)
    short = good.scale_ranges(SHORT_RANGE_FACTOR)
    embedded = tuple(
        KrigingSpec("ordinary", good.scale_ranges(f), name=f"krige_{n}")
        for n, f in enumerate(config.embedded_range_factors)
    )
    g = base.truth.geometry
    centers = g.cell_centers()
    reports, estimates, srfs = [], {}, {}
    for case, n_wells in (("few", tb.n_wells), ("many", tb.n_wells_many)):
        wells = generate_testbed(tb, seed, n_wells=n_wells).wells
        well_cells = g.locate(wells.coords)
        feats = assemble_features(wells.coords, base.secondary, include_coords=True)
        params = ForestParams(
            n_trees=config.n_trees, min_node_size=config.min_node_size, seed=seed, embedded=embedded
        )
        model = train(wells, feats, params, threads=threads)
        env = build_envelope(model, wells, base.secondary)
        mean = GridVolume(g, np.where(env.valid, env.mean(), MISSING), "ember_mean")
        srf_good = good.normalized()
        if config.srf_source == "residual":
            srf_good = exhaustive_sampling_variogram(env, base.truth, srf_good, config.shape, seed)
        srf_short = srf_good.scale_ranges(SHORT_RANGE_FACTOR)
        srfs[case] = srf_good
        runs = {}
        for method, srf in (("Ember", srf_good), ("Emb Short Vario", srf_short)):
            spec = SamplingSpec(srf, config.n_realizations, seed)
            runs[method] = (mean, simulate(model, env, wells, spec, threads=threads))
        for method, vm in (("Gaussian", good), ("Gau Short Vario", short)):
            kspec = KrigingSpec("ordinary", vm)
            trend, _ = krige_many(kspec, wells, centers)
            sims = gaussian_baseline_simulate(
                wells, kspec, vm, g, config.n_realizations, seed, threads=threads, trend=trend
            )
            runs[method] = (GridVolume(g, trend, "kriging"), sims)
        for zone in ZONE_KINDS:
            for method in METHODS:
                est, sims = runs[method]
                reports.append(
                    error_metrics(
                        base.truth, est, sims, base.zones, zone, exclude_cells=well_cells, method=method, case=case
                    )
                )
        estimates[case] = {m: runs[m][0] for m in METHODS}
    return BenchResult(reports, good, estimates, srfs)
