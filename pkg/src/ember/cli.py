"""Command-line front end: ``ember <command> --config run.cfg [--seed N] [--threads N] [--out-dir DIR]``."""

from __future__ import annotations

import argparse
import hashlib
import math
import platform
import sys
import warnings
from dataclasses import fields
from pathlib import Path

import numba
import numpy as np
import scipy

from . import __version__
from .bench import (
    BenchConfig,
    TestbedSpec,
    blind_well_column,
    blind_well_report,
    generate_testbed,
    run_bench,
    well_samples,
)
from .config import Config
from .data_model import (
    GridVolume,
    assemble_features,
    check_same_geometry,
    load_grid,
    load_samples,
    write_grid,
    write_samples,
)
from .envelope import build_envelope, product
from .errors import ConfigError, DataError, EmberError, NumericalError
from .forest import ForestParams, load_model, save_model, train
from .kriging import KrigingSpec, krige_many
from .sampler import (
    SamplingSpec,
    fit_sampling_variogram,
    gaussian_baseline_simulate,
    posterior_mean,
    residual_correlation,
    simulate,
    write_realizations,
)
from .variography import SHAPES, VariogramModel, empirical_variogram, fit_variogram

COMMANDS = ("variogram", "train", "estimate", "simulate", "baseline", "bench", "blindwell")
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

DATA_KEYS = ("samples", "secondary", "include_coords", "model", "blind_well")
FOREST_KEYS = ("n_trees", "mtry", "min_node_size", "subsample", "bootstrap", "seed")
EMBEDDED_KEYS = ("kind", "variogram", "range_scale", "mean", "max_neighbors", "max_radius")
VARIOGRAM_KEYS = ("shape", "lag_width", "n_lags", "directions", "angle_tol", "anisotropic", "init", "output")
SAMPLING_KEYS = (
    "variogram", "shape", "lag_width", "n_lags", "anisotropic", "n_realizations", "gibbs_iterations",
    "seed", "dense_limit", "max_neighbors", "tolerance",
)
BASELINE_KEYS = ("kind", "variogram", "mean", "max_neighbors", "n_realizations", "seed")
TESTBED_EXTRA = ("n_realizations", "n_trees", "min_node_size", "srf_source", "write_files", "seed")
OUTPUT_KEYS = ("dir", "prob_above", "quantile_table", "dump_envelope")


class Run:
    """Shared state of one command: config, overrides and the files it produced."""

    def __init__(self, command: str, cfg: Config, seed: int | None, threads: int, out_dir: Path):
        self.command = command
        self.cfg = cfg
        self.seed_override = seed
        self.threads = threads
        self.out_dir = out_dir
        self.outputs: list[Path] = []
        self.notes: list[str] = []

    def seed(self, section: str) -> int:
        if self.seed_override is not None:
            return self.seed_override
        return self.cfg.get_int(section, "seed", 0)

    def path(self, name: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        p = self.out_dir / name
        self.outputs.append(p)
        return p

    def write_manifest(self) -> None:
        lines = [
            f"command = {self.command}",
            f"config_sha256 = {self.cfg.sha256}",
            f"seed = {self.seed_override if self.seed_override is not None else 'from-config'}",
            f"ember = {__version__}",
            f"numpy = {np.__version__}",
            f"scipy = {scipy.__version__}",
            f"numba = {numba.__version__}",
            f"python = {platform.python_version()}",
        ]
        lines += self.notes
        for p in sorted(set(self.outputs)):
            if p.is_file():
                digest = hashlib.sha256(p.read_bytes()).hexdigest()
                lines.append(f"output {p.name} sha256={digest}")
        (self.out_dir / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- config readers -------------------------------------------------------------


def _variogram_file(cfg: Config, section: str, key: str = "variogram") -> VariogramModel:
    path = cfg.get_path(section, key)
    if not path.is_file():
        raise DataError(f"[{section}].{key}: variogram file not found: {path}")
    return VariogramModel.load(path)


def _neighbors(cfg: Config, section: str):
    raw = cfg.get(section, "max_neighbors", "32")
    if raw.lower() in ("all", "none", "unique"):
        return None
    return cfg.get_int(section, "max_neighbors", 32, minimum=1)


def embedded_specs(cfg: Config) -> tuple[KrigingSpec, ...]:
    specs = []
    for section in cfg.sections("embedded."):
        cfg.check_keys(section, EMBEDDED_KEYS)
        name = section[len("embedded."):]
        if not name:
            raise ConfigError(f"[{section}]: embedded model needs a name")
        vm = _variogram_file(cfg, section).scale_ranges(cfg.get_float(section, "range_scale", 1.0))
        kind = cfg.get(section, "kind", "ordinary")
        if kind not in ("simple", "ordinary"):
            raise ConfigError(f"[{section}].kind: expected simple or ordinary, got {kind!r}")
        mean = cfg.get_float(section, "mean", None)
        if kind == "simple" and mean is None:
            raise ConfigError(f"missing required key [{section}].mean (simple kriging)")
        specs.append(
            KrigingSpec(kind, vm, mean, _neighbors(cfg, section), cfg.get_float(section, "max_radius", math.inf), name)
        )
    return tuple(specs)


def forest_params(run: Run) -> ForestParams:
    cfg = run.cfg
    cfg.check_keys("forest", FOREST_KEYS)
    mtry_raw = cfg.get("forest", "mtry", "auto")
    mtry = None if mtry_raw.lower() == "auto" else cfg.get_int("forest", "mtry", minimum=1)
    try:
        return ForestParams(
            n_trees=cfg.get_int("forest", "n_trees", 100, minimum=1),
            mtry=mtry,
            min_node_size=cfg.get_int("forest", "min_node_size", 1, minimum=1),
            subsample=cfg.get_float("forest", "subsample", 0.632),
            bootstrap=cfg.get_bool("forest", "bootstrap", False),
            seed=run.seed("forest"),
            embedded=embedded_specs(cfg),
        )
    except DataError as exc:
        raise ConfigError(f"[forest]: {exc}") from exc


def load_inputs(run: Run, need_secondary: bool = True):
    cfg = run.cfg
    cfg.check_keys("data", DATA_KEYS)
    samples = load_samples(cfg.get_path("data", "samples"))
    grids = []
    if need_secondary:
        grids = [load_grid(p) for p in cfg.get_paths("data", "secondary")]
        if not grids:
            raise ConfigError("[data].secondary: list at least one grid file")
        check_same_geometry(grids)
    return samples, grids


def model_path(run: Run) -> Path:
    return Path(run.cfg.get_path("data", "model", run.out_dir / "model.ember"))


def _train_and_save(run: Run, samples, grids):
    feats = assemble_features(samples.coords, grids, run.cfg.get_bool("data", "include_coords", True))
    model = train(samples, feats, forest_params(run), threads=run.threads)
    path = model_path(run)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, path)
    run.outputs.append(path)
    return model


def _load_model(run: Run, samples):
    path = model_path(run)
    if not path.is_file():
        raise DataError(f"[data].model: model file not found: {path} (run 'train' or 'estimate' first)")
    model = load_model(path)
    if not np.array_equal(model.samples.values, samples.values) or not np.array_equal(
        model.samples.coords, samples.coords
    ):
        raise DataError(f"model {path} was trained on different samples than [data].samples")
    return model


def output_thresholds(cfg: Config) -> list[float]:
    cfg.check_keys("output", OUTPUT_KEYS)
    return cfg.get_floats("output", "prob_above", [])


# -- commands -------------------------------------------------------------------


def cmd_variogram(run: Run) -> None:
    cfg = run.cfg
    cfg.check_keys("variogram", VARIOGRAM_KEYS)
    samples, _ = load_inputs(run, need_secondary=False)
    shape = cfg.get("variogram", "shape", "spherical")
    if shape not in SHAPES:
        raise ConfigError(f"[variogram].shape: expected one of {SHAPES}, got {shape!r}")
    lag = cfg.get_float("variogram", "lag_width")
    n_lags = cfg.get_int("variogram", "n_lags", 10, minimum=1)
    tol = cfg.get_float("variogram", "angle_tol", 90.0)
    dirs = []
    for item in cfg.get_list("variogram", "directions", ["1 0 0"], sep=";"):
        try:
            d = [float(v) for v in item.split()]
        except ValueError:
            raise ConfigError(f"[variogram].directions: bad direction {item!r}") from None
        if len(d) != 3:
            raise ConfigError(f"[variogram].directions: need 3 components, got {item!r}")
        dirs.append(d)
    exps = [empirical_variogram(samples, d, tol, lag, n_lags) for d in dirs]
    if cfg.has("variogram", "init"):
        init = _variogram_file(cfg, "variogram", "init")
    else:
        var = float(np.var(samples.values)) or 1.0
        init = VariogramModel.isotropic(shape, 0.9 * var, 0.5 * n_lags * lag, 0.1 * var)
    model = fit_variogram(exps, shape, init, anisotropic=cfg.get_bool("variogram", "anisotropic", False))
    name = cfg.get("variogram", "output", "variogram.var")
    model.save(run.path(name))
    for n, e in enumerate(exps):
        e.to_csv(run.path(f"experimental_{n + 1}.csv"))


def cmd_train(run: Run) -> None:
    samples, grids = load_inputs(run)
    _train_and_save(run, samples, grids)


def _write_products(run: Run, env) -> None:
    cfg = run.cfg
    write_grid(product(env, "mean"), run.path("envelope_mean.grd"))
    for p in (10, 50, 90):
        write_grid(product(env, "quantile", p / 100), run.path(f"p{p}.grd"))
    write_grid(product(env, "spread", 0.1, 0.9), run.path("spread.grd"))
    for t in output_thresholds(cfg):
        write_grid(product(env, "prob_above", t), run.path(f"prob_above_{t:g}.grd"))
    if cfg.get_bool("output", "dump_envelope", False):
        env.dump_csv(run.path("envelope.csv"))
    if cfg.get_bool("output", "quantile_table", False):
        table = env.quantile_table()
        lines = ["cell_index," + ",".join(f"q{j:03d}" for j in range(table.shape[1]))]
        for c in np.flatnonzero(env.valid).tolist():
            lines.append(f"{c}," + ",".join(repr(v) for v in table[c].tolist()))
        run.path("quantile_table.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_estimate(run: Run) -> None:
    samples, grids = load_inputs(run)
    output_thresholds(run.cfg)
    if model_path(run).is_file():
        model = _load_model(run, samples)
    else:
        model = _train_and_save(run, samples, grids)
    env = build_envelope(model, samples, grids)
    _write_products(run, env)


def sampling_spec(run: Run, env=None, samples=None) -> SamplingSpec:
    cfg = run.cfg
    cfg.check_keys("sampling", SAMPLING_KEYS)
    source = cfg.get("sampling", "variogram")
    if source.lower() == "infer":
        shape = cfg.get("sampling", "shape", "spherical")
        lag = cfg.get_float("sampling", "lag_width")
        n_lags = cfg.get_int("sampling", "n_lags", 10, minimum=1)
        series = residual_correlation(env, samples, lag_width=lag, n_lags=n_lags)
        init = VariogramModel.isotropic(shape, 1.0, 0.5 * n_lags * lag)
        vm = fit_sampling_variogram(series, shape, init, anisotropic=cfg.get_bool("sampling", "anisotropic", False))
        vm.save(run.path("sampling_variogram.var"))
    else:
        vm = _variogram_file(cfg, "sampling").normalized()
    kw = {}
    if cfg.has("sampling", "dense_limit"):
        kw["dense_limit"] = cfg.get_int("sampling", "dense_limit", minimum=1)
    try:
        return SamplingSpec(
            vm,
            n_realizations=cfg.get_int("sampling", "n_realizations", 10, minimum=1),
            seed=run.seed("sampling"),
            gibbs_iterations=cfg.get_int("sampling", "gibbs_iterations", 100, minimum=0),
            tolerance=cfg.get_float("sampling", "tolerance", 1e-9),
            max_neighbors=cfg.get_int("sampling", "max_neighbors", 32, minimum=1),
            **kw,
        )
    except DataError as exc:
        raise ConfigError(f"[sampling]: {exc}") from exc


def cmd_simulate(run: Run) -> None:
    samples, grids = load_inputs(run)
    model = _load_model(run, samples)
    env = build_envelope(model, samples, grids)
    spec = sampling_spec(run, env, samples)
    reals = simulate(model, env, samples, spec, threads=run.threads)
    for i in range(len(reals)):
        run.outputs.append(run.out_dir / f"real_{i + 1:04d}.grd")
    run.notes += write_realizations(reals, run.out_dir, spec)
    write_grid(posterior_mean(reals), run.path("posterior_mean.grd"))


def cmd_baseline(run: Run) -> None:
    cfg = run.cfg
    cfg.check_keys("baseline", BASELINE_KEYS)
    samples, grids = load_inputs(run)
    geom = grids[0].geometry
    vm = _variogram_file(cfg, "baseline")
    kind = cfg.get("baseline", "kind", "ordinary")
    if kind not in ("simple", "ordinary"):
        raise ConfigError(f"[baseline].kind: expected simple or ordinary, got {kind!r}")
    mean = cfg.get_float("baseline", "mean", None)
    if kind == "simple" and mean is None:
        raise ConfigError("missing required key [baseline].mean (simple kriging)")
    spec = KrigingSpec(kind, vm, mean, _neighbors(cfg, "baseline"))
    trend, _ = krige_many(spec, samples, geom.cell_centers())
    write_grid(GridVolume(geom, trend, "kriging"), run.path("kriging.grd"))
    n_real = cfg.get_int("baseline", "n_realizations", 10, minimum=1)
    reals = gaussian_baseline_simulate(
        samples, spec, vm, geom, n_real, run.seed("baseline"), threads=run.threads, trend=trend
    )
    for i in range(len(reals)):
        run.outputs.append(run.out_dir / f"real_{i + 1:04d}.grd")
    run.notes += write_realizations(reals, run.out_dir)


def testbed_spec(cfg: Config) -> TestbedSpec:
    names = [f.name for f in fields(TestbedSpec)]
    cfg.check_keys("testbed", names + list(TESTBED_EXTRA))
    kw = {}
    for f in fields(TestbedSpec):
        if not cfg.has("testbed", f.name):
            continue
        if f.name in ("first_zone",):
            kw[f.name] = cfg.get("testbed", f.name)
        elif f.name == "seis_zones":
            kw[f.name] = tuple(cfg.get_list("testbed", f.name))
        elif f.name in ("nx", "ny", "nz", "layers_per_zone", "n_belts", "n_wells", "n_wells_many"):
            kw[f.name] = cfg.get_int("testbed", f.name)
        else:
            kw[f.name] = cfg.get_float("testbed", f.name)
    try:
        return TestbedSpec(**kw)
    except DataError as exc:
        raise ConfigError(f"[testbed]: {exc}") from exc


def cmd_bench(run: Run) -> None:
    cfg = run.cfg
    spec = testbed_spec(cfg)
    seed = run.seed("testbed")
    try:
        bc = BenchConfig(
            testbed=spec,
            n_realizations=cfg.get_int("testbed", "n_realizations", 20, minimum=1),
            n_trees=cfg.get_int("testbed", "n_trees", 100, minimum=1),
            min_node_size=cfg.get_int("testbed", "min_node_size", 1, minimum=1),
            srf_source=cfg.get("testbed", "srf_source", "residual"),
        )
    except DataError as exc:
        raise ConfigError(f"[testbed]: {exc}") from exc
    if cfg.get_bool("testbed", "write_files", False):
        tb = generate_testbed(spec, seed)
        write_grid(tb.truth, run.path("truth.grd"))
        write_grid(tb.zones, run.path("zones.grd"))
        for g in tb.secondary:
            write_grid(g, run.path(f"{g.name}.grd"))
        write_samples(tb.wells, run.path("wells_few.csv"))
        write_samples(generate_testbed(spec, seed, n_wells=spec.n_wells_many).wells, run.path("wells_many.csv"))
        write_samples(well_samples(tb.truth, blind_well_column(spec, seed)), run.path("blind_well.csv"))
    result = run_bench(bc, seed, threads=run.threads)
    result.to_csv(run.path("metrics.csv"))
    result.good_variogram.save(run.path("truth_variogram.var"))


def cmd_blindwell(run: Run) -> None:
    samples, grids = load_inputs(run)
    truth = load_samples(run.cfg.get_path("data", "blind_well"))
    model = _load_model(run, samples) if model_path(run).is_file() else _train_and_save(run, samples, grids)
    env = build_envelope(model, samples, grids)
    report = blind_well_report(env, truth, output_thresholds(run.cfg))
    report.to_csv(run.path("blindwell.csv"))
    env.dump_csv(run.path("blindwell_cdf.csv"), cells=report.cells)


HANDLERS = {
    "variogram": cmd_variogram,
    "train": cmd_train,
    "estimate": cmd_estimate,
    "simulate": cmd_simulate,
    "baseline": cmd_baseline,
    "bench": cmd_bench,
    "blindwell": cmd_blindwell,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ember", description="Envelope-based estimation and simulation.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="run configuration (INI format)")
    ap.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    ap.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
    ap.add_argument("--out-dir", default=None, help="output directory (default: [output].dir or '.')")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = Config.load(args.config)
        out = Path(args.out_dir) if args.out_dir else Path(cfg.get_path("output", "dir", "."))
        run = Run(args.command, cfg, args.seed, args.threads, out)
        out.mkdir(parents=True, exist_ok=True)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            HANDLERS[args.command](run)
        run.write_manifest()
    except ConfigError as exc:
        print(f"ember: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"ember: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"ember: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except EmberError as exc:
        print(f"ember: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
