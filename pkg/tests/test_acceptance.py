"""Acceptance criteria 1-9. Each test prints one ``criterion N ... PASS|FAIL`` line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the verdict lines.
"""

import math
import time

import numpy as np
import pytest
from scipy import stats

from ember import cli
from ember.bench import BenchConfig, generate_testbed, run_bench, truth_variogram
from ember.data_model import FeatureMatrix, GridGeometry, GridVolume, SampleSet, assemble_features
from ember.envelope import Envelope, build_envelope
from ember.forest import ForestParams, conditional_cdf, forest_weights, predict_features_many, train
from ember.kriging import KrigingSpec, krige, krige_many
from ember.sampler import (
    ConditioningInterval,
    SamplingSpec,
    gibbs_truncated_gaussian,
    residual_correlation,
    simulate,
)
from ember.variography import VariogramModel, model_gamma
from oracles import circulant_field_2d, dense_krige, ks_to_discrete

pytestmark = [pytest.mark.acceptance, pytest.mark.filterwarnings("ignore::ember.errors.EmberWarning")]


def verdict(n, title, ok, detail):
    print(f"\ncriterion {n} ({title}): {'PASS' if ok else 'FAIL'} | {detail}", flush=True)
    assert ok, detail


def line_samples(values):
    n = len(values)
    return SampleSet(np.column_stack([np.arange(n), np.zeros(n), np.zeros(n)]), values)


def gaussian_field_case(seed, n=50, a=12.0, n_samples=200):
    g = GridGeometry(n, n, 1)
    truth = circulant_field_2d(n, n, "spherical", a, np.random.default_rng(seed))[0].ravel()
    rng = np.random.default_rng(100 + seed)
    cells = np.sort(rng.choice(g.n_cells, n_samples, replace=False))
    return g, truth, cells, SampleSet(g.cell_centers(cells), truth[cells])


class TestAcceptance:
    def test_c1_weights_and_cdfs(self, small_case):
        t0 = time.perf_counter()
        m, s, g = small_case["model"], small_case["samples"], small_case["geometry"]
        rng = np.random.default_rng(2024)
        xyz = rng.uniform([-0.5, -0.5, -0.5], [11.5, 11.5, 1.5], (1000, 3))
        base = np.column_stack([rng.normal(size=1000), xyz])
        Y = predict_features_many(m, xyz, base)
        W = forest_weights(m, Y)
        sum_err = float(np.max(np.abs(np.asarray(W.sum(axis=1)).ravel() - 1.0)))
        grid = np.linspace(m.targets.min() - 1, m.targets.max() + 1, 64)
        monotone = all(np.all(np.diff(conditional_cdf(m, y)(grid)) >= 0) for y in Y)
        env = build_envelope(m, s, small_case["secondary"])
        q = [env.quantile(p) for p in (0.1, 0.5, 0.9)]
        ordered = bool(np.all(q[0] <= q[1]) and np.all(q[1] <= q[2]))
        elapsed = time.perf_counter() - t0
        ok = sum_err <= 1e-9 and monotone and ordered and elapsed < 60
        verdict(1, "weights/CDF suite", ok,
                f"max |sum-1|={sum_err:.1e}, monotone={monotone}, q10<=q50<=q90 at {g.n_cells} cells={ordered}, "
                f"{elapsed:.1f}s")

    def test_c2_kriging_oracle(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(50):
            k = int(rng.integers(1, 6))
            pts = rng.uniform(0, 10, (k, 3))
            vals = rng.normal(size=k)
            target = rng.uniform(0, 10, 3)
            shape = ["spherical", "exponential", "gaussian"][int(rng.integers(3))]
            sill, a, nugget = rng.uniform(0.5, 2.0), rng.uniform(2.0, 15.0), rng.uniform(0.0, 0.3)
            kind = "ordinary" if rng.random() < 0.5 else "simple"
            mean = float(rng.normal()) if kind == "simple" else None
            vm = VariogramModel.isotropic(shape, sill - nugget, a, nugget)
            got = krige(KrigingSpec(kind, vm, mean, None), SampleSet(pts, vals), target)
            est, var, _ = dense_krige(kind, pts, vals, target, shape, sill - nugget, a, nugget, mean)
            worst = max(worst, abs(got.estimate - est), abs(got.variance - var))
        pts = rng.uniform(0, 10, (5, 3))
        vals = rng.normal(size=5)
        spec = KrigingSpec("ordinary", VariogramModel.isotropic("spherical", 1.0, 6.0), max_neighbors=None)
        est, var = krige_many(spec, SampleSet(pts, vals), pts)
        exact = bool(np.array_equal(est, vals) and np.all(var == 0.0))
        verdict(2, "kriging oracle", worst <= 1e-8 and exact,
                f"max deviation over 50 configurations={worst:.1e}, bit-exact at data={exact}")

    def test_c3_consistency_trend(self):
        t0 = time.perf_counter()
        sigma = 0.3

        def mean_fn(y):
            return np.sin(2 * np.pi * y[:, 0]) + 2 * y[:, 1]

        queries = np.random.default_rng(12345).uniform(0.1, 0.9, (20, 2))
        zgrid = np.linspace(-1.5, 3.5, 101)
        true = stats.norm.cdf((zgrid[None, :] - mean_fn(queries)[:, None]) / sigma)
        medians = []
        for n in (100, 400, 1600):
            errs = []
            for seed in range(5):
                rng = np.random.default_rng(seed)
                y = rng.uniform(0, 1, (n, 2))
                z = mean_fn(y) + sigma * rng.standard_normal(n)
                model = train(line_samples(z), FeatureMatrix(y, ("y1", "y2")), ForestParams(n_trees=100, seed=seed))
                W = forest_weights(model, queries).toarray()
                est = W @ (model.targets[:, None] <= zgrid[None, :])
                errs.append(np.abs(est - true).mean())
            medians.append(float(np.median(errs)))
        elapsed = time.perf_counter() - t0
        ok = medians[0] > medians[1] > medians[2] and elapsed < 300
        verdict(3, "consistency trend", ok,
                "median MAE n=100/400/1600: " + " / ".join(f"{m:.4f}" for m in medians) + f", {elapsed:.0f}s")

    def test_c4_embedding_limit(self):
        t0 = time.perf_counter()
        g, truth, cells, s = gaussian_field_case(0)
        noise = GridVolume(g, np.random.default_rng(99).standard_normal(g.n_cells), "noise")
        spec = KrigingSpec("ordinary", VariogramModel.isotropic("spherical", 1.0, 12.0), name="krige")
        feats = assemble_features(s.coords, [noise], include_coords=False)
        model = train(s, feats, ForestParams(n_trees=100, seed=0, embedded=(spec,)))
        env = build_envelope(model, s, [noise])
        free = np.setdiff1d(np.arange(g.n_cells), cells)
        kriged, _ = krige_many(spec, s, g.cell_centers(free))
        rms_k = math.sqrt(np.mean((kriged - truth[free]) ** 2))
        rms_e = math.sqrt(np.mean((env.mean()[free] - truth[free]) ** 2))
        elapsed = time.perf_counter() - t0
        ok = rms_e <= 1.25 * rms_k and elapsed < 120
        verdict(4, "embedding limit", ok,
                f"Ember RMS={rms_e:.4f}, kriging RMS={rms_k:.4f}, ratio={rms_e / rms_k:.3f} (limit 1.25), {elapsed:.1f}s")

    def test_c5_sampling_fidelity(self):
        g = GridGeometry(40, 40, 1)
        rng = np.random.default_rng(3)
        centers = g.cell_centers()
        sec = GridVolume(g, np.sin(centers[:, 0] / 6.0) + 0.3 * rng.standard_normal(g.n_cells), "s1")
        cells = np.sort(rng.choice(g.n_cells, 30, replace=False))
        truth = sec.values + 0.2 * rng.standard_normal(g.n_cells)
        s = SampleSet(centers[cells], truth[cells])
        model = train(s, assemble_features(s.coords, [sec]), ForestParams(n_trees=50, seed=1))
        env = build_envelope(model, s, [sec])
        spec = SamplingSpec(VariogramModel.isotropic("spherical", 1.0, 4.0), n_realizations=1000, seed=8,
                            gibbs_iterations=50)
        reals = simulate(model, env, s, spec, threads=4)
        values = np.stack([r.values for r in reals])
        dist = np.min(np.linalg.norm(centers[:, None, :] - centers[cells][None, :, :], axis=2), axis=1)
        probes = []
        for c in np.argsort(-dist, kind="stable"):
            if all(np.linalg.norm(centers[c] - centers[p]) > 4.0 for p in probes):
                probes.append(int(c))
            if len(probes) == 5:
                break
        ks = [ks_to_discrete(values[:, c], env.cdf(c).support, env.cdf(c).weights) for c in probes]
        free = np.setdiff1d(np.arange(g.n_cells), cells)
        in_support = all(np.all(np.isin(values[:, c], env.cdf(c).support)) for c in free)
        ok = max(ks) < 0.05 and in_support
        verdict(5, "sampling fidelity", ok,
                f"KS at 5 probes (min data distance {dist[probes].min():.1f} cells): "
                + ", ".join(f"{k:.3f}" for k in ks) + f"; values within local support={in_support}")

    def test_c6_conditioning(self):
        tb = generate_testbed(BenchConfig().testbed, 0)
        good = truth_variogram(tb.truth, "spherical", 0)
        emb = tuple(KrigingSpec("ordinary", good.scale_ranges(f), name=f"krige_{i}") for i, f in enumerate((1.0, 0.5)))
        model = train(tb.wells, assemble_features(tb.wells.coords, tb.secondary),
                      ForestParams(n_trees=100, seed=0, embedded=emb))
        env = build_envelope(model, tb.wells, tb.secondary)
        unit = VariogramModel.isotropic("spherical", 1.0, 6.0)
        reals = simulate(model, env, tb.wells, SamplingSpec(unit, n_realizations=5, seed=0), threads=4)
        cells = tb.truth.geometry.locate(tb.wells.coords)
        exact = all(np.array_equal(r.values[cells], tb.wells.values) for r in reals)

        iv = ConditioningInterval.from_uniform(0.0, 0.5)
        rng = np.random.default_rng(0)
        one = SamplingSpec(unit, gibbs_iterations=1)
        draws = [gibbs_truncated_gaussian([iv], [[0, 0, 0]], one, rng, precision=np.eye(1))[0] for _ in range(10_000)]
        gap = abs(np.mean(draws) + math.sqrt(2 / math.pi))
        verdict(6, "conditioning", exact and gap <= 0.02,
                f"5 realizations exact at {cells.size} well cells={exact}; Gibbs mean={np.mean(draws):.4f} "
                f"(target -0.7979, |gap|={gap:.4f})")

    def test_c7_correlation_recovery(self):
        g = GridGeometry(200, 200, 1)
        field = circulant_field_2d(200, 200, "spherical", 10.0, np.random.default_rng(5))[0]
        cells = np.sort(np.random.default_rng(6).choice(g.n_cells, 2500, replace=False))
        s = SampleSet(g.cell_centers(cells), field.ravel()[cells])
        n = g.n_cells
        env = Envelope(g, np.array([-1.0, 1.0]), np.arange(0, 2 * n + 1, 2), np.tile([0, 1], n),
                       np.full(2 * n, 0.5), np.ones(n, dtype=bool))
        series = residual_correlation(env, s, lag_width=2.0, n_lags=5)
        truth = VariogramModel.isotropic("spherical", 1.0, 10.0)
        expect = np.array([1.0 - model_gamma(truth, (d, 0, 0)) for d in series.distance])
        err = np.abs(series.rho - expect)
        ok = series.rho.size == 5 and bool(np.all(err <= 0.1))
        verdict(7, "correlation recovery", ok,
                "rho-truth at lags " + ", ".join(f"{d:.1f}:{e:+.3f}" for d, e in zip(series.distance, series.rho - expect)))

    def test_c8_robustness_pattern(self):
        t0 = time.perf_counter()
        res = run_bench(BenchConfig(), seed=0, threads=4)
        parts, ok = [], True
        for case in ("few", "many"):
            r = {m: res.lookup(case, "shoreface", m) for m in ("Ember", "Emb Short Vario", "Gaussian", "Gau Short Vario")}
            ember = r["Emb Short Vario"].var_sim_err / r["Ember"].var_sim_err
            gauss = r["Gau Short Vario"].var_sim_err / r["Gaussian"].var_sim_err
            same = all(
                res.lookup(case, z, "Ember").values()[:2] == res.lookup(case, z, "Emb Short Vario").values()[:2]
                for z in ("channel", "shoreface")
            )
            ok &= ember < gauss and same
            parts.append(f"{case}: Ember ratio {ember:.3f} vs Gaussian {gauss:.3f}, estimation columns equal={same}")
        elapsed = time.perf_counter() - t0
        ok &= elapsed < 900
        verdict(8, "robustness pattern", ok, "; ".join(parts) + f"; {elapsed:.0f}s")

    def test_c9_cli_determinism(self, tmp_path):
        (tmp_path / "tb.cfg").write_text(TESTBED_CFG)
        assert cli.main(["bench", "--config", str(tmp_path / "tb.cfg"), "--out-dir", str(tmp_path / "bench")]) == 0
        (tmp_path / "pipe.cfg").write_text(PIPELINE_CFG)
        for threads in (1, 4):
            out = tmp_path / f"t{threads}"
            for command in ("variogram", "estimate", "simulate", "baseline", "blindwell"):
                argv = [command, "--config", str(tmp_path / "pipe.cfg"), "--out-dir", str(out),
                        "--threads", str(threads), "--seed", "11"]
                assert cli.main(argv) == 0, command
        names = sorted(p.name for p in (tmp_path / "t1").iterdir())
        differ = [n for n in names if (tmp_path / "t1" / n).read_bytes() != (tmp_path / "t4" / n).read_bytes()]
        same_set = names == sorted(p.name for p in (tmp_path / "t4").iterdir())
        verdict(9, "determinism", same_set and not differ,
                f"{len(names)} files compared across threads 1 vs 4, differing: {differ or 'none'}")


TESTBED_CFG = """
[testbed]
nx = 12
ny = 12
nz = 4
layers_per_zone = 1
n_wells = 4
n_wells_many = 9
n_realizations = 2
n_trees = 20
write_files = true
"""

PIPELINE_CFG = """
[data]
samples = bench/wells_many.csv
secondary = bench/seis.grd, bench/noise.grd
blind_well = bench/blind_well.csv

[variogram]
lag_width = 1.0
n_lags = 5

[forest]
n_trees = 30

[embedded.krige]
variogram = bench/truth_variogram.var

[sampling]
variogram = infer
lag_width = 1.0
n_lags = 5
n_realizations = 3
gibbs_iterations = 30

[baseline]
variogram = bench/truth_variogram.var
n_realizations = 2

[output]
prob_above = 0.2
dump_envelope = true
"""
