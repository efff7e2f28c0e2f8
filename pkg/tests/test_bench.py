import math
import warnings

import numpy as np
import pytest

from ember.bench import (
    METHODS,
    ZONE_CODES,
    BenchConfig,
    TestbedSpec,
    blind_well_column,
    blind_well_report,
    error_metrics,
    error_spread,
    generate_testbed,
    place_wells,
    truth_variogram,
    well_samples,
    zone_cells,
)
from ember.data_model import GridGeometry, GridVolume, SampleSet, assemble_features
from ember.envelope import Envelope, build_envelope
from ember.errors import ConvergenceWarning, DataError
from ember.forest import ConditionalCDF, ForestParams, train
from ember.kriging import KrigingSpec

SPEC = TestbedSpec()


@pytest.fixture(scope="module")
def testbed():
    return generate_testbed(SPEC, 7)


def ember_envelope(spec, seed, n_wells):
    base = generate_testbed(spec, seed, n_wells=n_wells)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        good = truth_variogram(base.truth, "spherical", seed)
    emb = tuple(KrigingSpec("ordinary", good.scale_ranges(f), name=f"krige_{i}") for i, f in enumerate((1.0, 0.5)))
    feats = assemble_features(base.wells.coords, base.secondary, include_coords=True)
    model = train(base.wells, feats, ForestParams(n_trees=100, seed=seed, embedded=emb))
    return base, build_envelope(model, base.wells, base.secondary)


class TestTestbed:
    def test_deterministic(self, testbed):
        again = generate_testbed(SPEC, 7)
        assert np.array_equal(again.truth.values, testbed.truth.values)
        for a, b in zip(again.secondary, testbed.secondary):
            assert np.array_equal(a.values, b.values)
        assert np.array_equal(again.wells.coords, testbed.wells.coords)

    def test_seed_matters(self, testbed):
        assert not np.array_equal(generate_testbed(SPEC, 8).truth.values, testbed.truth.values)

    def test_zones_partition(self, testbed):
        codes = set(ZONE_CODES.values())
        assert set(np.unique(testbed.zones.values)) == codes
        total = sum(zone_cells(testbed.zones, k).size for k in ZONE_CODES)
        assert total == testbed.truth.geometry.n_cells

    def test_layers_alternate(self):
        kinds = SPEC.layer_kinds()
        assert kinds[:4] == ["shoreface", "shoreface", "channel", "channel"]

    def test_secondary_correlations(self, testbed):
        seis, noise = testbed.secondary
        assert seis.name == "seis" and noise.name == "noise"
        assert np.corrcoef(seis.values, testbed.channel.astype(float))[0, 1] > 0.4
        assert abs(np.corrcoef(noise.values, testbed.truth.values)[0, 1]) < 0.1

    def test_porosity_bounds(self, testbed):
        assert testbed.truth.values.min() >= 0.0 and testbed.truth.values.max() <= 0.35

    def test_channels_carry_high_porosity(self, testbed):
        v = testbed.truth.values
        assert v[testbed.channel].mean() > v[~testbed.channel & (testbed.zones.values == 1.0)].mean() + 0.1

    def test_wells_are_full_columns_of_truth(self, testbed):
        g = testbed.truth.geometry
        cells = g.locate(testbed.wells.coords)
        assert len(testbed.wells) == SPEC.n_wells * SPEC.nz
        assert np.array_equal(testbed.wells.values, testbed.truth.values[cells])

    def test_well_counts(self):
        for n in (SPEC.n_wells, SPEC.n_wells_many):
            cols = place_wells(SPEC, n, 3)
            assert len({tuple(c) for c in cols.tolist()}) == n

    def test_blind_well_avoids_wells(self):
        col = tuple(blind_well_column(SPEC, 7)[0].tolist())
        for n in (SPEC.n_wells, SPEC.n_wells_many):
            assert col not in {tuple(c) for c in place_wells(SPEC, n, 7).tolist()}

    @pytest.mark.parametrize("kw", [{"nx": 0}, {"poro_in": 0.5}, {"nz": 2, "layers_per_zone": 2}, {"first_zone": "delta"}])
    def test_validation(self, kw):
        with pytest.raises(DataError):
            TestbedSpec(**kw)


class TestMetrics:
    g = GridGeometry(4, 1, 1)
    zones = GridVolume(g, np.full(4, ZONE_CODES["channel"]))

    def grid(self, v):
        return GridVolume(self.g, np.asarray(v, dtype=float))

    def test_perfect_estimator(self):
        t = self.grid([0.1, 0.2, 0.3, 0.4])
        r = error_metrics(t, t, [t, t], self.zones, "channel")
        assert r.values() == (0.0, 0.0, 0.0, 0.0)

    def test_population_variance(self):
        var, _ = error_spread(np.array([-1.0, 1.0]))
        assert var == 1.0

    def test_iqr_example(self):
        _, iqr = error_spread(np.array([1.0, 2.0, 3.0, 4.0]))
        assert iqr == 1.5

    def test_sim_columns_average_realizations(self):
        t = self.grid([0, 0, 0, 0])
        r1, r2 = self.grid([-1, 1, -1, 1]), self.grid([-2, 2, -2, 2])
        rep = error_metrics(t, t, [r1, r2], self.zones, "channel")
        assert rep.var_sim_err == pytest.approx((1.0 + 4.0) / 2)

    def test_wells_excluded(self):
        t = self.grid([0, 0, 0, 0])
        est = self.grid([100, 1, -1, 1])
        rep = error_metrics(t, est, [], self.zones, "channel", exclude_cells=[0])
        assert rep.var_error == pytest.approx(np.var([1, -1, 1]))
        assert math.isnan(rep.var_sim_err)

    def test_empty_zone(self):
        t = self.grid([0, 0, 0, 0])
        with pytest.raises(DataError):
            error_metrics(t, t, [], self.zones, "shoreface")

    def test_nonnegative(self, testbed):
        est = GridVolume(testbed.truth.geometry, np.full(testbed.truth.geometry.n_cells, 0.15))
        for zone in ZONE_CODES:
            rep = error_metrics(testbed.truth, est, [testbed.truth], testbed.zones, zone)
            assert all(v >= 0 for v in rep.values())


class TestBlindWell:
    def test_point_mass_full_coverage(self):
        g = GridGeometry(1, 1, 3)
        z = np.array([0.1, 0.2, 0.3])
        env = Envelope.from_cdfs(g, [ConditionalCDF(np.array([v]), np.array([1.0])) for v in z])
        rep = blind_well_report(env, SampleSet(g.cell_centers(), z), thresholds=(-1.0,))
        assert rep.coverage == 1.0
        assert all(r["p90"] - r["p10"] == 0.0 for r in rep.rows)
        assert all(r["prob_above_-1"] == 1.0 for r in rep.rows)

    def test_outside_grid(self):
        g = GridGeometry(1, 1, 1)
        env = Envelope.from_cdfs(g, [ConditionalCDF(np.array([0.0]), np.array([1.0]))])
        with pytest.raises(DataError):
            blind_well_report(env, SampleSet([[5.0, 0, 0]], [0.0]))

    def test_csv_layout(self, tmp_path):
        g = GridGeometry(1, 1, 2)
        env = Envelope.from_cdfs(g, [ConditionalCDF(np.array([0.1, 0.3]), np.array([0.5, 0.5]))] * 2)
        rep = blind_well_report(env, SampleSet(g.cell_centers(), [0.1, 0.5]), thresholds=(0.2,))
        rep.to_csv(tmp_path / "b.csv")
        lines = (tmp_path / "b.csv").read_text().splitlines()
        assert lines[0] == "x,y,z,cell_index,truth,p10,p50,p90,prob_above_0.2"
        assert lines[-1] == "coverage_p10_p90,0.5"

    def test_testbed_blind_well_coverage(self):
        base, env = ember_envelope(SPEC, 0, SPEC.n_wells)
        bw = well_samples(base.truth, blind_well_column(SPEC, 0))
        assert 0.6 <= blind_well_report(env, bw, (0.15,)).coverage <= 0.95

    def test_testbed_coverage_over_all_columns(self):
        base, env = ember_envelope(SPEC, 1, SPEC.n_wells)
        free = np.setdiff1d(np.arange(env.n_cells), env.geometry.locate(base.wells.coords))
        t = base.truth.values[free]
        inside = (t >= env.quantile(0.1)[free]) & (t <= env.quantile(0.9)[free])
        assert 0.6 <= inside.mean() <= 0.95


class TestBenchConfig:
    def test_methods_order(self):
        assert METHODS == ("Ember", "Emb Short Vario", "Gaussian", "Gau Short Vario")

    def test_srf_source_validated(self):
        with pytest.raises(DataError):
            BenchConfig(srf_source="nope")
