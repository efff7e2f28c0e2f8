import numpy as np
import pytest

from ember.data_model import (
    MISSING,
    FeatureMatrix,
    GridGeometry,
    GridVolume,
    Location,
    SampleSet,
    as_coords,
    assemble_features,
    load_grid,
    load_samples,
    write_grid,
    write_samples,
)
from ember.errors import DataError


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestLoadSamples:
    def test_two_rows(self, tmp_path):
        p = write(tmp_path, "s.csv", "x,y,z,value,well\n0,0,0,1.0,W1\n10,0,0,2.0,W1\n")
        s = load_samples(p)
        assert len(s) == 2
        assert s.values.tolist() == [1.0, 2.0]
        assert s.wells == ("W1", "W1")

    def test_header_only(self, tmp_path):
        p = write(tmp_path, "s.csv", "x,y,z,value,well\n")
        with pytest.raises(DataError, match="no data rows"):
            load_samples(p)

    def test_duplicate_cites_row(self, tmp_path):
        p = write(tmp_path, "s.csv", "x,y,z,value,well\n0,0,0,1,W\n0,0,0,2,W\n")
        with pytest.raises(DataError, match="row 3"):
            load_samples(p)

    def test_non_numeric(self, tmp_path):
        p = write(tmp_path, "s.csv", "x,y,z,value,well\n0,a,0,1,W\n")
        with pytest.raises(DataError, match="row 2"):
            load_samples(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_samples(tmp_path / "nope.csv")

    def test_bad_header(self, tmp_path):
        p = write(tmp_path, "s.csv", "x,y,value\n0,0,1\n")
        with pytest.raises(DataError, match="header"):
            load_samples(p)

    def test_round_trip(self, tmp_path):
        s = SampleSet([[0.1, 2.0, 3.0], [1 / 3, 0, 0]], [0.123456789, -2.5], ["A", "B"])
        write_samples(s, tmp_path / "o.csv")
        back = load_samples(tmp_path / "o.csv")
        assert np.array_equal(back.coords, s.coords)
        assert np.array_equal(back.values, s.values)
        assert back.wells == s.wells


class TestSampleSet:
    def test_rejects_duplicates(self):
        with pytest.raises(DataError, match="duplicate"):
            SampleSet([[0, 0, 0], [0, 0, 0]], [1, 2])

    def test_rejects_non_finite(self):
        with pytest.raises(DataError):
            SampleSet([[0, 0, 0]], [np.nan])

    def test_immutable(self):
        s = SampleSet([[0, 0, 0]], [1.0])
        with pytest.raises(ValueError):
            s.values[0] = 3.0

    def test_location_validation(self):
        with pytest.raises(DataError):
            Location(np.inf, 0, 0)


class TestGrid:
    def test_load_two_cells(self, tmp_path):
        p = write(tmp_path, "g.grd", "t\n2 1 1 0 0 0 1 1 1\n1 poro\n5.0\n7.0\n")
        g = load_grid(p)
        assert g.cell(0, 0, 0) == 5.0
        assert g.cell(1, 0, 0) == 7.0
        assert g.name == "poro"

    def test_name_on_own_line(self, tmp_path):
        p = write(tmp_path, "g.grd", "t\n2 1 1 0 0 0 1 1 1\n1\nporo\n5.0\n7.0\n")
        assert load_grid(p).name == "poro"

    def test_count_mismatch(self, tmp_path):
        p = write(tmp_path, "g.grd", "t\n2 2 1 0 0 0 1 1 1\n1 v\n1\n2\n3\n")
        with pytest.raises(DataError, match="count mismatch"):
            load_grid(p)

    def test_missing_sentinel(self, tmp_path):
        p = write(tmp_path, "g.grd", "t\n2 1 1 0 0 0 1 1 1\n1 v\n-999.0\n7.0\n")
        assert load_grid(p).missing.tolist() == [True, False]

    @pytest.mark.parametrize("dims", ["0 1 1 0 0 0 1 1 1", "1 1 1 0 0 0 1 0 1", "1 1 1 0 0 0 1 -2 1"])
    def test_bad_geometry(self, tmp_path, dims):
        p = write(tmp_path, "g.grd", f"t\n{dims}\n1 v\n1\n")
        with pytest.raises(DataError):
            load_grid(p)

    def test_two_variables_rejected(self, tmp_path):
        p = write(tmp_path, "g.grd", "t\n1 1 1 0 0 0 1 1 1\n2 a b\n1\n")
        with pytest.raises(DataError, match="1 variable"):
            load_grid(p)

    def test_round_trip_exact(self, tmp_path):
        geom = GridGeometry(3, 2, 2, (10.0, 20.0, 5.0), (2.0, 2.5, 0.5))
        vals = np.random.default_rng(0).normal(size=geom.n_cells)
        vals[3] = MISSING
        grid = GridVolume(geom, vals, "phi")
        write_grid(grid, tmp_path / "a.grd")
        back = load_grid(tmp_path / "a.grd")
        assert back.geometry == geom
        assert np.array_equal(back.values, grid.values)
        write_grid(back, tmp_path / "b.grd")
        assert (tmp_path / "a.grd").read_bytes() == (tmp_path / "b.grd").read_bytes()

    def test_x_fastest_order(self):
        geom = GridGeometry(3, 2, 2)
        grid = GridVolume(geom, np.arange(12.0))
        assert grid.cell(1, 0, 0) == 1.0
        assert grid.cell(0, 1, 0) == 3.0
        assert grid.cell(0, 0, 1) == 6.0
        assert grid.as_array()[1, 1, 2] == 11.0

    def test_locate_snaps_and_bounds(self):
        geom = GridGeometry(4, 4, 1, (0.5, 0.5, 0.0))
        assert geom.locate([[0.9, 0.2, 0.1]]).tolist() == [0]
        assert geom.locate([[10.0, 0.0, 0.0]], strict=False).tolist() == [-1]
        with pytest.raises(DataError, match="outside"):
            geom.locate([[10.0, 0.0, 0.0]])


class TestFeatures:
    def setup_method(self):
        self.geom = GridGeometry(3, 3, 1)
        self.a = GridVolume(self.geom, np.arange(9.0), "a")
        self.b = GridVolume(self.geom, 10 + np.arange(9.0), "b")

    def test_row_length_and_order(self):
        fm = assemble_features([Location(1, 2, 0)], [self.a, self.b], include_coords=True)
        assert fm.names == ("a", "b", "x", "y", "z")
        assert fm.values.tolist() == [[7.0, 17.0, 1.0, 2.0, 0.0]]

    def test_without_coords(self):
        fm = assemble_features(np.array([[0, 0, 0], [2, 2, 0]]), [self.b], include_coords=False)
        assert fm.values[:, 0].tolist() == [10.0, 18.0]

    def test_outside_grid(self):
        with pytest.raises(DataError, match="outside"):
            assemble_features([[5.0, 0, 0]], [self.a])

    def test_missing_value(self):
        vals = self.a.values.copy()
        vals[0] = MISSING
        with pytest.raises(DataError, match="missing"):
            assemble_features([[0.0, 0, 0]], [self.a.with_values(vals)])

    def test_deterministic(self):
        pts = np.random.default_rng(1).uniform(0, 2, size=(10, 3)) * [1, 1, 0]
        f1 = assemble_features(pts, [self.a, self.b])
        f2 = assemble_features(pts, [self.a, self.b])
        assert np.array_equal(f1.values, f2.values)

    def test_geometry_mismatch(self):
        other = GridVolume(GridGeometry(2, 2, 1), np.zeros(4), "c")
        with pytest.raises(DataError, match="geometry"):
            assemble_features([[0.0, 0, 0]], [self.a, other])

    def test_feature_matrix_unique_names(self):
        with pytest.raises(DataError, match="unique"):
            FeatureMatrix(np.zeros((1, 2)), ("a", "a"))

    def test_as_coords_accepts_many_forms(self):
        s = SampleSet([[1, 2, 3]], [0.0])
        for form in (s, [Location(1, 2, 3)], Location(1, 2, 3), np.array([1.0, 2, 3])):
            assert as_coords(form).tolist() == [[1.0, 2.0, 3.0]]
