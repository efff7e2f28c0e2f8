import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ember.data_model import GridGeometry, GridVolume, SampleSet, assemble_features
from ember.forest import ForestParams, train
from ember.kriging import KrigingSpec
from ember.variography import VariogramModel

settings.register_profile("ember", deadline=None, suppress_health_check=[HealthCheck.too_slow], max_examples=60)
settings.load_profile("ember")


@pytest.fixture(autouse=True)
def _quiet_numba():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", category=DeprecationWarning)
        yield


@pytest.fixture(scope="session")
def small_case():
    """A 12x12x2 grid with one informative secondary and 40 scattered samples."""
    g = GridGeometry(12, 12, 2)
    rng = np.random.default_rng(5)
    sec = GridVolume(g, rng.normal(size=g.n_cells), "s1")
    cells = np.sort(rng.choice(g.n_cells, 40, replace=False))
    xyz = g.cell_centers()
    truth = np.sin(xyz[:, 0] / 3.0) + 0.5 * sec.values + 0.1 * xyz[:, 2]
    samples = SampleSet(xyz[cells], truth[cells], [f"S{i}" for i in range(cells.size)])
    vm = VariogramModel.isotropic("spherical", 1.0, 6.0)
    params = ForestParams(n_trees=30, seed=11, embedded=(KrigingSpec("ordinary", vm, name="krige"),))
    model = train(samples, assemble_features(samples.coords, [sec], True), params)
    return {"geometry": g, "secondary": [sec], "cells": cells, "samples": samples, "model": model, "variogram": vm}
