"""Embedded-model quantile decision forest.

Each tree is grown on an in-bag subset whose feature rows are augmented with
leave-one-out kriging estimates computed over that subset only. At
prediction time the embedded columns are filled with full-data kriging, the
row is dropped down every tree, and each tree spreads weight ``1/|leaf|``
over the in-bag samples sharing its leaf. Averaging over trees gives the
weights of a conditional CDF over training targets.

Splits follow a randomized variance rule: for each of ``mtry`` candidate
variables one threshold is drawn uniformly between the node's min and max,
and the candidate with the smallest size-weighted child variance wins.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from . import __version__
from .data_model import FeatureMatrix, SampleSet, as_coords
from .errors import DataError
from .kriging import KrigingSpec, _Kriger, loo_estimates
from .variography import VariogramModel

MODEL_FORMAT = "ember-model/1"
_CUM_TOL = 1e-12


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    mtry: int | None = None
    min_node_size: int = 1
    subsample: float = 0.632
    bootstrap: bool = False
    seed: int = 0
    embedded: tuple[KrigingSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "embedded", tuple(self.embedded))
        if self.n_trees < 1:
            raise DataError("n_trees must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise DataError("mtry must be >= 1")
        if self.min_node_size < 1:
            raise DataError("min_node_size must be >= 1")
        if not 0 < self.subsample <= 1:
            raise DataError("subsample must lie in (0, 1]")
        names = [s.name for s in self.embedded]
        if len(set(names)) != len(names):
            raise DataError(f"embedded model names must be unique: {names}")

    def resolved_mtry(self, p_total: int) -> int:
        m = math.ceil(p_total / 3) if self.mtry is None else self.mtry
        if not 1 <= m <= p_total:
            raise DataError(f"mtry={m} outside [1, {p_total}]")
        return m


@dataclass
class Tree:
    """Array-encoded binary tree. ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_start: np.ndarray
    leaf_stop: np.ndarray
    leaf_samples: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node id reached by each row of ``X``."""
        X = np.atleast_2d(X)
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.full(X.shape[0], self.feature[0] >= 0)
        while active.any():
            a = np.flatnonzero(active)
            nd = node[a]
            f = self.feature[nd]
            go_left = X[a, f] < self.threshold[nd]
            node[a] = np.where(go_left, self.left[nd], self.right[nd])
            active[a] = self.feature[node[a]] >= 0
        return node

    def leaf_members(self, node: int) -> np.ndarray:
        return self.leaf_samples[self.leaf_start[node] : self.leaf_stop[node]]


def _grow_tree(X, z, sample_ids, mtry, min_node_size, rng) -> Tree:
    n, p = X.shape
    feature, threshold, left, right, leaf_start, leaf_stop = [], [], [], [], [], []
    leaf_samples: list[np.ndarray] = []
    filled = 0

    def new_node():
        for lst, v in ((feature, -1), (threshold, np.nan), (left, -1), (right, -1), (leaf_start, 0), (leaf_stop, 0)):
            lst.append(v)
        return len(feature) - 1

    def find_split(idx):
        zn = z[idx]
        m = idx.size
        for _attempt in range(2):
            best = None
            for v in rng.choice(p, size=mtry, replace=False):
                col = X[idx, v]
                lo, hi = col.min(), col.max()
                if lo == hi:
                    continue
                s = rng.uniform(lo, hi)
                mask = col < s
                nl = int(mask.sum())
                if nl < min_node_size or m - nl < min_node_size:
                    continue
                zl, zr = zn[mask], zn[~mask]
                score = zl.var() * nl + zr.var() * (m - nl)
                key = (score, int(v), float(s))
                if best is None or key < best:
                    best = key
            if best is not None:
                return best
        return None

    root = new_node()
    stack = [(root, np.arange(n))]
    while stack:
        node, idx = stack.pop()
        split = None
        if idx.size > min_node_size and np.ptp(z[idx]) > 0:
            split = find_split(idx)
        if split is None:
            leaf_start[node] = filled
            leaf_samples.append(sample_ids[idx])
            filled += idx.size
            leaf_stop[node] = filled
            continue
        _, v, s = split
        mask = X[idx, v] < s
        l_node, r_node = new_node(), new_node()
        feature[node], threshold[node], left[node], right[node] = v, s, l_node, r_node
        # right pushed first so the left subtree is grown (and numbered) first
        stack.append((r_node, idx[~mask]))
        stack.append((l_node, idx[mask]))
    return Tree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=float),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(leaf_start, dtype=np.int64),
        np.asarray(leaf_stop, dtype=np.int64),
        np.concatenate(leaf_samples).astype(np.int64),
    )


@dataclass
class EmberModel:
    params: ForestParams
    trees: list[Tree]
    inbag: list[np.ndarray]
    embedded_train: list[np.ndarray]
    samples: SampleSet
    base_names: tuple[str, ...]

    @property
    def embedded_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.params.embedded)

    @property
    def feature_names(self) -> tuple[str, ...]:
        return self.base_names + self.embedded_names

    @property
    def p_total(self) -> int:
        return len(self.feature_names)

    @property
    def targets(self) -> np.ndarray:
        return self.samples.values

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def save(self, path) -> None:
        save_model(self, path)

    @classmethod
    def load(cls, path) -> "EmberModel":
        return load_model(path)


def tree_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for item ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),)))


def _draw_inbag(n: int, params: ForestParams, rng) -> np.ndarray:
    if params.bootstrap:
        return np.sort(rng.integers(0, n, size=n))
    size = min(n, max(2, math.ceil(params.subsample * n)))
    return np.sort(rng.choice(n, size=size, replace=False))


def _train_tree(t, samples, base, params, mtry):
    rng = tree_rng(params.seed, t)
    inbag = _draw_inbag(len(samples), params, rng)
    coords, z = samples.coords[inbag], samples.values[inbag]
    emb = np.empty((inbag.size, len(params.embedded)))
    for j, spec in enumerate(params.embedded):
        emb[:, j] = loo_estimates(spec, coords, z)
    X = np.hstack([base[inbag], emb])
    tree = _grow_tree(X, z, inbag, mtry, params.min_node_size, rng)
    return tree, inbag, emb


def train(samples: SampleSet, features: FeatureMatrix, params: ForestParams, threads: int = 1) -> EmberModel:
    """Grow ``params.n_trees`` trees; output is independent of ``threads``."""
    n = len(samples)
    if n < 2:
        raise DataError("training needs at least 2 samples")
    if features.n_rows != n:
        raise DataError(f"feature rows ({features.n_rows}) do not match samples ({n})")
    clash = set(features.names) & {s.name for s in params.embedded}
    if clash:
        raise DataError(f"embedded model names collide with feature names: {sorted(clash)}")
    p_total = features.p_total + len(params.embedded)
    if p_total == 0:
        raise DataError("no features to train on")
    mtry = params.resolved_mtry(p_total)
    base = np.asarray(features.values)

    def job(t):
        return _train_tree(t, samples, base, params, mtry)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(job, range(params.n_trees)))
    else:
        results = [job(t) for t in range(params.n_trees)]
    trees, inbags, embs = (list(x) for x in zip(*results))
    return EmberModel(params, trees, inbags, embs, samples, tuple(features.names))


def predict_features_many(model: EmberModel, coords, base_rows, samples: SampleSet | None = None) -> np.ndarray:
    """Append full-data kriging estimates for every embedded spec."""
    base_rows = np.atleast_2d(np.asarray(base_rows, dtype=float))
    coords = as_coords(coords)
    if base_rows.shape[1] != len(model.base_names):
        raise DataError(f"expected {len(model.base_names)} base features, got {base_rows.shape[1]}")
    samples = model.samples if samples is None else samples
    cols = [base_rows]
    for spec in model.params.embedded:
        est, _, _, _ = _Kriger(spec, samples.coords, samples.values).solve(coords)
        cols.append(est[:, None])
    return np.hstack(cols)


def predict_features(model: EmberModel, samples: SampleSet, target, secondary_row) -> np.ndarray:
    """Feature row at ``target``: the secondary row followed by embedded predictions."""
    return predict_features_many(model, as_coords(target)[:1], secondary_row, samples)[0]


def tree_weights(model: EmberModel, tree_index: int, y) -> dict[int, float]:
    tree = model.trees[tree_index]
    y = np.asarray(y, dtype=float).reshape(1, -1)
    if y.shape[1] != model.p_total:
        raise DataError(f"feature row must have {model.p_total} entries")
    members = tree.leaf_members(int(tree.apply(y)[0]))
    out: dict[int, float] = {}
    w = 1.0 / members.size
    for i in members.tolist():
        out[i] = out.get(i, 0.0) + w
    return out


def forest_weights(model: EmberModel, Y) -> sparse.csr_matrix:
    """Row-stochastic sparse matrix (queries x training samples)."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if Y.shape[1] != model.p_total:
        raise DataError(f"feature rows must have {model.p_total} entries, got {Y.shape[1]}")
    m, k = Y.shape[0], model.n_trees
    rows, cols, vals = [], [], []
    for tree in model.trees:
        leaf = tree.apply(Y)
        start, stop = tree.leaf_start[leaf], tree.leaf_stop[leaf]
        c = stop - start
        total = int(c.sum())
        r = np.repeat(np.arange(m), c)
        within = np.arange(total) - np.repeat(np.cumsum(c) - c, c)
        rows.append(r)
        cols.append(tree.leaf_samples[np.repeat(start, c) + within])
        vals.append(np.repeat(1.0 / c, c))
    rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    # coalesce (row, col) duplicates summing in tree order, independent of batch size
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    first = np.ones(rows.size, dtype=bool)
    first[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
    starts = np.flatnonzero(first)
    summed = np.add.reduceat(vals, starts) / k
    return sparse.csr_matrix((summed, (rows[starts], cols[starts])), shape=(m, len(model.samples)))


@dataclass(frozen=True)
class ConditionalCDF:
    """Weighted empirical CDF, right-continuous: ``F(z) = sum w_i 1{z_i <= z}``."""

    support: np.ndarray
    weights: np.ndarray
    query: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        s = np.asarray(self.support, dtype=float).ravel()
        w = np.asarray(self.weights, dtype=float).ravel()
        if s.size == 0 or s.shape != w.shape:
            raise DataError("support and weights must be non-empty and of equal length")
        if np.any(np.diff(s) <= 0):
            raise DataError("support must be sorted ascending and distinct")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise DataError("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "support", s)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_samples(cls, values, weights, query=None) -> "ConditionalCDF":
        """Aggregate weights of equal values and sort."""
        values = np.asarray(values, dtype=float)
        weights = np.asarray(weights, dtype=float)
        keep = weights > 0
        uniq, inv = np.unique(values[keep], return_inverse=True)
        w = np.bincount(inv.ravel(), weights=weights[keep], minlength=uniq.size)
        return cls(uniq, w, query)

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.weights)

    def __call__(self, z) -> np.ndarray | float:
        idx = np.searchsorted(self.support, z, side="right")
        cum = np.concatenate([[0.0], self.cumulative])
        out = np.minimum(cum[idx], 1.0)
        return float(out) if np.ndim(out) == 0 else out

    def left_limit(self, z) -> np.ndarray | float:
        """``F(z-) = sum w_i 1{z_i < z}`` (the strict-inequality form)."""
        idx = np.searchsorted(self.support, z, side="left")
        cum = np.concatenate([[0.0], self.cumulative])
        out = np.minimum(cum[idx], 1.0)
        return float(out) if np.ndim(out) == 0 else out

    def mean(self) -> float:
        return float(np.dot(self.weights, self.support))

    def std(self) -> float:
        mu = self.mean()
        return float(math.sqrt(max(np.dot(self.weights, (self.support - mu) ** 2), 0.0)))

    def quantile(self, p: float) -> float:
        return cdf_quantile(self, p)

    def interval_prob(self, a: float, b: float) -> float:
        return cdf_interval_prob(self, a, b)


def conditional_cdf(model: EmberModel, y) -> ConditionalCDF:
    y = np.asarray(y, dtype=float).reshape(1, -1)
    w = forest_weights(model, y)
    return ConditionalCDF.from_samples(model.targets[w.indices], w.data, query=y[0])


def cdf_mean(cdf: ConditionalCDF) -> float:
    return cdf.mean()


def quantile_index(cum: np.ndarray, p) -> np.ndarray:
    """Index of the smallest atom whose cumulative weight reaches ``p``."""
    idx = np.searchsorted(cum, np.asarray(p) - _CUM_TOL, side="left")
    return np.minimum(idx, cum.size - 1)


def cdf_quantile(cdf: ConditionalCDF, p: float) -> float:
    if not 0.0 < p < 1.0:
        raise DataError(f"quantile level must lie in (0, 1), got {p}")
    return float(cdf.support[quantile_index(cdf.cumulative, p)])


def cdf_interval_prob(cdf: ConditionalCDF, a: float, b: float) -> float:
    """``P(a <= Z <= b)``, both endpoints inclusive."""
    if a > b:
        raise DataError(f"interval lower bound {a} exceeds upper bound {b}")
    inside = (cdf.support >= a) & (cdf.support <= b)
    return float(min(cdf.weights[inside].sum(), 1.0))


# -- serialization ----------------------------------------------------------

def _write_array(zf: zipfile.ZipFile, name: str, arr: np.ndarray) -> None:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, buf.getvalue())


def _spec_to_dict(spec: KrigingSpec) -> dict:
    return {
        "name": spec.name,
        "kind": spec.kind,
        "mean": None if spec.mean is None else float(spec.mean),
        "max_neighbors": None if spec.max_neighbors is None else int(spec.max_neighbors),
        "max_radius": None if math.isinf(spec.max_radius) else float(spec.max_radius),
        "variogram": spec.variogram.to_text(),
    }


def _spec_from_dict(d: dict) -> KrigingSpec:
    return KrigingSpec(
        kind=d["kind"],
        variogram=VariogramModel.from_text(d["variogram"]),
        mean=d["mean"],
        max_neighbors=d["max_neighbors"],
        max_radius=math.inf if d["max_radius"] is None else d["max_radius"],
        name=d["name"],
    )


def save_model(model: EmberModel, path) -> None:
    """Deterministic zip container of ``.npy`` arrays plus a JSON header."""
    p = model.params
    header = {
        "format": MODEL_FORMAT,
        "package_version": __version__,
        "params": {
            "n_trees": p.n_trees,
            "mtry": p.mtry,
            "min_node_size": p.min_node_size,
            "subsample": p.subsample,
            "bootstrap": p.bootstrap,
            "seed": p.seed,
            "embedded": [_spec_to_dict(s) for s in p.embedded],
        },
        "base_names": list(model.base_names),
        "wells": list(model.samples.wells),
    }
    fields = ("feature", "threshold", "left", "right", "leaf_start", "leaf_stop")
    node_off = np.cumsum([0] + [t.n_nodes for t in model.trees])
    leaf_off = np.cumsum([0] + [t.leaf_samples.size for t in model.trees])
    inbag_off = np.cumsum([0] + [b.size for b in model.inbag])
    with zipfile.ZipFile(path, "w") as zf:
        info = zipfile.ZipInfo("header.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(header, indent=1, sort_keys=True))
        _write_array(zf, "coords", model.samples.coords)
        _write_array(zf, "values", model.samples.values)
        _write_array(zf, "node_offsets", node_off)
        _write_array(zf, "leaf_offsets", leaf_off)
        _write_array(zf, "inbag_offsets", inbag_off)
        for f in fields:
            _write_array(zf, f, np.concatenate([getattr(t, f) for t in model.trees]))
        _write_array(zf, "leaf_samples", np.concatenate([t.leaf_samples for t in model.trees]))
        _write_array(zf, "inbag", np.concatenate(model.inbag))
        _write_array(zf, "embedded_train", np.concatenate(model.embedded_train, axis=0))


def load_model(path) -> EmberModel:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"model file not found: {path}")
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile:
        raise DataError(f"{path}: not an ember model file") from None
    with zf:
        header = json.loads(zf.read("header.json"))
        if header.get("format") != MODEL_FORMAT:
            raise DataError(f"{path}: unsupported model format {header.get('format')!r}")
        arrays = {
            n[:-4]: np.lib.format.read_array(io.BytesIO(zf.read(n)), allow_pickle=False)
            for n in zf.namelist()
            if n.endswith(".npy")
        }
    hp = header["params"]
    params = ForestParams(
        n_trees=hp["n_trees"],
        mtry=hp["mtry"],
        min_node_size=hp["min_node_size"],
        subsample=hp["subsample"],
        bootstrap=hp["bootstrap"],
        seed=hp["seed"],
        embedded=tuple(_spec_from_dict(d) for d in hp["embedded"]),
    )
    samples = SampleSet(arrays["coords"], arrays["values"], header["wells"])
    no, lo, io_ = arrays["node_offsets"], arrays["leaf_offsets"], arrays["inbag_offsets"]
    trees, inbag, emb = [], [], []
    for t in range(len(no) - 1):
        sl = slice(no[t], no[t + 1])
        trees.append(
            Tree(
                arrays["feature"][sl],
                arrays["threshold"][sl],
                arrays["left"][sl],
                arrays["right"][sl],
                arrays["leaf_start"][sl],
                arrays["leaf_stop"][sl],
                arrays["leaf_samples"][lo[t] : lo[t + 1]],
            )
        )
        inbag.append(arrays["inbag"][io_[t] : io_[t + 1]])
        emb.append(arrays["embedded_train"][io_[t] : io_[t + 1]])
    return EmberModel(params, trees, inbag, emb, samples, tuple(header["base_names"]))
