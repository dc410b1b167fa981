import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cecfair.autodiff import ContractError
from cecfair.data import Dataset, FeatureSchema, SyntheticConfig, generate_synthetic, standardize, train_test_split
from cecfair.kdtree import KDTree
from cecfair.matcher import (
    UNMATCHED,
    MatchWarning,
    build_index,
    compute_baselines,
    match,
    pair,
    read_baselines_json,
    read_map_csv,
    write_baselines_json,
    write_map_csv,
)


def make(X_fin, y, a, extra=None):
    X_fin = np.asarray(X_fin, float)
    k = X_fin.shape[1]
    cols = [X_fin] + ([np.asarray(extra, float)] if extra is not None else [])
    ne = 0 if extra is None else np.asarray(extra).shape[1]
    names = tuple(f"f{j}" for j in range(k)) + tuple(f"e{j}" for j in range(ne)) + ("a",)
    schema = FeatureSchema(names, tuple(range(k)), k + ne, "y")
    X = np.column_stack(cols + [np.asarray(a, float)])
    return Dataset(X, np.asarray(y), schema)


def brute_force(train, query):
    """O(n^2) linear scan; lowest row id wins ties."""
    fin = list(train.schema.financial_idx)
    F = train.X[:, fin]
    mu, sd = F.mean(0), F.std(0)
    Fz = (F - mu) / sd
    Q = (query.X[:, fin] - mu) / sd
    out_id, out_d = [], []
    for i in range(query.n):
        cand = np.flatnonzero((train.y == query.y[i]) & (train.a != query.a[i]))
        if cand.size == 0:
            out_id.append(UNMATCHED)
            out_d.append(np.nan)
            continue
        cand = cand[np.argsort(train.row_ids[cand], kind="stable")]
        d = np.sqrt(((Fz[cand] - Q[i]) ** 2).sum(1))
        k = int(np.argmin(d))
        out_id.append(int(train.row_ids[cand[k]]))
        out_d.append(float(d[k]))
    return np.array(out_id), np.array(out_d)


def random_ds(seed, n=200, k=3):
    r = np.random.default_rng(seed)
    return make(r.normal(size=(n, k)), r.integers(0, 2, n), r.integers(0, 2, n), r.normal(size=(n, 2)))


# ------------------------------------------------------------ KD-tree


def test_kdtree_exact_against_scan():
    r = np.random.default_rng(0)
    P = r.normal(size=(300, 4))
    tree = KDTree(P, leafsize=5)
    for q in r.normal(size=(50, 4)):
        d = np.sqrt(((P - q) ** 2).sum(1))
        j, dist = tree.query(q)
        assert j == int(np.argmin(d))
        assert abs(dist - d.min()) < 1e-12


def test_kdtree_ties_lowest_index():
    P = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0], [1.0, 0.0]])
    for leafsize in (1, 2, 16):
        j, dist = KDTree(P, leafsize).query(np.zeros(2))
        assert j == 0 and dist == 1.0


def test_kdtree_node_count_equals_size():
    P = np.random.default_rng(1).normal(size=(77, 3))
    t = KDTree(P, leafsize=4)
    assert t.size == 77 and t.count_points() == 77


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 60), leaf=st.integers(1, 8))
def test_kdtree_property_duplicates(seed, n, leaf):
    # small integer grid forces many exact ties
    r = np.random.default_rng(seed)
    P = r.integers(-2, 3, size=(n, 2)).astype(float)
    q = r.integers(-2, 3, size=2).astype(float)
    d = np.sqrt(((P - q) ** 2).sum(1))
    j, dist = KDTree(P, leaf).query(q)
    assert j == int(np.argmin(d)) and dist == d.min()


# ------------------------------------------------------------ build_index


def test_eight_rows_four_trees_of_two():
    y = [0, 0, 0, 0, 1, 1, 1, 1]
    a = [0, 0, 1, 1, 0, 0, 1, 1]
    idx = build_index(make(np.arange(16.0).reshape(8, 2) ** 1.5, y, a))
    assert sorted(c.size for c in idx.cells.values()) == [2, 2, 2, 2]
    assert all(c.tree.count_points() == 2 for c in idx.cells.values())


def test_missing_group_warns_and_unmatched():
    ds = make([[0.0], [1.0], [2.0], [3.0]], [0, 1, 0, 1], [0, 0, 0, 0])
    with pytest.warns(MatchWarning):
        idx = build_index(ds)
    assert set(idx.empty_cells) == {(0, 1), (1, 1)}
    cmap = match(idx, ds)
    assert (cmap.matched_ids == UNMATCHED).all()


def test_all_cells_empty_is_error():
    ds = make(np.zeros((0, 1)), np.zeros(0, int), np.zeros(0))
    with pytest.raises(ValueError):
        build_index(ds)


def test_partition_on_default_synthetic():
    ds = generate_synthetic(SyntheticConfig())
    idx = build_index(ds)
    ids = np.concatenate([c.row_ids for c in idx.cells.values()])
    assert ids.size == 10000 and np.unique(ids).size == 10000


# ------------------------------------------------------------ match


def test_identical_row_distance_zero():
    ds = make([[0.0, 1.0], [5.0, 2.0], [0.0, 1.0], [3.0, 3.0]], [1, 1, 1, 0], [0, 1, 1, 1])
    cmap = match(build_index(ds), ds)
    assert cmap.matched_ids[0] == 2 and cmap.distances[0] == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_matches_equal_brute_force(seed):
    ds = random_ds(seed)
    cmap = match(build_index(ds), ds)
    ids, d = brute_force(ds, ds)
    np.testing.assert_array_equal(cmap.matched_ids, ids)
    np.testing.assert_allclose(cmap.distances, d, rtol=0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(4, 120))
def test_oracle_equivalence_with_ties(seed, n):
    r = np.random.default_rng(seed)
    ds = make(r.integers(0, 3, size=(n, 2)).astype(float) + r.integers(0, 2, (n, 1)) * np.array([0.0, 0.5]),
              r.integers(0, 2, n), r.integers(0, 2, n))
    F = ds.X[:, :2]
    if np.any(F.std(0) == 0):
        return
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MatchWarning)
        try:
            idx = build_index(ds)
        except ValueError:
            return
        cmap = match(idx, ds)
    ids, _ = brute_force(ds, ds)
    np.testing.assert_array_equal(cmap.matched_ids, ids)


def test_train_pool_test_queries():
    ds = standardize(train_test_split(random_ds(3, n=300), 0.2, seed=1))
    tr, te = ds.train(), ds.test()
    cmap = match(build_index(tr), te)
    ids, _ = brute_force(tr, te)
    np.testing.assert_array_equal(cmap.matched_ids, ids)
    assert np.isin(cmap.matched_ids, tr.row_ids).all()


def test_stratification_and_real_rows():
    ds = random_ds(11, n=400)
    idx = build_index(ds)
    cmap = match(idx, ds)
    m = cmap.matched
    j = cmap.matched_ids[m]
    assert (ds.y[j] == ds.y[m]).all()
    assert (ds.a[j] == 1 - ds.a[m]).all()
    np.testing.assert_array_equal(cmap.x_cf[m], ds.X[j])
    assert (cmap.distances[m] >= 0).all()


def test_tau_dist_tiny_gives_no_coverage():
    ds = random_ds(4)
    with pytest.warns(MatchWarning):
        cmap = match(build_index(ds), ds, tau_dist=1e-9)
    assert cmap.coverage == 0.0


def test_tau_dist_bound_respected():
    ds = random_ds(5)
    cmap = match(build_index(ds), ds, tau_dist=0.9)
    assert (cmap.distances[cmap.matched] <= 0.9).all()
    assert 0 < cmap.coverage < 1


# ------------------------------------------------------------ baselines and pairs


def test_baseline_mean_of_two_rows():
    ds = make([[0.0], [2.0], [7.0], [9.0]], [0, 0, 1, 1], [0, 0, 1, 1], extra=[[0.0], [2.0], [1.0], [1.0]])
    bl = compute_baselines(ds)
    np.testing.assert_array_equal(bl.get(0, 0), [1.0, 1.0, 0.0])
    assert (0, 1) not in bl.baselines
    with pytest.raises(ContractError):
        bl.get(0, 1)


def test_single_row_cell_baseline_equals_row():
    ds = make([[0.0], [2.0], [7.0], [9.0]], [0, 0, 1, 1], [0, 1, 1, 1])
    np.testing.assert_array_equal(compute_baselines(ds).get(0, 1), ds.X[1])


def test_baselines_exact_means_random():
    ds = random_ds(8)
    bl = compute_baselines(ds)
    for (y, a), b in bl.baselines.items():
        rows = ds.X[(ds.y == y) & (ds.a == a)]
        assert np.max(np.abs(b - rows.sum(0) / rows.shape[0])) <= 1e-12


def test_synthetic_baselines_proxy_gap():
    ds = generate_synthetic(SyntheticConfig(seed=2))
    bl = compute_baselines(ds)
    px = list(ds.schema.excluded_proxies)
    for y in (0, 1):
        np.testing.assert_allclose(bl.get(y, 1)[px] - bl.get(y, 0)[px], 0.5, atol=0.12)


def test_pair_all_matched_and_factual_baseline():
    ds = random_ds(6)
    bl = compute_baselines(ds)
    pairs = pair(ds, match(build_index(ds), ds), bl)
    assert len(pairs) == ds.n and pairs.n_unmatched == 0
    for i in np.flatnonzero((pairs.y == 1) & (pairs.a == 0))[:5]:
        np.testing.assert_array_equal(pairs.baseline[i], bl.get(1, 0))
        assert pairs.x_cf[i, -1] == 1.0


def test_pair_excludes_unmatched():
    ds = random_ds(7)
    cmap = match(build_index(ds), ds, tau_dist=0.9)
    pairs = pair(ds, cmap, compute_baselines(ds))
    assert len(pairs) == int(cmap.matched.sum())
    assert pairs.n_unmatched == cmap.n_unmatched > 0


def test_map_and_baseline_export_round_trip(tmp_path):
    ds = random_ds(9)
    idx = build_index(ds)
    cmap = match(idx, ds, tau_dist=0.9)
    write_map_csv(cmap, tmp_path / "m.csv")
    text = (tmp_path / "m.csv").read_text().splitlines()
    assert text[0] == "row_id,matched_row_id,distance"
    assert any(",UNMATCHED," in line for line in text)
    back = read_map_csv(tmp_path / "m.csv", idx, 0.9)
    np.testing.assert_array_equal(back.matched_ids, cmap.matched_ids)
    np.testing.assert_array_equal(back.distances[cmap.matched], cmap.distances[cmap.matched])
    np.testing.assert_array_equal(back.x_cf[cmap.matched], cmap.x_cf[cmap.matched])
    bl = compute_baselines(ds)
    write_baselines_json(bl, tmp_path / "b.json")
    bl2 = read_baselines_json(tmp_path / "b.json")
    for k in bl.baselines:
        np.testing.assert_array_equal(bl2.get(*k), bl.get(*k))
