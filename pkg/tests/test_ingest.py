import datetime as dt
import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from fgforecast.ingest import (
    CBG_HEADER,
    DailySeries,
    DataError,
    MobilityLog,
    build_window_adjacency,
    build_windows,
    community_level,
    fit_scaler,
    impute_missing_week,
    load_dataset,
    load_geo_registry,
    load_infections,
    num_windows,
    prepare,
    split_chronological,
    split_sizes,
    training_days,
)
from fgforecast.synthgen import emit_dataset

START = dt.date(2020, 3, 1)


def write_cbgs(path, rows):
    path.write_text(",".join(CBG_HEADER) + "\n" + "".join(",".join(map(str, r)) + "\n" for r in rows))


# ---------------------------------------------------------------- registry

def test_registry_three_rows(tmp_path):
    p = tmp_path / "cbgs.csv"
    write_cbgs(p, [("c", "Y", 34.0, -118.0, 10, 0.5), ("a", "X", 34.1, -118.1, 20, 0.2),
                   ("b", "X", 34.2, -118.2, 30, 0.9)])
    reg = load_geo_registry(p)
    assert (reg.n_cbg, reg.n_com) == (3, 2)
    assert reg.cbg_ids == ["a", "b", "c"]
    named = {com: [reg.cbg_ids[i] for i in idx] for com, idx in reg.membership.items()}
    assert named == {"X": ["a", "b"], "Y": ["c"]}


def test_registry_duplicate_id(tmp_path):
    p = tmp_path / "cbgs.csv"
    write_cbgs(p, [("a", "X", 34.0, -118.0, 10, 0.5), ("a", "Y", 34.1, -118.1, 20, 0.2)])
    with pytest.raises(DataError, match="duplicate"):
        load_geo_registry(p)


def test_registry_malformed_row_reports_line(tmp_path):
    p = tmp_path / "cbgs.csv"
    write_cbgs(p, [("a", "X", 34.0, -118.0, 10, 0.5), ("b", "X", "north", -118.1, 20, 0.2)])
    with pytest.raises(DataError, match=r"cbgs.csv:3:"):
        load_geo_registry(p)


def test_registry_bad_header(tmp_path):
    p = tmp_path / "cbgs.csv"
    p.write_text("id,community,lat,lon,population,svi\na,X,34,-118,1,0.1\n")
    with pytest.raises(DataError):
        load_geo_registry(p)


def test_registry_svi_range(tmp_path):
    p = tmp_path / "cbgs.csv"
    write_cbgs(p, [("a", "X", 34.0, -118.0, 10, 1.5)])
    with pytest.raises(DataError):
        load_geo_registry(p)


def test_registry_la_scale(tmp_path):
    rows = [(f"cbg{i:04d}", f"com{i % 139:03d}", 34.0 + i * 1e-4, -118.3, 1000, 0.5) for i in range(2688)]
    p = tmp_path / "cbgs.csv"
    write_cbgs(p, rows)
    reg = load_geo_registry(p)
    assert (reg.n_cbg, reg.n_com) == (2688, 139)


def test_infections_unknown_community(tmp_path):
    p = tmp_path / "cbgs.csv"
    write_cbgs(p, [("a", "X", 34.0, -118.0, 10, 0.5)])
    reg = load_geo_registry(p)
    q = tmp_path / "infections.csv"
    q.write_text("date,community_id,new_cases\n2020-03-01,Z,4\n")
    with pytest.raises(DataError):
        load_infections(q, reg)


# ---------------------------------------------------------------- imputation

def _series(values):
    values = np.asarray(values, dtype=float)
    return DailySeries(START, values, tuple(f"u{j}" for j in range(values.shape[1])))


def test_impute_mean_of_neighbouring_weeks():
    v = np.full((15, 1), np.nan)
    v[0], v[14] = 4.0, 6.0
    out = impute_missing_week(_series(v), range(7, 8))
    assert out.values[7, 0] == 5.0


def test_impute_identical_weeks():
    v = np.full((21, 1), 9.0)
    v[7:14] = np.nan
    out = impute_missing_week(_series(v), range(7, 14))
    assert np.all(out.values[7:14] == 9.0)


def test_impute_random_matches_brute_force(rng):
    v = rng.uniform(0, 50, size=(30, 3))
    v[10:17] = np.nan
    s = _series(v)
    out = impute_missing_week(s, range(10, 17))
    for d in range(10, 17):
        for u in range(3):
            assert out.values[d, u] == (v[d - 7, u] + v[d + 7, u]) / 2
    untouched = np.ones(30, bool)
    untouched[10:17] = False
    assert np.array_equal(out.values[untouched], v[untouched])


def test_impute_unbracketed():
    v = np.ones((10, 1))
    with pytest.raises(DataError):
        impute_missing_week(_series(v), range(5, 7))


# ---------------------------------------------------------------- scaling

def test_scaler_examples():
    s = fit_scaler(np.array([[10.0], [20.0], [30.0]]))
    assert (s.min[0], s.max[0]) == (10.0, 30.0)
    assert np.allclose(s.transform(np.array([[10.0], [20.0], [30.0]]))[:, 0], [0, 0.5, 1])
    const = fit_scaler(np.array([[5.0], [5.0], [5.0]]))
    assert np.array_equal(const.transform(np.array([[5.0], [5.0], [5.0]])), np.zeros((3, 1)))
    partial = fit_scaler(np.array([[0.0], [10.0], [40.0]]), range(0, 2))
    assert partial.transform(np.array([[40.0]]))[0, 0] == 4.0


def test_scaler_empty_range():
    with pytest.raises(ValueError):
        fit_scaler(np.ones((3, 1)), range(0, 0))


def test_scaler_unfitted():
    from fgforecast.ingest import MinMaxScaler

    with pytest.raises(RuntimeError):
        MinMaxScaler().transform(np.ones(1))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=2, max_size=30))
def test_scaler_round_trip(col):
    x = np.array(col)[:, None]
    s = fit_scaler(x)
    if s.degenerate[0]:
        return
    back = s.inverse_transform(s.transform(x))
    assert np.allclose(back, x, rtol=1e-9, atol=1e-9 * np.max(np.abs(x)))


# ---------------------------------------------------------------- adjacency

def _log(entries):
    day, o, d, c = zip(*entries)
    return MobilityLog(np.array(day), np.array(o), np.array(d), np.array(c, dtype=float))


def test_adjacency_sums_window():
    log = _log([(0, 0, 1, 3.0), (1, 0, 1, 2.0), (5, 0, 1, 7.0)])
    a = build_window_adjacency(log, range(0, 3), 2)
    assert a[0, 1] == 5.0 and a.nnz == 1


def test_adjacency_empty_window():
    log = _log([(0, 0, 1, 3.0)])
    assert build_window_adjacency(log, range(4, 6), 2).nnz == 0


def test_adjacency_dense_oracle_and_order(rng):
    entries = [(int(rng.integers(0, 6)), int(rng.integers(0, 4)), int(rng.integers(0, 4)),
                float(rng.integers(0, 10))) for _ in range(20)]
    dense = np.zeros((4, 4))
    for day, o, d, c in entries:
        if 1 <= day < 5:
            dense[o, d] += c
    a = build_window_adjacency(_log(entries), range(1, 5), 4)
    assert np.array_equal(a.toarray(), dense)
    perm = rng.permutation(len(entries))
    b = build_window_adjacency(_log([entries[k] for k in perm]), range(1, 5), 4)
    assert np.array_equal(a.toarray(), b.toarray())


# ---------------------------------------------------------------- windows and splits

@pytest.mark.parametrize("n,t,expected", [(25, 21, 4), (22, 21, 1), (300, 21, 279)])
def test_window_counts(n, t, expected):
    assert num_windows(n, t, 1) == expected


@settings(max_examples=50, deadline=None)
@given(st.integers(4, 40), st.integers(1, 10))
def test_window_count_property(n, t):
    from conftest import make_registry

    if n < t + 1:
        return
    reg = make_registry([("a", "X"), ("b", "Y")])
    vis = DailySeries(START, np.arange(2 * n, dtype=float).reshape(n, 2), ("a", "b"))
    inf = DailySeries(START, np.arange(2 * n, dtype=float).reshape(n, 2), ("X", "Y"))
    from fgforecast.ingest import Scalers

    scalers = Scalers(fit_scaler(vis.values), fit_scaler(reg.populations()[:, None]),
                      fit_scaler(reg.vulnerabilities()[:, None]), fit_scaler(inf.values))
    samples = build_windows(reg, vis, inf, _log([(0, 0, 1, 1.0)]), t, 1, scalers)
    assert len(samples) == n - t
    for k, s in enumerate(samples):
        assert s.target_day == k + t
        assert s.features.shape == (2, t, 3)
        assert np.allclose(s.infections_history, scalers.infections.transform(inf.values)[k:k + t].T)


def test_single_window_targets_last_day():
    from conftest import make_registry
    from fgforecast.ingest import Scalers

    reg = make_registry([("a", "X")])
    vis = DailySeries(START, np.arange(22, dtype=float)[:, None], ("a",))
    inf = DailySeries(START, np.arange(22, dtype=float)[:, None], ("X",))
    sc = Scalers(fit_scaler(vis.values), fit_scaler(reg.populations()[:, None]),
                 fit_scaler(reg.vulnerabilities()[:, None]), fit_scaler(inf.values))
    (s,) = build_windows(reg, vis, inf, _log([(0, 0, 0, 1.0)]), 21, 1, sc)
    assert s.target_day == 21 and s.target_date == START + dt.timedelta(days=21)


@pytest.mark.parametrize("n,sizes", [(10, (5, 2, 3)), (286, (143, 57, 86)), (106, (53, 21, 32))])
def test_split_sizes(n, sizes):
    assert split_sizes(n, (0.5, 0.2, 0.3)) == sizes
    parts = split_chronological(list(range(n)))
    assert tuple(map(len, parts)) == sizes
    assert parts[0] + parts[1] + parts[2] == list(range(n))


def test_split_empty_part():
    with pytest.raises(DataError):
        split_sizes(3, (0.5, 0.2, 0.3))


def test_split_bad_ratios():
    with pytest.raises(ValueError):
        split_sizes(10, (0.5, 0.5, 0.5))


def test_training_days_cover_train_windows():
    r = training_days(120, 14, 1, (0.5, 0.2, 0.3))
    n_train = split_sizes(106, (0.5, 0.2, 0.3))[0]
    assert r == range(0, n_train - 1 + 14 + 1)


# ---------------------------------------------------------------- full dataset

def test_emit_load_round_trip(small_world, tmp_path):
    emit_dataset(small_world, tmp_path)
    ds = load_dataset(tmp_path)
    w = small_world.dataset
    assert ds.registry == w.registry
    assert np.array_equal(ds.visits.values, w.visits.values)
    assert np.array_equal(ds.infections.values, w.infections.values)
    for f in ("day", "origin", "dest", "count"):
        assert np.array_equal(getattr(ds.mobility, f), getattr(w.mobility, f))


def test_load_missing_dir(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nope")


def test_prepare_scalers_fit_on_training_days(small_world):
    p = prepare(small_world.dataset, 7)
    train = small_world.dataset.infections.values[p.train_range.start:p.train_range.stop]
    assert p.scalers.infections.min[0] == train.min()
    assert p.scalers.infections.max[0] == train.max()
    assert max(s.target.max() for s in p.train) <= 1.0


def test_community_level_sums(small_world):
    ds = small_world.dataset
    com = community_level(ds)
    m = ds.registry.membership_matrix()
    assert com.registry.n_cbg == ds.registry.n_com
    assert np.allclose(com.visits.values, ds.visits.values @ m.T)
    assert np.allclose(com.registry.populations(), m @ ds.registry.populations())
    a = build_window_adjacency(com.mobility, range(0, ds.num_days), com.registry.n_cbg).toarray()
    assert np.all(np.diag(a) == 0)
    full = build_window_adjacency(ds.mobility, range(0, ds.num_days), ds.registry.n_cbg).toarray()
    expected = m @ full @ m.T
    np.fill_diagonal(expected, 0)
    assert np.allclose(a, expected)
