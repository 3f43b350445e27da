from __future__ import annotations

import math

import numpy as np
import pytest
import pywt
from hypothesis import given
from hypothesis import strategies as st
from oracles import pearson_formula, reference_dwt_energies
from scipy import stats as sps

from earlywarn.features import (
    BAND_NAMES,
    STAT_NAMES,
    FeatureImputer,
    band_energies,
    cross_correlations,
    feature_matrix,
    feature_schema,
    featurize,
    pearson,
    read_feature_cache,
    stats_matrix,
    wavelet_energies,
    window_stats,
    write_feature_cache,
    write_feature_csv,
)
from earlywarn.series import ConfigurationError, EntitySeries, SignalKind, WindowConfig, derive_signals, make_subsequences

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_stats_ramp():
    s = window_stats([1, 2, 3, 4, 5])
    assert s["mean"] == 3 and s["slope"] == pytest.approx(1.0) and s["skew"] == pytest.approx(0.0, abs=1e-12)


def test_stats_constant_window():
    s = window_stats([7.0] * 60)
    assert (s["var"], s["sd"], s["slope"], s["skew"], s["kurt"]) == (0, 0, 0, 0, 0)
    assert s["iqr"] == 0 and s["min"] == s["max"] == s["median"] == 7


def test_stats_hand_computed():
    s = window_stats([2, 4, 4, 4, 5, 5, 7, 9])
    assert s["mean"] == 5 and s["median"] == 4.5
    assert s["sd"] == pytest.approx(math.sqrt(32 / 7))
    assert round(s["sd"], 3) == 2.138


@given(st.lists(finite, min_size=3, max_size=80).filter(lambda v: np.ptp(v) > 1e-3))
def test_stats_against_scipy(values):
    x = np.asarray(values)
    s = window_stats(x)
    q25, q75 = np.percentile(x, [25, 75])
    ref = {
        "mean": x.mean(),
        "sd": x.std(ddof=1),
        "var": x.var(ddof=1),
        "median": np.median(x),
        "min": x.min(),
        "max": x.max(),
        "iqr": q75 - q25,
        "skew": sps.skew(x, bias=False),
        "kurt": sps.kurtosis(x, fisher=True, bias=True),
        "slope": sps.linregress(np.arange(len(x)), x).slope,
    }
    for name in STAT_NAMES:
        assert s[name] == pytest.approx(ref[name], rel=1e-7, abs=1e-7), name


def test_stats_ignore_missing_and_need_two_values():
    a = window_stats([1.0, np.nan, 3.0, 5.0])
    b = window_stats([1.0, 3.0, 5.0])
    assert a["mean"] == b["mean"] and a["sd"] == b["sd"] and a["median"] == b["median"]
    assert all(math.isnan(v) for v in window_stats([np.nan, 4.0, np.nan]).values())


@given(st.floats(-500, 500, allow_nan=False), st.integers(2, 70))
def test_constant_windows_have_zero_shape_stats(c, n):
    s = window_stats([c] * n)
    assert s["skew"] == 0 and s["kurt"] == 0 and s["var"] == 0


def test_pearson_examples():
    x = np.array([3.0, 1.0, 4.0, 1.0, 5.0, 9.0])
    assert pearson(x, x) == pytest.approx(1.0)
    assert pearson(x, -x) == pytest.approx(-1.0)
    assert pearson([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)
    assert pearson([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(pearson_formula([1, 2, 3, 4], [1, 3, 2, 4]))
    assert pearson([5, 5, 5], [1, 2, 3]) == 0


@given(st.lists(st.tuples(finite, finite), min_size=3, max_size=50))
def test_pearson_bounded_and_symmetric(pairs):
    a, b = map(np.array, zip(*pairs))
    r = pearson(a, b)
    assert -1 <= r <= 1
    assert r == pearson(b, a)
    if np.ptp(a) > 1e-6 and np.ptp(b) > 1e-6:
        assert r == pytest.approx(pearson_formula(list(a), list(b)), abs=1e-9)


def test_cross_correlations_order():
    ow = [np.arange(5.0), np.arange(5.0) ** 2, -np.arange(5.0)]
    r = cross_correlations(ow)
    assert r.shape == (3,)
    assert r[1] == pytest.approx(-1.0)


def test_wavelet_examples():
    e = wavelet_energies([4.0] * 60)
    assert e[-1] == pytest.approx(1.0) and np.allclose(e[:-1], 0.0, atol=1e-12)
    assert np.all(wavelet_energies([0.0] * 60) == 0)
    alt = np.array([1.0, -1.0] * 32)
    assert wavelet_energies(alt)[0] > 0.9
    assert list(BAND_NAMES) == ["d1", "d2", "d3", "d4", "d5", "a5"]


def test_wavelet_rejects_short_windows():
    with pytest.raises(ConfigurationError):
        wavelet_energies(np.ones(31))


@given(st.lists(finite, min_size=60, max_size=60))
def test_band_energies_match_reference_dwt(values):
    got = band_energies(np.array(values)[None, :])[0]
    ref = reference_dwt_energies(values)
    assert np.allclose(got, ref, rtol=1e-9, atol=1e-6)


@pytest.mark.filterwarnings("ignore:Level value of 5 is too high")
@given(st.integers(1, 4).flatmap(lambda m: st.lists(finite, min_size=32 * m, max_size=32 * m)))
def test_band_energies_match_pywt_and_parseval(values):
    x = np.array(values)
    coeffs = pywt.wavedec(x, "db2", mode="periodization", level=5)
    ref = [float(np.sum(c * c)) for c in coeffs[:0:-1]] + [float(np.sum(coeffs[0] ** 2))]
    got = band_energies(x[None, :])[0]
    assert np.allclose(got, ref, rtol=1e-9, atol=1e-6)
    total = float(x @ x)
    if total > 0:
        assert abs(got.sum() - total) <= 1e-6 * total


@given(st.lists(finite, min_size=60, max_size=60).filter(lambda v: max(map(abs, v)) > 1e-6))
def test_relative_energies_sum_to_one(values):
    e = wavelet_energies(values)
    assert np.all((e >= 0) & (e <= 1))
    assert abs(e.sum() - 1) <= 1e-9


def crafted_series(n=200, seed=0, flat=False):
    rng = np.random.default_rng(seed)
    raw = {k: (np.full(n, 70.0) if flat else 70 + rng.normal(0, 5, n)) for k in (SignalKind.HR, SignalKind.SBP, SignalKind.DBP, SignalKind.MAP)}
    return derive_signals(EntitySeries("f", 0, raw))


def test_schema_and_vector_length():
    schema = feature_schema()
    assert len(schema) == 111 and len(set(schema)) == 111
    assert schema[:3] == ["HR.mean", "HR.sd", "HR.var"] and schema[-1] == "corr.CO.PP"
    s = crafted_series()
    ss = make_subsequences(s, WindowConfig(), 30)[1]
    fv = featurize(s, ss)
    assert fv.values.shape == (111,)
    assert fv["MAP.mean"] == window_stats(s[SignalKind.MAP][ss.ow_slice])["mean"]


def test_identical_signals_give_zero_correlations():
    s = crafted_series(flat=True)
    fv = featurize(s, make_subsequences(s, WindowConfig(), 30)[0])
    assert all(fv[n] == 0 for n in fv.schema if n.startswith("corr."))


def test_featurization_is_deterministic_and_matches_single_window_path():
    s = crafted_series(seed=3)
    subs = make_subsequences(s, WindowConfig(), 7)
    X = feature_matrix(s, np.array([ss.offset for ss in subs]), 60)
    for i, ss in enumerate(subs):
        assert np.array_equal(featurize(s, ss).values, X[i])
    assert np.array_equal(X, feature_matrix(s, np.array([ss.offset for ss in subs]), 60))


def test_imputer_uses_training_medians():
    X = np.array([[1.0, np.nan], [3.0, np.nan], [np.nan, np.nan]])
    imp = FeatureImputer(["a", "b"]).fit(X)
    assert imp.transform(np.array([[np.nan, np.nan]])).tolist() == [[2.0, 0.0]]
    with pytest.raises(ConfigurationError):
        imp.transform(np.zeros((1, 3)))


def test_feature_cache_round_trip(tmp_path):
    X = np.array([[1.5, np.nan], [-0.0, 1e300]])
    p = tmp_path / "f.ewfm"
    write_feature_cache(p, X, ["a", "b"], {"k": [1, 2]})
    back, schema, meta = read_feature_cache(p)
    assert np.array_equal(back, X, equal_nan=True) and schema == ["a", "b"] and meta == {"k": [1, 2]}
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ConfigurationError):
        read_feature_cache(tmp_path / "bad")


def test_feature_csv(tmp_path):
    p = tmp_path / "f.csv"
    write_feature_csv(p, np.array([[0.5, np.nan]]), ["a", "b"], [("e1", 30)])
    assert p.read_text() == "entity_id,t_start,a,b\ne1,30,0.5,\n"


def test_stats_matrix_shape():
    assert stats_matrix(np.zeros((4, 60))).shape == (4, 10)
