import csv
import json
import math
from datetime import datetime

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpgcn.analysis import (
    FAMILIES,
    cc,
    empirical_pdf,
    evaluate,
    exponential_pdf,
    fit_distribution,
    fit_pdf,
    lognormal_pdf,
    mae,
    ns_histograms,
    pattern_stats,
    power_law_pdf,
    quantile_stops,
    rmse,
    route_contribution,
    stops_passed,
    weibull_pdf,
    write_fit_curves_csv,
    write_histograms_csv,
    write_route_shares_csv,
)
from mpgcn.errors import ContractError, UndefinedMetricError
from mpgcn.ingest import Boarding, PassengerStopProfile
from mpgcn.synth import CityConfig, generate_city
from mpgcn.ingest import match_stops

floats = st.floats(-1e3, 1e3, allow_nan=False)
pairs = st.integers(1, 40).flatmap(lambda n: st.tuples(st.lists(floats, min_size=n, max_size=n),
                                                       st.lists(floats, min_size=n, max_size=n)))

# hand-computed reference values
FIXED = [
    ([1.0, 2.0], [2.0, 4.0], 1.5, math.sqrt(2.5), 1.0),
    ([0.0, 0.0, 1.0], [3.0, 4.0, 1.0], 7.0 / 3.0, math.sqrt(25.0 / 3.0), -5.0 / (2.0 * math.sqrt(7.0))),
    ([1.0, 2.0, 3.0, 4.0], [2.0, 1.0, 4.0, 3.0], 1.0, 1.0, 0.6),
]


@pytest.mark.parametrize("pred,act,m,r,c", FIXED)
def test_metrics_hand_values(pred, act, m, r, c):
    assert abs(mae(pred, act) - m) <= 1e-12
    assert abs(rmse(pred, act) - r) <= 1e-12
    assert abs(cc(pred, act) - c) <= 1e-12


def test_metric_trivial_cases():
    x = np.array([1.0, 5.0, 2.0])
    assert mae(x, x) == 0.0 and rmse(x, x) == 0.0
    assert cc(x, x) == pytest.approx(1.0, abs=1e-15)
    assert cc(-x, x) == pytest.approx(-1.0, abs=1e-15)
    assert rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5), abs=1e-12)


def test_metric_errors():
    with pytest.raises(ContractError):
        mae([], [])
    with pytest.raises(ContractError):
        rmse([1.0], [1.0, 2.0])
    with pytest.raises(UndefinedMetricError):
        cc([1.0, 1.0], [1.0, 2.0])


@settings(max_examples=100, deadline=None)
@given(pairs)
def test_rmse_at_least_mae(pair):
    p, a = pair
    assert rmse(p, a) >= mae(p, a) - 1e-12 * (1 + mae(p, a))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_metrics_match_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 50))
    p, a = rng.normal(size=n), rng.normal(size=n)
    m = sum(abs(x - y) for x, y in zip(p, a)) / n
    r = math.sqrt(sum((x - y) ** 2 for x, y in zip(p, a)) / n)
    mp, ma = sum(p) / n, sum(a) / n
    cov = sum((x - mp) * (y - ma) for x, y in zip(p, a))
    vp = sum((x - mp) ** 2 for x in p)
    va = sum((y - ma) ** 2 for y in a)
    assert abs(mae(p, a) - m) <= 1e-12
    assert abs(rmse(p, a) - r) <= 1e-12
    assert abs(cc(p, a) - cov / math.sqrt(vp * va)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_cc_affine_invariant(seed):
    rng = np.random.default_rng(seed)
    p, a = rng.normal(size=30), rng.normal(size=30)
    s, t = rng.uniform(0.1, 10.0, size=2)
    shift = rng.normal(size=2) * 10
    base = cc(p, a)
    assert abs(cc(s * p + shift[0], a) - base) <= 1e-9
    assert abs(cc(p, t * a + shift[1]) - base) <= 1e-9
    assert -1.0 <= base <= 1.0


def test_evaluate_report():
    rep = evaluate([[1.0, 2.0], [3.0, 5.0]], [[1.0, 2.0], [3.0, 4.0]], 5)
    assert rep.length == 4 and rep.step_minutes == 5
    assert rep.mae == pytest.approx(0.25) and rep.rmse == pytest.approx(0.5)


# -- fitting ---------------------------------------------------------------


def test_empirical_pdf_unit_area():
    rng = np.random.default_rng(0)
    x, y, edges = empirical_pdf(np.round(rng.lognormal(4.0, 0.5, 2000)) + 1)
    assert x.size == 20 and edges.size == 21
    assert float(np.sum(y * np.diff(edges))) == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(np.diff(np.log(edges)), np.log(edges[1] / edges[0]))


@pytest.mark.parametrize("c,w", [(87.0, 0.4), (91.0, 0.5), (92.0, 0.35), (71.0, 0.6)])
def test_lognormal_recovery(c, w):
    rng = np.random.default_rng(int(c))
    fit = fit_distribution(c * np.exp(w * rng.normal(size=50_000)), "lognormal")
    assert abs(fit.params["c"] - c) / c <= 0.10
    assert abs(fit.params["w"] - w) / w <= 0.10


@pytest.mark.parametrize("a,r", [(99.0, 1.8), (102.0, 1.9), (99.0, 1.7), (73.0, 1.4)])
def test_weibull_recovery(a, r):
    rng = np.random.default_rng(int(a * 10 + r * 10))
    fit = fit_distribution(a * rng.weibull(r, size=50_000), "weibull")
    assert abs(fit.params["r"] - r) / r <= 0.10
    assert abs(fit.params["a"] - a) / a <= 0.10
    assert fit.params["u"] == 0.0


@pytest.mark.parametrize("family,fn,params", [
    ("lognormal", lognormal_pdf, dict(A=1.3, c=87.0, w=0.4)),
    ("weibull", weibull_pdf, dict(a=99.0, r=1.8)),
    ("exponential", exponential_pdf, dict(a=0.02, b=-0.02)),
    ("power_law", power_law_pdf, dict(a=3.0, b=-1.5)),
])
def test_exact_pdf_self_consistency(family, fn, params):
    x = np.geomspace(5.0, 300.0, 30)
    fit = fit_pdf(x, fn(x, **params), family)
    assert fit.residual <= 1e-6
    for k, v in params.items():
        assert fit.params[k] == pytest.approx(v, rel=1e-4)


def test_scale_parameters_positive():
    rng = np.random.default_rng(4)
    data = np.round(80 * np.exp(0.45 * rng.normal(size=3000))) + 1
    for fam in ("lognormal", "weibull"):
        fit = fit_distribution(data, fam)
        assert all(v > 0 for k, v in fit.params.items() if k != "u")
        assert len(fit.trace) == 8


def test_true_family_fits_best():
    rng = np.random.default_rng(5)
    data = 87 * np.exp(0.4 * rng.normal(size=20_000))
    res = {f: fit_distribution(data, f).residual for f in FAMILIES}
    assert res["lognormal"] == min(res.values())


def test_mle_alternative():
    rng = np.random.default_rng(6)
    data = 87 * np.exp(0.4 * rng.normal(size=20_000))
    fit = fit_distribution(data, "lognormal", method="mle")
    assert fit.method == "mle"
    assert fit.params["c"] == pytest.approx(87, rel=0.02)
    wb = fit_distribution(np.round(99 * rng.weibull(1.8, 5000)) + 1, "weibull", method="mle")
    assert wb.params["r"] == pytest.approx(1.8, rel=0.1)


def test_fit_rejects_bad_input():
    with pytest.raises(ContractError):
        fit_distribution({}, "lognormal")
    with pytest.raises(ContractError):
        fit_distribution({1: 3}, "gamma")
    with pytest.raises(ContractError):
        fit_distribution({0: 3, 2: 1}, "lognormal")


# -- quantiles -------------------------------------------------------------


def test_quantile_examples():
    assert quantile_stops({1: 10}, 0.8) == 1
    assert quantile_stops({1: 1, 2: 1}, 0.5) == 1
    assert quantile_stops({1: 1, 2: 1, 3: 2}, 0.75) == 3
    with pytest.raises(ContractError):
        quantile_stops({1: 1}, 1.0)


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(st.integers(1, 300), st.integers(1, 50), min_size=1, max_size=30),
       st.floats(0.01, 0.99))
def test_quantile_matches_scan(hist, q):
    total = sum(hist.values())
    run = 0
    expect = None
    for k in sorted(hist):
        run += hist[k]
        if run / total >= q - 1e-12:
            expect = k
            break
    assert quantile_stops(hist, q) == expect


# -- stops passed and route shares ----------------------------------------


T0 = datetime(2019, 11, 4, 8)


def _profile(rows):
    out = {}
    for k, (card, stop, route) in enumerate(rows):
        out.setdefault(card, []).append(Boarding(T0.replace(minute=k), stop, route))
    return PassengerStopProfile(out, len(rows), 0)


ROUTES = {"1": ["A", "B", "C", "D", "E"], "2": ["F", "C", "G"]}


def test_stops_passed_hand_cases():
    prof = _profile([
        ("p", "A", "1"), ("p", "D", "1"),              # round trip A<->D: 2 * 4
        ("q", "B", "1"),                               # lone boarding
        ("r", "A", "1"), ("r", "C", "1"), ("r", "F", "2"), ("r", "E", "1"),
    ])
    ns = stops_passed(prof, ROUTES)
    assert ns["p"] == 8
    assert ns["q"] == 1
    # route 1 chain A, C, E closed: 3 + 3 + 5; route 2 lone: 1
    assert ns["r"] == 12
    h = ns_histograms(prof, {"p": 0, "q": 0, "r": 1}, ROUTES)
    assert h == {0: {1: 1, 8: 1}, 1: {12: 1}}


def test_route_contribution_single_pattern():
    prof = _profile([("p", "A", "1"), ("q", "F", "2"), ("q", "C", "2")])
    rs = route_contribution(prof, {"p": 0, "q": 0}, ROUTES)
    assert rs.routes == ["1", "2"]
    np.testing.assert_array_equal(rs.shares, [[1.0, 1.0]])
    assert rs.preferences() == {0: ["1", "2"]}


def test_route_preferences_strict_majority():
    prof = _profile([("p", "A", "1"), ("q", "B", "1"), ("p", "F", "2"), ("p", "C", "2"), ("q", "G", "2")])
    rs = route_contribution(prof, {"p": 0, "q": 1}, ROUTES)
    np.testing.assert_allclose(rs.shares, [[0.5, 2 / 3], [0.5, 1 / 3]])
    assert rs.preferences() == {0: ["2"], 1: []}


def test_route_shares_sum_to_one(desk_city, desk_profile):
    rs = route_contribution(desk_profile, desk_city.ground_truth["labels"], desk_city.registry.route_stops())
    assert np.all(np.abs(rs.shares.sum(axis=0) - 1.0) <= 1e-12)


def test_planted_route_shares_recovered(desk_city, desk_profile):
    gt = desk_city.ground_truth["route_shares"]
    rs = route_contribution(desk_profile, desk_city.ground_truth["labels"], desk_city.registry.route_stops())
    for i, p in enumerate(rs.patterns):
        for j, r in enumerate(rs.routes):
            assert abs(rs.shares[i, j] - gt[str(p)][r]) <= 0.02
    assert rs.preferences() == {p: [str(2 * p + 1), str(2 * p + 2)] for p in range(4)}


def test_stops_passed_matches_generator_on_clean_city():
    city = generate_city(CityConfig(pattern_sizes=[30, 30, 30, 30], days=3, seed=2,
                                    unmatched_fraction=0.0, drop_bus_days=0))
    prof = match_stops(city.rides, city.events)
    assert city.ground_truth["skipped_legs"] == 0
    assert stops_passed(prof, city.registry.route_stops()) == city.ground_truth["ns_realized"]


@pytest.mark.slow
def test_planted_ns_lognormal_recovered():
    city = generate_city(CityConfig(pattern_sizes=[1250] * 4, seed=0))
    prof = match_stops(city.rides, city.events)
    hists = ns_histograms(prof, city.ground_truth["labels"], city.registry.route_stops())
    assert sum(sum(h.values()) for h in hists.values()) >= 5000
    for p, h in hists.items():
        c, w = city.config.ns_lognormal[p]
        fit = fit_distribution(h, "lognormal")
        assert abs(fit.params["c"] - c) / c <= 0.15
        assert abs(fit.params["w"] - w) / w <= 0.15


def test_pattern_stats_reports(tmp_path, desk_city, desk_profile):
    st_ = pattern_stats(desk_profile, desk_city.ground_truth["labels"], desk_city.registry.route_stops())
    assert set(st_.fits) == {0, 1, 2, 3}
    assert all(set(f) == set(FAMILIES) for f in st_.fits.values())
    doc = st_.to_dict()
    json.dumps(doc)
    write_histograms_csv(st_, tmp_path / "h.csv")
    write_fit_curves_csv(st_, tmp_path / "f.csv")
    write_route_shares_csv(st_.shares, tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "f.csv")))
    assert rows[0] == ["pattern", "x", "empirical", *FAMILIES]
    assert len(rows) == 1 + 4 * 20
    shares = list(csv.reader(open(tmp_path / "r.csv")))
    assert len(shares) == 1 + 8
