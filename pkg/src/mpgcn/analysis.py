"""Prediction metrics, heavy-tail fits of stops passed, route preferences."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize, special, stats

from .errors import ContractError, FitError, UndefinedMetricError

FAMILIES = ("power_law", "exponential", "lognormal", "weibull")
N_BINS = 20
N_STARTS = 8


# -- metrics ---------------------------------------------------------------


def _pair(pred, actual):
    p = np.asarray(pred, dtype=np.float64).ravel()
    a = np.asarray(actual, dtype=np.float64).ravel()
    if p.shape != a.shape:
        raise ContractError(f"length mismatch: {p.size} predictions vs {a.size} targets")
    if p.size == 0:
        raise ContractError("metrics need at least one value")
    return p, a


def mae(pred, actual):
    p, a = _pair(pred, actual)
    return float(np.mean(np.abs(p - a)))


def rmse(pred, actual):
    p, a = _pair(pred, actual)
    return float(np.sqrt(np.mean((p - a) ** 2)))


def cc(pred, actual):
    """Pearson correlation; raises UndefinedMetricError for a constant series."""
    p, a = _pair(pred, actual)
    dp = p - p.mean()
    da = a - a.mean()
    vp = float(dp @ dp)
    va = float(da @ da)
    if vp == 0.0 or va == 0.0:
        raise UndefinedMetricError("correlation is undefined for a constant series")
    r = float(dp @ da) / math.sqrt(vp * va)
    return min(1.0, max(-1.0, r))


@dataclass
class MetricReport:
    mae: float
    rmse: float
    cc: float
    step_minutes: int
    length: int

    def to_dict(self):
        return {"mae": self.mae, "rmse": self.rmse, "cc": self.cc,
                "step_minutes": self.step_minutes, "length": self.length}


def evaluate(pred, actual, step_minutes):
    p, a = _pair(pred, actual)
    return MetricReport(mae(p, a), rmse(p, a), cc(p, a), int(step_minutes), int(p.size))


# -- distribution fitting --------------------------------------------------


def power_law_pdf(x, a, b):
    return a * np.power(x, b)


def exponential_pdf(x, a, b):
    return a * np.exp(b * x)


def lognormal_pdf(x, A, c, w):
    return A / (x * w * math.sqrt(2.0 * math.pi)) * np.exp(-np.log(x / c) ** 2 / (2.0 * w * w))


def weibull_pdf(x, a, r, u=0.0):
    z = np.clip((x - u) / a, 0.0, None)
    return (r / a) * np.power(z, r - 1.0) * np.exp(-np.power(z, r))


PDFS = {
    "power_law": (power_law_pdf, ("a", "b")),
    "exponential": (exponential_pdf, ("a", "b")),
    "lognormal": (lognormal_pdf, ("A", "c", "w")),
    "weibull": (weibull_pdf, ("a", "r")),
}


@dataclass
class DistributionFit:
    family: str
    params: dict
    residual: float
    trace: list = field(default_factory=list)
    method: str = "lsq"

    def pdf(self, x):
        fn, _ = PDFS[self.family]
        return fn(np.asarray(x, dtype=np.float64), **self.params)

    def to_dict(self):
        return {"family": self.family, "method": self.method, "params": dict(self.params),
                "residual": self.residual}


def _as_histogram(hist):
    if isinstance(hist, dict):
        items = sorted((float(k), float(v)) for k, v in hist.items() if v > 0)
    else:
        items = sorted(Counter(float(v) for v in np.asarray(hist).ravel()).items())
    if not items:
        raise ContractError("histogram is empty")
    x = np.array([k for k, _ in items])
    n = np.array([v for _, v in items])
    if (x <= 0).any():
        raise ContractError("heavy-tail fits need positive values")
    return x, n


def empirical_pdf(hist, n_bins=N_BINS):
    """Log-spaced bins over the observed support, normalized to unit area.

    Returns bin centres (geometric), densities and edges.
    """
    x, n = _as_histogram(hist)
    lo, hi = x[0], x[-1]
    if lo == hi:
        lo, hi = lo * 0.5, hi * 1.5
    edges = np.geomspace(lo, hi, n_bins + 1)
    dens, _ = np.histogram(x, bins=edges, weights=n, density=True)
    centers = np.sqrt(edges[:-1] * edges[1:])
    return centers, dens, edges


def _moments(x, y):
    w = y * np.gradient(x) if x.size > 1 else np.ones_like(y)
    w = np.clip(w, 0.0, None)
    if w.sum() <= 0:
        w = np.ones_like(x)
    w = w / w.sum()
    mean = float(w @ x)
    sd = math.sqrt(max(float(w @ (x - mean) ** 2), 1e-12))
    lmean = float(w @ np.log(x))
    lsd = math.sqrt(max(float(w @ (np.log(x) - lmean) ** 2), 1e-6))
    return mean, sd, lmean, lsd


def _seeds(family, x, y):
    mean, sd, lmean, lsd = _moments(x, y)
    area = float(np.trapezoid(y, x)) if x.size > 1 else 1.0
    area = area if area > 0 else 1.0
    if family == "lognormal":
        base = np.array([area, math.exp(lmean), lsd])
        scales = [(1, 1, 1), (1, 0.7, 1), (1, 1.4, 1), (1, 1, 0.6), (1, 1, 1.6),
                  (0.5, 1, 1), (2, 1, 1), (1, 0.8, 1.3)]
    elif family == "weibull":
        r = min(max((sd / mean) ** -1.086, 0.2), 20.0)
        a = mean / special.gamma(1.0 + 1.0 / r)
        base = np.array([a, r])
        scales = [(1, 1), (0.7, 1), (1.4, 1), (1, 0.6), (1, 1.6), (0.8, 1.3), (1.2, 0.8), (1, 2.5)]
    elif family == "exponential":
        lam = 1.0 / mean
        base = np.array([lam, -lam])
        scales = [(1, 1), (2, 1), (0.5, 1), (1, 2), (1, 0.5), (4, 2), (0.25, 0.5), (1, 4)]
    else:
        raise ContractError(f"unknown family {family!r}")
    return [base * np.array(s, dtype=np.float64) for s in scales[:N_STARTS]]


def _bounds(family):
    if family == "lognormal":
        return [1e-12, 1e-12, 1e-6], [np.inf, np.inf, np.inf]
    if family == "weibull":
        return [1e-12, 1e-6], [np.inf, np.inf]
    return [1e-300, -np.inf], [np.inf, np.inf]


def _fit_power_law(x, y):
    keep = y > 0
    if keep.sum() < 2:
        raise FitError("power law needs two positive densities")
    b, loga = np.polyfit(np.log(x[keep]), np.log(y[keep]), 1)
    params = {"a": float(math.exp(loga)), "b": float(b)}
    resid = float(np.sum((power_law_pdf(x, **params) - y) ** 2))
    return DistributionFit("power_law", params, resid, [resid])


def fit_pdf(x, y, family, weibull_u=0.0):
    """Least-squares fit of one family's pdf to points ``(x, y)``.

    Multi-start from moment seeds; the smallest residual wins.
    """
    if family not in PDFS:
        raise ContractError(f"unknown family {family!r}; expected one of {FAMILIES}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size == 0 or x.shape != y.shape:
        raise ContractError("fit needs equally long, non-empty x and y")
    if family == "power_law":
        return _fit_power_law(x, y)
    fn, names = PDFS[family]
    extra = {"u": weibull_u} if family == "weibull" else {}
    lo, hi = _bounds(family)
    trace, best = [], None
    for start in _seeds(family, x - weibull_u if extra else x, y):
        start = np.clip(start, np.array(lo) * 10, None)

        def resid(theta):
            with np.errstate(over="ignore", invalid="ignore", under="ignore"):
                r = fn(x, *theta, **extra) - y
            return np.nan_to_num(r, nan=1e6, posinf=1e6, neginf=-1e6)

        try:
            sol = optimize.least_squares(resid, start, bounds=(lo, hi), method="trf",
                                         x_scale="jac", xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=2000)
        except (ValueError, FloatingPointError):
            trace.append(float("nan"))
            continue
        ssr = float(np.sum(resid(sol.x) ** 2))
        trace.append(ssr)
        if np.isfinite(ssr) and (best is None or ssr < best[0]):
            best = (ssr, sol.x)
    if best is None:
        raise FitError(f"{family} fit failed from every start", trace)
    params = {n: float(v) for n, v in zip(names, best[1])}
    params.update(extra)
    return DistributionFit(family, params, best[0], trace)


def fit_mle(hist, family):
    """Maximum-likelihood alternative for lognormal, weibull and exponential."""
    x, n = _as_histogram(hist)
    w = n / n.sum()
    if family == "lognormal":
        lm = float(w @ np.log(x))
        ls = math.sqrt(float(w @ (np.log(x) - lm) ** 2))
        params = {"A": 1.0, "c": math.exp(lm), "w": ls}
    elif family == "exponential":
        lam = 1.0 / float(w @ x)
        params = {"a": lam, "b": -lam}
    elif family == "weibull":
        samples = np.repeat(x, n.astype(np.int64))
        r, _, a = stats.weibull_min.fit(samples, floc=0.0)
        params = {"a": float(a), "r": float(r), "u": 0.0}
    else:
        raise ContractError(f"no likelihood fit for {family!r}")
    cx, cy, _ = empirical_pdf(hist)
    resid = float(np.sum((PDFS[family][0](cx, **params) - cy) ** 2))
    return DistributionFit(family, params, resid, [resid], method="mle")


def fit_distribution(hist, family, method="lsq", n_bins=N_BINS, weibull_u=0.0):
    """Fit ``family`` to a histogram ``{value: count}`` (or raw samples)."""
    if method == "mle":
        return fit_mle(hist, family)
    if method != "lsq":
        raise ContractError(f"unknown fit method {method!r}")
    x, y, _ = empirical_pdf(hist, n_bins)
    return fit_pdf(x, y, family, weibull_u=weibull_u)


def quantile_stops(hist, q):
    """Smallest n_s whose cumulative share reaches ``q``."""
    if not 0.0 < q < 1.0:
        raise ContractError("q must lie strictly between 0 and 1")
    x, n = _as_histogram(hist)
    cum = np.cumsum(n) / n.sum()
    k = int(np.searchsorted(cum, q - 1e-12, side="left"))
    v = x[min(k, x.size - 1)]
    return int(v) if float(v).is_integer() else float(v)


# -- pattern statistics ----------------------------------------------------


def stops_passed(profile, route_stops):
    """Stops passed per passenger, from boardings alone.

    Boardings on one route are chained in time order and the chain is
    closed back to its first stop, so each hop a -> b adds |a - b| + 1
    stops. A lone boarding on a route counts 1.
    """
    pos = {r: {s: i for i, s in enumerate(seq)} for r, seq in route_stops.items()}
    out = {}
    for card in sorted(profile.boardings):
        by_route = defaultdict(list)
        for b in profile.boardings[card]:
            where = pos.get(b.route_id, {})
            if b.stop_id in where:
                by_route[b.route_id].append(where[b.stop_id])
        total = 0
        for chain in by_route.values():
            if len(chain) == 1:
                total += 1
                continue
            total += sum(abs(a - b) + 1 for a, b in zip(chain, chain[1:] + chain[:1]))
        if total:
            out[card] = total
    return out


def ns_histograms(profile, labels, route_stops):
    """Pattern -> {n_s: passenger count}."""
    hists = defaultdict(Counter)
    for card, ns in stops_passed(profile, route_stops).items():
        if card in labels:
            hists[int(labels[card])][ns] += 1
    return {p: dict(sorted(h.items())) for p, h in sorted(hists.items())}


def _route_key(r):
    return (0, int(r), "") if str(r).isdigit() else (1, 0, str(r))


@dataclass
class RouteShares:
    patterns: list
    routes: list
    shares: np.ndarray  # pattern x route
    counts: np.ndarray

    def preferences(self, threshold=0.5):
        return {p: [r for j, r in enumerate(self.routes) if self.shares[i, j] > threshold]
                for i, p in enumerate(self.patterns)}


def route_contribution(profile, labels, routes=None):
    """Share of each route's boardings made by each pattern."""
    counts = defaultdict(Counter)
    seen = set()
    for card, bs in profile.boardings.items():
        if card not in labels:
            continue
        p = int(labels[card])
        for b in bs:
            counts[p][b.route_id] += 1
            seen.add(b.route_id)
    patterns = sorted(set(int(v) for v in labels.values()))
    if routes is None:
        routes = seen
    routes = sorted((r for r in routes if r in seen), key=_route_key)
    mat = np.array([[counts[p][r] for r in routes] for p in patterns], dtype=np.float64).reshape(len(patterns), len(routes))
    total = mat.sum(axis=0)
    shares = np.divide(mat, total, out=np.zeros_like(mat), where=total > 0)
    return RouteShares(patterns, routes, shares, mat)


@dataclass
class PatternStats:
    histograms: dict
    fits: dict
    shares: RouteShares
    quantiles: dict

    def to_dict(self):
        return {
            "histograms": {str(p): {str(k): v for k, v in h.items()} for p, h in self.histograms.items()},
            "fits": {str(p): {f: fit.to_dict() for f, fit in fs.items()} for p, fs in self.fits.items()},
            "route_shares": {str(p): {r: float(self.shares.shares[i, j]) for j, r in enumerate(self.shares.routes)}
                             for i, p in enumerate(self.shares.patterns)},
            "preferences": {str(p): rs for p, rs in self.shares.preferences().items()},
            "quantile_80": {str(p): v for p, v in self.quantiles.items()},
        }


def pattern_stats(profile, labels, route_stops, families=FAMILIES, method="lsq"):
    hists = ns_histograms(profile, labels, route_stops)
    fits = {}
    for p, h in hists.items():
        fits[p] = {}
        for fam in families:
            m = method if fam != "power_law" else "lsq"
            try:
                fits[p][fam] = fit_distribution(h, fam, method=m)
            except FitError:
                continue
    quant = {p: quantile_stops(h, 0.8) for p, h in hists.items()}
    return PatternStats(hists, fits, route_contribution(profile, labels, route_stops), quant)


# -- reports ---------------------------------------------------------------


def write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_histograms_csv(stats_, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pattern", "n_s", "count"])
        for p, h in stats_.histograms.items():
            for k, v in h.items():
                w.writerow([p, k, v])


def write_fit_curves_csv(stats_, path):
    """Empirical density and every fitted pdf on the bin grid."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pattern", "x", "empirical", *FAMILIES])
        for p, h in stats_.histograms.items():
            x, y, _ = empirical_pdf(h)
            curves = {f: stats_.fits[p][f].pdf(x) if f in stats_.fits[p] else np.full_like(x, np.nan)
                      for f in FAMILIES}
            for i in range(x.size):
                w.writerow([p, f"{x[i]:.6g}", f"{y[i]:.6g}", *(f"{curves[f][i]:.6g}" for f in FAMILIES)])


def write_route_shares_csv(shares, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["route", *(f"pattern_{p}" for p in shares.patterns)])
        for j, r in enumerate(shares.routes):
            w.writerow([r, *(f"{shares.shares[i, j]:.6f}" for i in range(len(shares.patterns)))])
