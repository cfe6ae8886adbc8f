"""Synthetic bus city with planted mobility patterns.

Each pattern owns a service area with its own routes and mostly travels
there; patterns differ in their diurnal timing, day-to-day activity and
trip length law. Buses run fixed-headway round trips, passengers make
habitual round trips between a home and a destination stop, and every
boarding is written as a ride row whose timestamp falls inside the dwell
window of a real stop event.
"""

from __future__ import annotations

import bisect
import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path

import numpy as np

from .errors import GeneratorError
from .ingest import (
    EVENT_HEADER,
    RIDE_HEADER,
    TIME_FORMAT,
    RideRecord,
    StopEvent,
    StopRegistry,
    write_registry,
)

log = logging.getLogger(__name__)

# per-area layout in grid units: a trunk line and a detour sharing 3 stops
AREA_POINTS = [(0, 0), (1, 0), (2, 0), (3, 0), (4, 0), (5, 0), (1, 1), (2, 1), (4, -1), (5, -1)]
AREA_ROUTES = ([0, 1, 2, 3, 4, 5], [0, 6, 7, 3, 8, 9, 5])
GRID_DEG = 0.004
ORIGIN = (119.00, 33.58)

# (outbound mean, outbound sd, return mean, return sd) in hours
DEFAULT_TIMING = [
    (7.5, 0.5, 17.5, 0.6),
    (9.5, 0.7, 14.0, 0.9),
    (12.5, 0.6, 20.0, 0.7),
    (10.5, 1.5, 16.0, 1.5),
]
DEFAULT_NS = [(87.0, 0.40), (91.0, 0.40), (92.0, 0.40), (71.0, 0.42)]
DEFAULT_DAY_SD = [0.05, 0.1, 0.1, 0.4]

SERVICE_START = 5 * 3600 + 30 * 60
SERVICE_END = 22 * 3600 + 30 * 60


@dataclass
class CityConfig:
    n_areas: int = 4
    routes_per_area: int = 2
    n_patterns: int = 4
    pattern_sizes: list = field(default_factory=lambda: [500, 500, 500, 500])
    preference: float = 0.9
    layout: str = "area"
    timing: list = field(default_factory=lambda: [list(t) for t in DEFAULT_TIMING])
    ns_lognormal: list = field(default_factory=lambda: [list(t) for t in DEFAULT_NS])
    day_sd: list = field(default_factory=lambda: list(DEFAULT_DAY_SD))
    jitter_minutes: float = 8.0
    days: int = 7
    start_date: str = "2019-11-04"
    headway_minutes: int = 8
    layover_minutes: int = 5
    capacity: int = 80
    min_stay_minutes: int = 10
    unmatched_fraction: float = 0.05
    drop_bus_days: int = 1
    legs_per_passenger: int | None = None
    seed: int = 0

    @property
    def n_routes(self):
        return self.n_areas * self.routes_per_area

    @property
    def stops_per_area(self):
        return len({s for r in AREA_ROUTES[: self.routes_per_area] for s in r})

    @property
    def n_stops(self):
        return self.n_areas * self.stops_per_area

    @property
    def n_passengers(self):
        return int(sum(self.pattern_sizes))

    def preference_weights(self):
        """Pattern x route weights; each row sums to 1.

        ``area`` layout: a pattern prefers both routes of its own area.
        ``chained`` layout: it prefers its area's trunk and the next area's
        detour, so two patterns meet at every area's hub stops.
        """
        w = np.zeros((self.n_patterns, self.n_routes))
        rpa = self.routes_per_area
        for p in range(self.n_patterns):
            area = p % self.n_areas
            if self.layout == "chained" and rpa == 2:
                own = [area * rpa, ((area + 1) % self.n_areas) * rpa + 1]
            else:
                own = [area * rpa + k for k in range(rpa)]
            other = [r for r in range(self.n_routes) if r not in own]
            if other:
                w[p, own] = self.preference / len(own)
                w[p, other] = (1.0 - self.preference) / len(other)
            else:
                w[p, own] = 1.0 / len(own)
        return w

    def validate(self):
        problems = []
        if self.n_areas < 1 or self.routes_per_area not in (1, 2):
            problems.append("need n_areas >= 1 and routes_per_area in {1, 2}")
        if self.n_patterns < 1 or len(self.pattern_sizes) != self.n_patterns:
            problems.append("pattern_sizes must list one count per pattern")
        if any(n < 0 for n in self.pattern_sizes):
            problems.append("pattern sizes must be non-negative")
        for name in ("timing", "ns_lognormal", "day_sd"):
            if len(getattr(self, name)) < self.n_patterns:
                problems.append(f"{name} needs an entry per pattern")
        if self.layout not in ("area", "chained"):
            problems.append("layout must be 'area' or 'chained'")
        if not 0.0 <= self.preference <= 1.0:
            problems.append("preference must lie in [0, 1]")
        if not 0.0 <= self.unmatched_fraction < 1.0:
            problems.append("unmatched_fraction must lie in [0, 1)")
        if self.days < 1 or self.headway_minutes < 1 or self.capacity < 1:
            problems.append("days, headway and capacity must be positive")
        if problems:
            raise GeneratorError("; ".join(problems))


@dataclass
class City:
    config: CityConfig
    rides: list
    events: list
    registry: StopRegistry
    ground_truth: dict


# -- network and timetable -------------------------------------------------


def _network(cfg):
    coords, sequences = {}, {}
    used = sorted({s for r in AREA_ROUTES[: cfg.routes_per_area] for s in r})
    local = {s: k for k, s in enumerate(used)}
    side = max(1, math.ceil(math.sqrt(cfg.n_areas)))
    for a in range(cfg.n_areas):
        ox = ORIGIN[0] + (a % side) * 8 * GRID_DEG
        oy = ORIGIN[1] + (a // side) * 5 * GRID_DEG
        for s in used:
            sid = f"S{a * len(used) + local[s] + 1:03d}"
            gx, gy = AREA_POINTS[s]
            coords[sid] = (round(ox + gx * GRID_DEG, 6), round(oy + gy * GRID_DEG, 6))
        for k in range(cfg.routes_per_area):
            rid = str(a * cfg.routes_per_area + k + 1)
            seq = [f"S{a * len(used) + local[s] + 1:03d}" for s in AREA_ROUTES[k]]
            sequences[(rid, 0)] = seq
            sequences[(rid, 1)] = list(reversed(seq))
    return StopRegistry(coords, sequences)


def _segment_seconds(registry, a, b):
    from .graphs import haversine_m

    return 90 + haversine_m(*registry.coords[a], *registry.coords[b]) / 8.0


def _timetable(cfg, registry, days, rng):
    """Bus runs per route: each bus alternates directions with a layover.

    Returns the runs and an index ``(route, dir, stop, day) -> sorted
    [(enter_seconds, run_id, position)]``.
    """
    runs = []  # (bus, day_index, route, direction, [(stop, enter_s, leave_s)])
    routes = sorted({r for r, _ in registry.sequences}, key=int)
    headway = cfg.headway_minutes * 60
    for di in range(len(days)):
        for route in routes:
            seq0 = registry.sequences[(route, 0)]
            base = sum(_segment_seconds(registry, a, b) for a, b in zip(seq0, seq0[1:])) + 25 * len(seq0)
            cycle = 2 * (base + 60 + cfg.layover_minutes * 60)
            fleet = max(1, math.ceil(cycle / headway))
            for k in range(fleet):
                bus = f"B{int(route):02d}{k:02d}"
                t = SERVICE_START + k * headway
                direction = 0
                while t <= SERVICE_END:
                    seq = registry.sequences[(route, direction)]
                    stops = []
                    clock = float(t)
                    for i, s in enumerate(seq):
                        if i:
                            clock += _segment_seconds(registry, seq[i - 1], s) + rng.uniform(0, 30)
                        enter = int(round(clock))
                        dwell = int(rng.integers(10, 41))
                        stops.append((s, enter, enter + dwell))
                        clock = enter + dwell
                    runs.append((bus, di, route, direction, stops))
                    t = int(clock) + cfg.layover_minutes * 60
                    direction = 1 - direction
    index = defaultdict(list)
    for run_id, (_bus, di, route, direction, stops) in enumerate(runs):
        for pos, (s, enter, _leave) in enumerate(stops):
            index[(route, direction, s, di)].append((enter, run_id, pos))
    for v in index.values():
        v.sort()
    return runs, index


# -- passengers ------------------------------------------------------------


def _daily_weights(cfg, rng):
    return np.exp(rng.normal(0.0, 1.0, size=(cfg.n_patterns, cfg.days)) * np.asarray(cfg.day_sd)[: cfg.n_patterns, None])


def _plan_days(n_trips, weights, rng, cap=3):
    """Spread round trips over days with probability proportional to ``weights``."""
    counts = np.zeros(weights.size, dtype=int)
    p = weights / weights.sum()
    for _ in range(n_trips):
        open_days = counts < cap
        if not open_days.any():
            break
        q = np.where(open_days, p, 0.0)
        counts[rng.choice(weights.size, p=q / q.sum())] += 1
    return counts


def _board(index, runs, load, capacity, route, direction, stop, day, t):
    """First run on (route, direction) reaching ``stop`` at or after ``t`` with room."""
    lst = index.get((route, direction, stop, day), [])
    k = bisect.bisect_left(lst, (int(t), -1, -1))
    while k < len(lst):
        enter, run_id, pos = lst[k]
        if load[run_id] < capacity:
            load[run_id] += 1
            return run_id, pos
        k += 1
    return None


def generate_city(config: CityConfig) -> City:
    """Build rides, stop events, stop registry and ground truth for ``config``."""
    cfg = config
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    rng_net, rng_pax, rng_ride, rng_drop = (np.random.default_rng(s) for s in root.spawn(4))
    registry = _network(cfg)
    start = date.fromisoformat(cfg.start_date)
    days = [start + timedelta(days=i) for i in range(cfg.days)]
    runs, index = _timetable(cfg, registry, days, rng_net)
    routes = sorted({r for r, _ in registry.sequences}, key=int)
    route_seq = {r: registry.sequences[(r, 0)] for r in routes}

    n_runs_per_route_day = defaultdict(int)
    for _bus, di, route, direction, _ in runs:
        n_runs_per_route_day[(route, direction, di)] += 1

    weights = cfg.preference_weights()
    daily = _daily_weights(cfg, rng_pax)
    cards = [f"{i:08d}" for i in rng_pax.permutation(np.arange(10_000_000, 10_000_000 + cfg.n_passengers))]
    labels = np.repeat(np.arange(cfg.n_patterns), cfg.pattern_sizes)

    # planned legs: (card, pattern, day, t_seconds, route, from_pos, to_pos, leg_kind)
    load = defaultdict(int)
    boardings = []  # (card, run_id, pos, pattern, route, leg_index)
    demand = defaultdict(int)
    legs_all = []
    for i, card in enumerate(cards):
        p = int(labels[i])
        out_mu, out_sd, back_mu, back_sd = cfg.timing[p]
        c, w = cfg.ns_lognormal[p]
        target = float(c * math.exp(w * rng_pax.normal()))
        t_out = float(np.clip(rng_pax.normal(out_mu, out_sd), 5.75, 20.0)) * 3600
        t_back = float(np.clip(rng_pax.normal(back_mu, back_sd), t_out / 3600 + 1.0, 21.25)) * 3600
        habits = {}

        def habit(route):
            if route not in habits:
                n = len(route_seq[route])
                a, b = rng_pax.choice(n, size=2, replace=False)
                habits[route] = (int(a), int(b))
            return habits[route]

        if cfg.legs_per_passenger is not None:
            route = routes[int(rng_pax.choice(len(routes), p=weights[p]))]
            a, b = habit(route)
            for leg in range(cfg.legs_per_passenger):
                src, dst = (a, b) if leg % 2 == 0 else (b, a)
                legs_all.append((card, p, (leg // 2) % cfg.days, t_out if leg % 2 == 0 else t_back,
                                 route, src, dst, leg))
            continue
        # round trips until the planted stop count is reached
        trips = []
        total = 0
        while total < target or not trips:
            route = routes[int(rng_pax.choice(len(routes), p=weights[p]))]
            a, b = habit(route)
            trips.append((route, a, b))
            total += 2 * (abs(a - b) + 1)
        counts = _plan_days(len(trips), daily[p], rng_pax)
        k = 0
        leg = 0
        span = t_back - t_out
        for di in range(cfg.days):
            m = int(counts[di])
            last = -math.inf
            for j in range(m):
                route, a, b = trips[k]
                k += 1
                jit = rng_pax.normal(0.0, cfg.jitter_minutes * 60, size=2)
                go = t_out + j * span / m + jit[0]
                back = t_back + jit[1] if j == m - 1 else go + 0.6 * span / m
                # keep each passenger's legs in plan order under jitter
                go = max(go, last + 60.0)
                back = max(back, go + 60.0)
                last = back
                legs_all.append((card, p, di, go, route, a, b, leg))
                legs_all.append((card, p, di, back, route, b, a, leg + 1))
                leg += 2

    for card, p, di, t, route, a, b, _leg in legs_all:
        demand[(route, 0 if b > a else 1, di)] += 1
    for key, n in sorted(demand.items()):
        if n > n_runs_per_route_day[key] * cfg.capacity:
            raise GeneratorError(
                f"route {key[0]} direction {key[1]} day {key[2]}: {n} boardings exceed "
                f"{n_runs_per_route_day[key]} runs x capacity {cfg.capacity}"
            )

    # board legs in time order so capacity is first come, first served
    legs_all.sort(key=lambda L: (L[2], L[3], L[0], L[7]))
    arrival = {}
    skipped = 0
    for card, p, di, t, route, a, b, leg in legs_all:
        direction = 0 if b > a else 1
        seq = registry.sequences[(route, direction)]
        origin = route_seq[route][a]
        dest = route_seq[route][b]
        prev = arrival.get((card, di))
        if prev is not None:
            t = max(t, prev + cfg.min_stay_minutes * 60)
        t = max(t, SERVICE_START)
        hit = _board(index, runs, load, cfg.capacity, route, direction, origin, di, t)
        if hit is None:
            skipped += 1
            continue
        run_id, pos = hit
        stops = runs[run_id][4]
        dest_pos = seq.index(dest)
        arrival[(card, di)] = stops[dest_pos][1]
        boardings.append((card, run_id, pos, p, route, dest_pos))

    dropped = []
    if cfg.drop_bus_days:
        keys = sorted({(runs[r][0], runs[r][1]) for _, r, *_ in boardings})
        for k in rng_drop.choice(len(keys), size=min(cfg.drop_bus_days, len(keys)), replace=False):
            dropped.append(keys[int(k)])
    dropped_set = set(dropped)

    rides, injected = [], 0
    shares = np.zeros((cfg.n_patterns, len(routes)))
    ridx = {r: k for k, r in enumerate(routes)}
    ns_realized = defaultdict(int)
    for card, run_id, pos, p, route, dest_pos in boardings:
        bus, di, _route, _direction, stops = runs[run_id]
        _, enter, leave = stops[pos]
        if rng_ride.random() < cfg.unmatched_fraction:
            # (20 s, 40 s] past the dwell: outside tau = 20, before the next stop
            t = leave + int(rng_ride.integers(21, 41))
            injected += 1
        else:
            t = int(rng_ride.integers(enter - 5, leave + 16))
        ts = datetime.combine(days[di], datetime.min.time()) + timedelta(seconds=int(t))
        ctype = 1 if p == 1 else 0
        rides.append(RideRecord(bus, card, ctype, ts, route))
        shares[p, ridx[route]] += 1
        ns_realized[card] += abs(dest_pos - pos) + 1

    events = []
    for run_id, (bus, di, route, direction, stops) in enumerate(runs):
        if (bus, di) in dropped_set:
            continue
        for s, enter, leave in stops:
            base = datetime.combine(days[di], datetime.min.time())
            events.append(StopEvent(bus, base + timedelta(seconds=enter), base + timedelta(seconds=leave),
                                    s, route, direction, leave - enter))

    rides.sort(key=lambda r: (r.riding_time, r.bus_no, r.card_no))
    events.sort(key=lambda e: (e.enter_time, e.bus_no))
    col = shares.sum(axis=0)
    share = np.divide(shares, col, out=np.zeros_like(shares), where=col > 0)
    truth = {
        "labels": {card: int(labels[i]) for i, card in enumerate(cards)},
        "pattern_sizes": [int(n) for n in cfg.pattern_sizes],
        "routes": routes,
        "route_shares": {str(p): {r: float(share[p, ridx[r]]) for r in routes} for p in range(cfg.n_patterns)},
        "preference_weights": weights.tolist(),
        "ns_lognormal": {str(p): {"c": cfg.ns_lognormal[p][0], "w": cfg.ns_lognormal[p][1]}
                         for p in range(cfg.n_patterns)},
        "ns_realized": {card: int(ns_realized[card]) for card in cards if card in ns_realized},
        "injected_unmatched": injected,
        "skipped_legs": skipped,
        "dropped_bus_days": [[b, days[d].isoformat()] for b, d in sorted(dropped)],
        "config": asdict(cfg),
    }
    log.info("synthetic city: %d rides, %d stop events, %d passengers", len(rides), len(events), len(cards))
    return City(cfg, rides, events, registry, truth)


def write_city(city: City, out_dir):
    """Write ``rides.csv``, ``stop_events.csv``, ``stops.csv`` and ``ground_truth.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "rides.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RIDE_HEADER)
        for r in city.rides:
            w.writerow([r.bus_no, r.card_no, r.card_type, r.riding_time.strftime(TIME_FORMAT), r.route_id])
    with open(out / "stop_events.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_HEADER)
        for e in city.events:
            w.writerow([e.bus_no, e.enter_time.strftime(TIME_FORMAT), e.leave_time.strftime(TIME_FORMAT),
                        e.stop_id, e.route_id, e.direct_id, e.stay_time])
    write_registry(city.registry, out / "stops.csv")
    (out / "ground_truth.json").write_text(json.dumps(city.ground_truth, indent=1, sort_keys=True))
    return out
