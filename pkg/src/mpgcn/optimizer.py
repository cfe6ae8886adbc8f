"""Passenger route reassignment that evens out per-stop flow.

Candidates for each OD pair are the simple paths in the directed stop
network at most ``eps`` longer than the shortest one. Trips start on their
shortest path and coordinate descent moves one trip at a time to whichever
candidate lowers the population std of (background + trip) flow.
"""

from __future__ import annotations

import csv
import heapq
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, OptimizationError

log = logging.getLogger(__name__)

EPS = 5
CAP = 50
MIN_GAIN = 1e-9
MAX_SWEEPS = 20


@dataclass
class CandidateRouteSet:
    stops: list
    routes: dict  # (origin, dest) -> [path tuple], shortest first
    shortest: dict  # (origin, dest) -> len(r_shortest)
    demand: dict  # (origin, dest) -> trip count
    eps: float
    length: str = "hops"
    capped: list = field(default_factory=list)

    def route_length(self, path, net=None):
        if self.length == "hops":
            return len(path) - 1
        if net is None:
            raise ContractError("distance lengths need the stop network")
        idx = {s: i for i, s in enumerate(net.nodes)}
        return sum(net.adjacency.get(idx[a], idx[b]) for a, b in zip(path, path[1:]))


@dataclass
class AssignmentState:
    trips: list  # (origin, dest) per trip, processing order
    choice: list  # candidate index per trip
    flow: np.ndarray  # trip flow per stop, background excluded
    background: np.ndarray
    objective: float
    initial_objective: float
    initial_flow: np.ndarray
    switches: int = 0
    sweeps: int = 0
    history: list = field(default_factory=list)

    def routes(self, candidates):
        return [candidates.routes[t][c] for t, c in zip(self.trips, self.choice)]


def _edge_costs(net, length):
    succ = [[] for _ in net.nodes]
    pred = [[] for _ in net.nodes]
    for i, j, d in net.adjacency.entries():
        w = 1.0 if length == "hops" else float(d)
        succ[int(i)].append((int(j), w))
        pred[int(j)].append((int(i), w))
    for lst in succ:
        lst.sort()
    return succ, pred


def _dist_from(adj, source, n):
    dist = [math.inf] * n
    dist[source] = 0.0
    heap = [(0.0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v, w in adj[u]:
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


def _bounded_paths(succ, to_target, source, target, limit):
    """All simple paths source -> target with length <= limit (pruned DFS)."""
    out = []
    path = [source]
    on_path = {source}
    stack = [(source, 0.0, iter(succ[source]))]
    tol = 1e-9 * max(1.0, limit)
    while stack:
        u, d, it = stack[-1]
        step = next(it, None)
        if step is None:
            stack.pop()
            on_path.discard(path.pop())
            continue
        v, w = step
        nd = d + w
        if v in on_path or nd + to_target[v] > limit + tol:
            continue
        if v == target:
            out.append((nd, tuple(path + [v])))
            continue
        path.append(v)
        on_path.add(v)
        stack.append((v, nd, iter(succ[v])))
    return out


def generate_candidates(net, od, predicted_flow=None, eps=EPS, cap=CAP, length="hops"):
    """Candidate routes per demanded OD pair.

    ``predicted_flow`` is accepted so callers can pass the forecast the
    routes are chosen against; candidate generation itself is purely
    topological.
    """
    if length not in ("hops", "metres"):
        raise ContractError(f"unknown length {length!r}")
    if eps < 0 or cap < 1:
        raise ContractError("eps must be non-negative and cap positive")
    idx = {s: i for i, s in enumerate(net.nodes)}
    succ, pred = _edge_costs(net, length)
    n = len(net.nodes)
    routes, shortest, demand, capped = {}, {}, {}, []
    to_cache = {}
    for o, d, count in sorted(od.demands(), key=lambda t: (t[0], t[1])):
        if o == d:
            continue
        if o not in idx or d not in idx:
            raise OptimizationError(f"OD pair ({o}, {d}) references a stop outside the network")
        if d not in to_cache:
            to_cache[d] = _dist_from(pred, idx[d], n)
        to_d = to_cache[d]
        best = to_d[idx[o]]
        if math.isinf(best):
            raise OptimizationError(f"OD pair ({o}, {d}) is not connected in the stop network")
        found = _bounded_paths(succ, to_d, idx[o], idx[d], best + eps)
        named = sorted((c, tuple(net.nodes[k] for k in p)) for c, p in found)
        if len(named) > cap:
            capped.append((o, d))
            log.info("candidate cap %d hit for (%s, %s): %d paths", cap, o, d, len(named))
            named = named[:cap]
        routes[(o, d)] = [p for _, p in named]
        shortest[(o, d)] = best if length == "metres" else int(best)
        demand[(o, d)] = int(count)
    return CandidateRouteSet(list(net.nodes), routes, shortest, demand, eps, length, capped)


def recount_flow(routes, stops):
    """Per-stop count of routes visiting each stop."""
    idx = {s: i for i, s in enumerate(stops)}
    f = np.zeros(len(stops), dtype=np.float64)
    for path in routes:
        for s in path:
            if s not in idx:
                raise ContractError(f"route stop {s} is not a known stop")
            f[idx[s]] += 1.0
    return f


def objective(f):
    """Population standard deviation."""
    f = np.asarray(f, dtype=np.float64)
    if f.size == 0:
        raise ContractError("objective needs a non-empty flow vector")
    return float(np.sqrt(np.mean((f - f.mean()) ** 2)))


def _trip_order(candidates, fraction, seed):
    pairs = sorted(candidates.routes, key=lambda k: (-candidates.demand[k], k[0], k[1]))
    trips = [k for k in pairs for _ in range(candidates.demand[k])]
    movable = np.ones(len(trips), dtype=bool)
    if fraction < 1.0:
        rng = np.random.default_rng(seed)
        movable[:] = False
        n_move = int(round(fraction * len(trips)))
        movable[rng.choice(len(trips), size=n_move, replace=False)] = True
    return trips, movable


def optimize_assignment(candidates, base_flow=None, max_sweeps=MAX_SWEEPS, min_gain=MIN_GAIN,
                        fraction=1.0, seed=0):
    """Coordinate descent over trip route choices."""
    if not 0.0 <= fraction <= 1.0:
        raise ContractError("fraction must lie in [0, 1]")
    stops = candidates.stops
    n = len(stops)
    idx = {s: i for i, s in enumerate(stops)}
    bg = np.zeros(n) if base_flow is None else np.asarray(base_flow, dtype=np.float64).copy()
    if bg.shape != (n,):
        raise ContractError(f"base flow has shape {bg.shape}, expected ({n},)")
    for key, rs in candidates.routes.items():
        if not rs:
            raise ContractError(f"OD pair {key} has no candidate routes")
    trips, movable = _trip_order(candidates, fraction, seed)
    cand_idx = {k: [np.array([idx[s] for s in p], dtype=np.intp) for p in rs]
                for k, rs in candidates.routes.items()}
    choice = [0] * len(trips)
    flow = np.zeros(n)
    for t in trips:
        np.add.at(flow, cand_idx[t][0], 1.0)
    initial_flow = flow.copy()
    current = objective(bg + flow)
    initial = current
    history = [initial]
    switches = sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        moved = 0
        for k, t in enumerate(trips):
            options = cand_idx[t]
            if not movable[k] or len(options) == 1:
                continue
            base = flow.copy()
            np.subtract.at(base, options[choice[k]], 1.0)
            total = bg + base
            best_c, best_o = choice[k], current
            for c, path in enumerate(options):
                if c == choice[k]:
                    continue
                trial = total.copy()
                np.add.at(trial, path, 1.0)
                o = objective(trial)
                if o < best_o - min_gain:
                    best_c, best_o = c, o
            if best_c != choice[k]:
                np.add.at(base, options[best_c], 1.0)
                flow = base
                choice[k] = best_c
                current = objective(bg + flow)
                moved += 1
        switches += moved
        history.append(current)
        if moved == 0:
            break
    return AssignmentState(trips, choice, flow, bg, current, initial, initial_flow, switches, sweeps, history)


def exhaustive_optimum(candidates, base_flow=None):
    """Global optimum by enumerating every assignment (small instances only)."""
    trips, _ = _trip_order(candidates, 1.0, 0)
    stops = candidates.stops
    bg = np.zeros(len(stops)) if base_flow is None else np.asarray(base_flow, dtype=np.float64)
    options = [candidates.routes[t] for t in trips]
    best = None
    for combo in itertools.product(*(range(len(o)) for o in options)):
        o = objective(bg + recount_flow([options[k][c] for k, c in enumerate(combo)], stops))
        if best is None or o < best[0]:
            best = (o, combo)
    return best


def write_report(state, candidates, out_dir):
    """``optimization.json`` plus ``flow_before_after.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    routes = state.routes(candidates)
    doc = {
        "objective_before": state.initial_objective,
        "objective_after": state.objective,
        "sweeps": state.sweeps,
        "switches": state.switches,
        "objective_trace": state.history,
        "eps": candidates.eps,
        "length": candidates.length,
        "capped_pairs": [list(p) for p in candidates.capped],
        "trips": [
            {"origin": t[0], "destination": t[1], "route": list(r), "candidate": c,
             "extra_length": (len(r) - 1 - candidates.shortest[t]) if candidates.length == "hops" else None}
            for t, r, c in zip(state.trips, routes, state.choice)
        ],
    }
    (out / "optimization.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    with open(out / "flow_before_after.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stop_id", "background", "before", "after"])
        for i, s in enumerate(candidates.stops):
            w.writerow([s, repr(float(state.background[i])), repr(float(state.background[i] + state.initial_flow[i])),
                        repr(float(state.background[i] + state.flow[i]))])
    return out
