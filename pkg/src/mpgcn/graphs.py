"""Sharing-stop passenger graph, stop network and propagation matrices."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GraphError
from .numerics import SparseMatrix
from .numerics import kernels

EARTH_RADIUS_M = 6371008.8


@dataclass
class SharingStopGraph:
    """Passengers linked by weight ``sum_s min(count_i(s), count_j(s))``."""

    nodes: list
    adjacency: SparseMatrix

    @property
    def n(self):
        return len(self.nodes)

    def weight(self, a, b):
        idx = {c: i for i, c in enumerate(self.nodes)}
        return self.adjacency.get(idx[a], idx[b])


@dataclass
class StopNetwork:
    """Directed stop graph; entry (i, j) is the metre distance when a route runs i -> j."""

    nodes: list
    adjacency: SparseMatrix

    @property
    def n(self):
        return len(self.nodes)

    def successors(self):
        out = [[] for _ in self.nodes]
        for i, j, _ in self.adjacency.entries():
            out[i].append(j)
        return out


def _incidence(profile):
    """Sorted passenger-major and stop-major incidence arrays."""
    nodes = sorted(profile.boardings)
    stops = sorted({b.stop_id for bs in profile.boardings.values() for b in bs})
    sidx = {s: k for k, s in enumerate(stops)}
    p_rows, p_stops, p_counts = [], [], []
    for i, card in enumerate(nodes):
        counts = Counter(sidx[b.stop_id] for b in profile.boardings[card])
        for s in sorted(counts):
            p_rows.append(i)
            p_stops.append(s)
            p_counts.append(counts[s])
    p_rows = np.asarray(p_rows, dtype=np.int64)
    p_stops = np.asarray(p_stops, dtype=np.int64)
    p_counts = np.asarray(p_counts, dtype=np.int64)
    p_ptr = np.zeros(len(nodes) + 1, dtype=np.int64)
    np.cumsum(np.bincount(p_rows, minlength=len(nodes)), out=p_ptr[1:])
    order = np.lexsort((p_rows, p_stops))
    s_ptr = np.zeros(len(stops) + 1, dtype=np.int64)
    np.cumsum(np.bincount(p_stops, minlength=len(stops)), out=s_ptr[1:])
    return nodes, (p_ptr, p_stops, p_counts, s_ptr, p_rows[order], p_counts[order])


def build_sharing_stop(profile, kernel=None):
    """Sharing-stop graph via a stop -> passengers inverted index.

    Produces exactly the pairwise min-count weights of the quadratic
    passenger-pair construction; see :func:`build_sharing_stop_naive`.
    """
    if len(profile) == 0:
        raise GraphError("cannot build a sharing-stop graph from an empty profile")
    nodes, arrays = _incidence(profile)
    upper = (kernel or kernels).sharing_stop_upper(*arrays)
    r, c, w = (np.asarray(a) for a in upper)
    n = len(nodes)
    adj = SparseMatrix.from_triplets(
        n, n, np.concatenate([r, c]), np.concatenate([c, r]), np.concatenate([w, w]).astype(np.float64),
        symmetric=True,
    )
    return SharingStopGraph(nodes, adj)


def build_sharing_stop_naive(profile):
    """Direct double loop over passenger pairs and their shared stops."""
    nodes = sorted(profile.boardings)
    stops = {c: [b.stop_id for b in profile.boardings[c]] for c in nodes}
    r, c, w = [], [], []
    for i in range(len(nodes)):
        for j in range(i + 1, len(nodes)):
            si, sj = stops[nodes[i]], stops[nodes[j]]
            shared = set(si) & set(sj)
            if not shared:
                continue
            weight = sum(min(si.count(s), sj.count(s)) for s in shared)
            r += [i, j]
            c += [j, i]
            w += [weight, weight]
    n = len(nodes)
    return SharingStopGraph(nodes, SparseMatrix.from_triplets(n, n, r, c, w, symmetric=True))


def haversine_m(lon1, lat1, lon2, lat2):
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dphi = p2 - p1
    dlmb = math.radians(lon2 - lon1)
    h = math.sin(dphi / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(math.sqrt(h))


def build_stop_network(registry):
    """One directed edge per consecutive stop pair of every route direction."""
    nodes = sorted({s for seq in registry.sequences.values() for s in seq})
    idx = {s: i for i, s in enumerate(nodes)}
    edges = {}
    for key in sorted(registry.sequences):
        seq = registry.sequences[key]
        for a, b in zip(seq, seq[1:]):
            for s in (a, b):
                if s not in registry.coords:
                    raise GraphError(f"stop {s} on route {key[0]} has no coordinates")
            if (idx[a], idx[b]) in edges or a == b:
                continue
            d = haversine_m(*registry.coords[a], *registry.coords[b])
            if d <= 0:
                raise GraphError(f"stops {a} and {b} share coordinates; edge weight must be positive")
            edges[(idx[a], idx[b])] = d
    n = len(nodes)
    keys = sorted(edges)
    adj = SparseMatrix.from_triplets(
        n, n, [k[0] for k in keys], [k[1] for k in keys], [edges[k] for k in keys]
    )
    return StopNetwork(nodes, adj)


def distance_affinity(adjacency, sigma=None):
    """Map distances to similarities ``exp(-d^2 / sigma^2)``; sigma defaults to the median distance."""
    if adjacency.nnz == 0:
        return adjacency
    if sigma is None:
        sigma = float(np.median(adjacency.val))
    return adjacency.map_values(lambda d: np.exp(-(d * d) / (sigma * sigma)))


def normalize(adjacency, symmetrize=False):
    """``D^-1/2 (A + I) D^-1/2`` with degrees taken from ``A + I``.

    With ``symmetrize`` the adjacency is first replaced by ``max(A, A^T)``.
    """
    a = adjacency
    if a.rows != a.cols:
        raise GraphError("adjacency must be square")
    if a.nnz and a.val.min() < 0:
        raise GraphError("adjacency weights must be non-negative")
    n = a.rows
    row, col, val = a.row, a.col, a.val
    if symmetrize:
        t = SparseMatrix(n, n, a.col, a.row, a.val)
        stacked_r = np.concatenate([row, t.row])
        stacked_c = np.concatenate([col, t.col])
        stacked_v = np.concatenate([val, t.val])
        keys = stacked_r * n + stacked_c
        uniq, inv = np.unique(keys, return_inverse=True)
        best = np.zeros(uniq.size)
        np.maximum.at(best, inv, stacked_v)
        row, col, val = uniq // n, uniq % n, best
    diag = np.arange(n)
    row = np.concatenate([row, diag])
    col = np.concatenate([col, diag])
    val = np.concatenate([val, np.ones(n)])
    tilde = SparseMatrix.from_triplets(n, n, row, col, val)
    deg = tilde.row_sums()
    inv_sqrt = 1.0 / np.sqrt(deg)
    scaled = tilde.val * (inv_sqrt[tilde.row] * inv_sqrt[tilde.col])
    out = SparseMatrix(n, n, tilde.row, tilde.col, scaled)
    if out._mirrors():
        out.symmetric = True
    return out


def degree_distribution(graph):
    """Map node degree -> number of nodes with that degree."""
    deg = np.bincount(graph.adjacency.row, minlength=graph.n) if graph.n else np.zeros(0, int)
    return dict(sorted(Counter(deg.tolist()).items()))


def write_edge_list(graph, path, kind):
    """Write ``src,dst,weight`` rows plus a ``<path>.nodes.json`` registry sidecar."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst", "weight"])
        for i, j, v in graph.adjacency.entries():
            w.writerow([graph.nodes[i], graph.nodes[j], repr(v)])
    sidecar = path.with_suffix(".nodes.json")
    sidecar.write_text(json.dumps({"kind": kind, "nodes": graph.nodes, "symmetric": graph.adjacency.symmetric}))
    return sidecar


def read_edge_list(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(".nodes.json").read_text())
    nodes = meta["nodes"]
    idx = {s: i for i, s in enumerate(nodes)}
    r, c, v = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for src, dst, weight in reader:
            r.append(idx[src])
            c.append(idx[dst])
            v.append(float(weight))
    n = len(nodes)
    adj = SparseMatrix.from_triplets(n, n, r, c, v, symmetric=meta["symmetric"])
    cls = SharingStopGraph if meta["kind"] == "sharing_stop" else StopNetwork
    return cls(nodes, adj)
