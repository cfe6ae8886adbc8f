"""Compiled vs numpy kernels on desk-sized inputs.

    python benchmarks/bench_kernels.py [--repeat N] [--json PATH]
"""

import argparse
import json
import timeit

import numpy as np

from mpgcn.graphs import _incidence
from mpgcn.ingest import match_stops
from mpgcn.numerics import SparseMatrix
from mpgcn.numerics.kernels import backends
from mpgcn.synth import CityConfig, generate_city


def spmm_case(n, density, width, seed=0):
    rng = np.random.default_rng(seed)
    dense = rng.normal(size=(n, n)) * (rng.random((n, n)) < density)
    s = SparseMatrix.from_dense(dense)
    d = np.ascontiguousarray(rng.normal(size=(n, width)))
    return s.indptr, np.ascontiguousarray(s.col), np.ascontiguousarray(s.val), d


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="write timings here")
    args = ap.parse_args()

    found = backends()
    city = generate_city(CityConfig(seed=0))
    _, arrays = _incidence(match_stops(city.rides, city.events))
    cases = {
        "spmm 2000x2000 1% x64": ("spmm_csr", spmm_case(2000, 0.01, 64)),
        "spmm 40x40 10% x(12*64*16)": ("spmm_csr", spmm_case(40, 0.10, 12 * 64 * 16)),
        "sharing-stop desk city": ("sharing_stop_upper", arrays),
    }
    results = {}
    for label, (name, inputs) in cases.items():
        row = {}
        for backend, mod in found.items():
            fn = getattr(mod, name)
            row[backend] = min(timeit.repeat(lambda: fn(*inputs), number=1, repeat=args.repeat))
        results[label] = row
    # both backends must agree before their timings mean anything
    if len(found) > 1:
        for label, (name, inputs) in cases.items():
            outs = [getattr(m, name)(*inputs) for m in found.values()]
            for a, b in zip(outs[0] if isinstance(outs[0], tuple) else [outs[0]],
                            outs[1] if isinstance(outs[1], tuple) else [outs[1]]):
                np.testing.assert_allclose(np.asarray(a), np.asarray(b), rtol=1e-12, atol=1e-12)

    width = max(len(k) for k in results)
    print(f"{'case':<{width}}  " + "  ".join(f"{b:>10}" for b in found) + "   speedup")
    for label, row in results.items():
        times = "  ".join(f"{row[b] * 1e3:>8.2f}ms" for b in found)
        speed = row["python"] / row["cython"] if "cython" in row else float("nan")
        print(f"{label:<{width}}  {times}   {speed:6.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=1)


if __name__ == "__main__":
    main()
