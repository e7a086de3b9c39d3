"""Time the compiled kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 5] [--csv out.csv]

Each case is run on identical inputs with both backends; outputs are
compared before timing so a speedup is never reported for diverging code.
"""

from __future__ import annotations

import argparse
import csv
import sys
import timeit

import numpy as np

from pegsolve import _pykernels as py
from pegsolve.game import GameSpec
from pegsolve.graph import Graph
from pegsolve.oracle import evader_transitions

try:
    from pegsolve import _ckernels as cy
except ImportError:
    cy = None


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    # long meta-solver runs amplify summation-order rounding to ~1e-8
    return np.allclose(a, b, atol=1e-6)


def cases():
    rng = np.random.default_rng(0)
    g = Graph.grid(15, 15)
    indptr, indices = g.csr
    dist, counts = g.distances, g.path_counts
    yield "bfs_all_pairs grid15x15", lambda k: k.bfs_all_pairs(indptr, indices)

    dst = np.full(512, g.node_count - 1, dtype=np.int32)
    u = rng.random((512, int(dist[0, -1])))
    yield "sample_paths 512 corner-to-corner", lambda k: k.sample_paths(indptr, indices, dist, counts, 0, dst, u)

    paths, lengths = py.sample_paths(indptr, indices, dist, counts, 0, dst, u)
    t = rng.integers(0, lengths).astype(np.int32)
    ploc = rng.integers(g.node_count, size=(512, 3)).astype(np.int32)
    table = g.action_table()
    yield "reference_actions 512x3", lambda k: k.reference_actions(dist, table, paths, lengths, t, ploc)

    g5 = Graph.grid(5, 5)
    spec = GameSpec(g5, (4, 20, 24), (12, 6), 0, 8)
    trans = np.ascontiguousarray(evader_transitions(spec, [0.3, 0.3, 0.4]))
    args = (g5.action_table(), spec.is_exit.astype(np.uint8), g5.distances[0].astype(np.int32), trans, 2,
            spec.horizon, None)
    yield "value_dp grid5x5 2 pursuers T=8", lambda k: k.value_dp(*args)

    U = np.ascontiguousarray(rng.uniform(-1, 1, (20, 20)))
    r0 = c0 = np.full(20, 0.05)
    yield "regret_matching 20x20 10k iters", lambda k: k.regret_matching(U, 10_000, r0, c0)
    yield "projected_replicator 20x20 10k iters", lambda k: k.projected_replicator(U, 10_000, 0.05, 1e-3, r0, c0)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    if cy is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1
    rows = []
    print(f"{'kernel':40s} {'python s':>10s} {'cython s':>10s} {'speedup':>8s}")
    for name, fn in cases():
        if not _same(fn(py), fn(cy)):
            print(f"{name}: backends disagree", file=sys.stderr)
            return 1
        tp = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat))
        tc = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat))
        rows.append({"kernel": name, "python_s": tp, "cython_s": tc, "speedup": tp / tc})
        print(f"{name:40s} {tp:10.5f} {tc:10.5f} {tp / tc:8.1f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
