"""Undirected, unweighted graphs with cached shortest-path tables."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from . import kernels
from .errors import InputError, NoPathError


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable graph with sorted adjacency lists.

    ``base_ids`` maps each node to its id on the unreduced base map (identity
    when the graph *is* the base map). Embedding tables are indexed by base ids
    so every instance drawn from one map shares a vocabulary of size
    ``base_node_count``.
    """

    node_count: int
    adjacency: tuple[tuple[int, ...], ...]
    coords: tuple[tuple[float, float], ...] | None = None
    base_ids: tuple[int, ...] | None = None
    base_node_count: int | None = None

    def __post_init__(self):
        if len(self.adjacency) != self.node_count:
            raise InputError("adjacency length must equal node_count")
        for v, nbrs in enumerate(self.adjacency):
            if list(nbrs) != sorted(set(nbrs)):
                raise InputError(f"adjacency of node {v} must be sorted and duplicate-free")
            for w in nbrs:
                if not 0 <= w < self.node_count or w == v:
                    raise InputError(f"bad neighbour {w} of node {v}")
                if v not in self.adjacency[w]:
                    raise InputError(f"edge ({v},{w}) is not symmetric")
        if self.coords is not None and len(self.coords) != self.node_count:
            raise InputError("coords length must equal node_count")
        if self.base_ids is None:
            object.__setattr__(self, "base_ids", tuple(range(self.node_count)))
        if self.base_node_count is None:
            object.__setattr__(self, "base_node_count", max(self.base_ids, default=-1) + 1)

    @classmethod
    def from_edges(cls, node_count: int, edges, coords=None, base_ids=None, base_node_count=None) -> "Graph":
        adj = [set() for _ in range(node_count)]
        for u, v in edges:
            u, v = int(u), int(v)
            if not (0 <= u < node_count and 0 <= v < node_count):
                raise InputError(f"edge ({u},{v}) outside [0,{node_count})")
            if u == v:
                continue
            adj[u].add(v)
            adj[v].add(u)
        coords = None if coords is None else tuple((float(x), float(y)) for x, y in coords)
        return cls(
            node_count,
            tuple(tuple(sorted(a)) for a in adj),
            coords,
            None if base_ids is None else tuple(int(b) for b in base_ids),
            base_node_count,
        )

    @classmethod
    def grid(cls, width: int, height: int) -> "Graph":
        edges = []
        for r in range(height):
            for c in range(width):
                v = r * width + c
                if c + 1 < width:
                    edges.append((v, v + 1))
                if r + 1 < height:
                    edges.append((v, v + width))
        coords = [(c, r) for r in range(height) for c in range(width)]
        return cls.from_edges(width * height, edges, coords)

    # identity -------------------------------------------------------------
    @cached_property
    def key(self):
        return (self.node_count, self.adjacency, self.base_ids)

    def __eq__(self, other):
        return isinstance(other, Graph) and self.key == other.key

    def __hash__(self):
        return hash(self.key)

    # derived tables -------------------------------------------------------
    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(v, w) for v, nbrs in enumerate(self.adjacency) for w in nbrs if v < w]

    @property
    def edge_count(self) -> int:
        return sum(len(a) for a in self.adjacency) // 2

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.array([len(a) for a in self.adjacency], dtype=np.int64)

    @cached_property
    def max_degree(self) -> int:
        return int(self.degrees.max()) if self.node_count else 0

    @cached_property
    def csr(self) -> tuple[np.ndarray, np.ndarray]:
        indptr = np.zeros(self.node_count + 1, dtype=np.int32)
        indptr[1:] = np.cumsum(self.degrees)
        indices = np.array([w for a in self.adjacency for w in a], dtype=np.int32)
        return indptr, indices

    @cached_property
    def _bfs(self) -> tuple[np.ndarray, np.ndarray]:
        indptr, indices = self.csr
        return kernels.bfs_all_pairs(indptr, indices)

    @property
    def distances(self) -> np.ndarray:
        """Hop distances, -1 for unreachable pairs."""
        return self._bfs[0]

    @property
    def path_counts(self) -> np.ndarray:
        """Number of distinct shortest paths between each pair (float64)."""
        return self._bfs[1]

    def distance(self, u: int, v: int) -> int:
        return int(self.distances[u, v])

    @cached_property
    def mean_adjacency(self) -> np.ndarray:
        """Row-normalized (A + I), the mean over each closed neighbourhood."""
        a = np.eye(self.node_count)
        for v, nbrs in enumerate(self.adjacency):
            a[v, list(nbrs)] = 1.0
        return a / a.sum(axis=1, keepdims=True)

    def action_table(self, n_slots: int | None = None, strict: bool = False) -> np.ndarray:
        """[V, n_slots] table of legal destination nodes, padded with -1."""
        cache = self.__dict__.setdefault("_action_tables", {})
        need = self.max_degree + (0 if strict else 1)
        n_slots = need if n_slots is None else n_slots
        if (n_slots, strict) not in cache:
            if n_slots < need:
                from .errors import ConfigurationError
                raise ConfigurationError(f"{n_slots} action slots < required {need}")
            table = np.full((self.node_count, n_slots), -1, dtype=np.int32)
            for v in range(self.node_count):
                acts = legal_actions(self, v, strict)
                table[v, : len(acts)] = acts
            cache[(n_slots, strict)] = table
        return cache[(n_slots, strict)]

    def largest_component(self) -> "Graph":
        """Restrict to the largest connected component, re-indexed densely.

        ``base_ids`` of the result keep pointing at the original base map.
        Ties go to the component containing the smallest node id.
        """
        seen = np.full(self.node_count, -1)
        comps = []
        for s in range(self.node_count):
            if seen[s] >= 0:
                continue
            stack, members = [s], []
            seen[s] = len(comps)
            while stack:
                v = stack.pop()
                members.append(v)
                for w in self.adjacency[v]:
                    if seen[w] < 0:
                        seen[w] = len(comps)
                        stack.append(w)
            comps.append(sorted(members))
        best = max(comps, key=len)
        if len(best) == self.node_count:
            return self
        remap = {old: new for new, old in enumerate(best)}
        edges = [(remap[u], remap[v]) for u, v in self.edges if u in remap and v in remap]
        coords = None if self.coords is None else [self.coords[v] for v in best]
        return Graph.from_edges(
            len(best), edges, coords, [self.base_ids[v] for v in best], self.base_node_count
        )

    # serialization ----------------------------------------------------------
    def to_dict(self) -> dict:
        out = {"nodes": self.node_count, "edges": [list(e) for e in self.edges]}
        if self.coords is not None:
            out["coords"] = [list(c) for c in self.coords]
        if self.base_ids != tuple(range(self.node_count)) or self.base_node_count != self.node_count:
            out["base_ids"] = list(self.base_ids)
            out["base_nodes"] = self.base_node_count
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Graph":
        try:
            n = int(data["nodes"])
            edges = data["edges"]
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed map record: {exc}") from exc
        return cls.from_edges(n, edges, data.get("coords"), data.get("base_ids"), data.get("base_nodes"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Graph":
        path = Path(path)
        if not path.exists():
            raise InputError(f"map file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"malformed map file {path}: {exc}") from exc
        return cls.from_dict(data)


def legal_actions(graph: Graph, loc: int, strict: bool = False) -> list[int]:
    """Sorted destinations reachable in one move; includes ``loc`` unless ``strict``."""
    if not 0 <= loc < graph.node_count:
        raise InputError(f"node {loc} outside [0,{graph.node_count})")
    nbrs = set(graph.adjacency[loc])
    if not strict:
        nbrs.add(loc)
    return sorted(nbrs)


def shortest_path_sample(graph: Graph, src: int, dst: int, rng: np.random.Generator) -> list[int]:
    """One shortest path drawn uniformly among all shortest src -> dst paths."""
    paths, lengths = sample_shortest_paths(graph, src, np.array([dst]), rng)
    return [int(v) for v in paths[0, : lengths[0]]]


def sample_shortest_paths(graph: Graph, src: int, dsts: np.ndarray, rng: np.random.Generator):
    """Batched uniform shortest paths. Returns (paths [B, L], lengths [B])."""
    dsts = np.asarray(dsts, dtype=np.int32)
    dist = graph.distances
    hops = dist[src, dsts]
    if (hops < 0).any():
        bad = int(dsts[np.argmin(hops)])
        raise NoPathError(f"no path from {src} to {bad}")
    width = int(hops.max()) if len(dsts) else 0
    uniforms = rng.random((len(dsts), max(width, 1)))
    indptr, indices = graph.csr
    paths, lengths = kernels.sample_paths(
        indptr, indices, dist, graph.path_counts, int(src), dsts, uniforms
    )
    if width == 0:
        paths = paths[:, :1]
    return paths, lengths
