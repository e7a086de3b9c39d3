"""Map construction, randomized game sampling and dataset files."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import GenerationError, InputError
from .game import GameSpec
from .graph import Graph

MAX_REJECTIONS = 10_000


@dataclass(frozen=True)
class MapTemplate:
    kind: str = "grid"              # grid | scale_free | file
    width: int = 10
    height: int = 10
    nodes: int = 300
    attach_m: int = 2
    path: str | None = None
    edge_keep_prob: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.edge_keep_prob <= 1.0:
            raise InputError("edge_keep_prob must lie in (0, 1]")
        if self.kind not in ("grid", "scale_free", "file"):
            raise InputError(f"unknown map kind {self.kind!r}")
        if self.kind == "file" and not self.path:
            raise InputError("file maps need a path")


@dataclass(frozen=True)
class InstanceConfig:
    n_pursuers: int = 5
    n_exits: int = 8
    horizon_range: tuple[int, int] = (6, 10)
    min_evader_distance: int = 6
    seed: int = 0
    boundary_exits: bool = False

    def __post_init__(self):
        object.__setattr__(self, "horizon_range", tuple(int(t) for t in self.horizon_range))
        if self.n_exits < 1 or self.n_pursuers < 1:
            raise InputError("need at least one exit and one pursuer")
        if self.horizon_range[0] > self.horizon_range[1] or self.horizon_range[0] < 1:
            raise InputError("horizon_range must satisfy 1 <= T_min <= T_max")
        if self.min_evader_distance < 1:
            raise InputError("min_evader_distance must be >= 1")


def grid_preset(edge_keep_prob: float = 0.8) -> tuple[MapTemplate, InstanceConfig]:
    """10x10 grid, 5 pursuers, 8 exits, T in [6, 10], minimum evader distance 6."""
    return MapTemplate("grid", 10, 10, edge_keep_prob=edge_keep_prob), InstanceConfig()


def scale_free_preset() -> tuple[MapTemplate, InstanceConfig]:
    return MapTemplate("scale_free", nodes=300, attach_m=2), InstanceConfig(min_evader_distance=5)


def _scale_free(nodes: int, m: int, rng: np.random.Generator) -> Graph:
    """Preferential attachment: each new node links to m distinct degree-weighted targets."""
    if nodes <= m:
        raise InputError("scale-free map needs more nodes than attach_m")
    edges = [(i, j) for i in range(m + 1) for j in range(i + 1, m + 1)]
    pool = [v for e in edges for v in e]
    for v in range(m + 1, nodes):
        targets: set[int] = set()
        while len(targets) < m:
            targets.add(pool[int(rng.integers(len(pool)))])
        for w in sorted(targets):
            edges.append((v, w))
            pool.extend((v, w))
    return Graph.from_edges(nodes, edges)


def base_map(template: MapTemplate, rng: np.random.Generator | None = None) -> Graph:
    """The template's map before edge dropout."""
    if template.kind == "grid":
        return Graph.grid(template.width, template.height)
    if template.kind == "scale_free":
        # topology fixed per template so all instances share one vocabulary
        return _scale_free(template.nodes, template.attach_m, np.random.default_rng(template.nodes * 7919 + template.attach_m))
    return Graph.load(template.path)


def build_map(template: MapTemplate, rng: np.random.Generator) -> Graph:
    base = base_map(template, rng)
    if template.edge_keep_prob >= 1.0:
        return base
    edges = base.edges
    keep = rng.random(len(edges)) < template.edge_keep_prob
    dropped = Graph.from_edges(
        base.node_count, [e for e, k in zip(edges, keep) if k], base.coords,
        base.base_ids, base.base_node_count,
    )
    return dropped.largest_component()


def _boundary_nodes(graph: Graph) -> np.ndarray:
    if graph.coords is None:
        raise InputError("boundary exits need node coordinates")
    xy = np.array(graph.coords)
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    on = (xy[:, 0] == lo[0]) | (xy[:, 0] == hi[0]) | (xy[:, 1] == lo[1]) | (xy[:, 1] == hi[1])
    return np.nonzero(on)[0]


def passes_filter(graph: Graph, exits, evader_start: int, min_distance: int) -> bool:
    d = graph.distances[evader_start, list(exits)]
    return bool((d >= 0).all() and d.min() >= min_distance)


def sample_instance(graph: Graph, config: InstanceConfig, rng: np.random.Generator) -> GameSpec:
    n = graph.node_count
    if n < config.n_exits + config.n_pursuers + 1:
        raise GenerationError(
            f"graph has {n} nodes; need >= {config.n_exits + config.n_pursuers + 1}")
    exit_pool = _boundary_nodes(graph) if config.boundary_exits else np.arange(n)
    if len(exit_pool) < config.n_exits:
        raise GenerationError("not enough candidate exit nodes")
    t_lo, t_hi = config.horizon_range
    for _ in range(MAX_REJECTIONS):
        exits = rng.choice(exit_pool, config.n_exits, replace=False)
        others = np.setdiff1d(np.arange(n), exits)
        evader = int(others[rng.integers(len(others))])
        if not passes_filter(graph, exits, evader, config.min_evader_distance):
            continue
        cands = np.setdiff1d(np.arange(n), [evader])
        pursuers = rng.choice(cands, config.n_pursuers, replace=False)
        horizon = int(rng.integers(t_lo, t_hi + 1))
        return GameSpec(graph, tuple(int(e) for e in exits), tuple(int(p) for p in pursuers),
                        evader, horizon)
    raise GenerationError(
        f"{MAX_REJECTIONS} consecutive rejections; min_evader_distance="
        f"{config.min_evader_distance} is too demanding for this map")


@dataclass
class GameDataset:
    instances: list[GameSpec]
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def __getitem__(self, i):
        return self.instances[i]

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(json.dumps({"provenance": self.provenance}) + "\n")
            for spec in self.instances:
                fh.write(json.dumps(spec.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "GameDataset":
        path = Path(path)
        if not path.exists():
            raise InputError(f"dataset file not found: {path}")
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        provenance = {}
        specs = []
        for ln in lines:
            rec = json.loads(ln)
            if "provenance" in rec:
                provenance = rec["provenance"]
            else:
                specs.append(GameSpec.from_dict(rec))
        return cls(specs, provenance)


def instance_seeds(seed: int, count: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def build_dataset(template: MapTemplate, config: InstanceConfig, count: int,
                  rng: np.random.Generator | None = None) -> GameDataset:
    """``count`` filtered instances, each on its own dropout draw of the map."""
    if count < 1:
        raise InputError("dataset count must be >= 1")
    root = config.seed if rng is None else int(rng.integers(2**63))
    specs = []
    for inst_rng in instance_seeds(root, count):
        graph = build_map(template, inst_rng)
        specs.append(sample_instance(graph, config, inst_rng))
    prov = {"template": asdict(template), "config": asdict(config), "root_seed": root, "count": count}
    # JSON-normalized so a saved and reloaded dataset compares equal
    return GameDataset(specs, json.loads(json.dumps(prov)))


def template_from_provenance(prov: dict) -> tuple[MapTemplate, InstanceConfig]:
    return MapTemplate(**prov["template"]), InstanceConfig(**prov["config"])


def split_test_sets(
    train: GameDataset,
    zero_shot_eval: Callable[[GameSpec], float],
    ranges: tuple[tuple[float, float], tuple[float, float]] = ((0.8, 0.9), (0.1, 0.2)),
    size: int = 30,
    sampler: Callable[[np.random.Generator], GameSpec] | None = None,
    rng: np.random.Generator | None = None,
    max_candidates: int = 5000,
) -> tuple[GameDataset, GameDataset]:
    """In-distribution and out-of-distribution test sets filtered by zero-shot utility.

    The first set is drawn from ``train``; the second from fresh samples that
    equal no training game.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    (lo1, hi1), (lo2, hi2) = ranges
    first = []
    for spec in train:
        if lo1 <= zero_shot_eval(spec) <= hi1:
            first.append(spec)
            if len(first) == size:
                break
    if len(first) < size:
        raise GenerationError(f"only {len(first)} training games qualified for range {ranges[0]}")
    if sampler is None:
        template, config = template_from_provenance(train.provenance)

        def sampler(r):
            return sample_instance(build_map(template, r), config, r)

    seen = set(train.instances)
    second = []
    for _ in range(max_candidates):
        spec = sampler(rng)
        if spec in seen:
            continue
        if lo2 <= zero_shot_eval(spec) <= hi2:
            second.append(spec)
            seen.add(spec)
            if len(second) == size:
                break
    if len(second) < size:
        raise GenerationError(f"only {len(second)} fresh games qualified for range {ranges[1]}")
    prov = {"split_of": train.provenance, "ranges": [list(r) for r in ranges]}
    return GameDataset(first, {**prov, "set": "in"}), GameDataset(second, {**prov, "set": "out"})


def write_maps(templates: Iterable[MapTemplate], out_dir, count: int = 1, seed: int = 0) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for ti, template in enumerate(templates):
        for i, r in enumerate(instance_seeds(seed + ti, count)):
            path = out_dir / f"{template.kind}_{ti}_{i}.json"
            build_map(template, r).save(path)
            written.append(path)
    return written
