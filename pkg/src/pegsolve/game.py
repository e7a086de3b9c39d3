"""Pursuit-evasion dynamics: simultaneous moves, shortest-path evader, terminal rewards."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .errors import InputError
from .graph import Graph, legal_actions, sample_shortest_paths

CAPTURE, ESCAPE, TIMEOUT = "capture", "escape", "timeout"
CAUSE_CODES = {None: 0, CAPTURE: 1, ESCAPE: 2, TIMEOUT: 3}
CAUSE_NAMES = {v: k for k, v in CAUSE_CODES.items()}


@dataclass(frozen=True)
class Rules:
    """Rule switches.

    strict_neighbors: actions are neighbours only (no staying in place).
    capture_first: a capture and an escape in the same step count as capture.
    """

    strict_neighbors: bool = False
    capture_first: bool = True


DEFAULT_RULES = Rules()


@dataclass(frozen=True)
class GameSpec:
    graph: Graph
    exits: tuple[int, ...]
    pursuer_starts: tuple[int, ...]
    evader_start: int
    horizon: int

    def __post_init__(self):
        object.__setattr__(self, "exits", tuple(sorted(int(e) for e in self.exits)))
        object.__setattr__(self, "pursuer_starts", tuple(int(p) for p in self.pursuer_starts))
        n = self.graph.node_count
        if not self.exits:
            raise InputError("a game needs at least one exit")
        if len(set(self.exits)) != len(self.exits):
            raise InputError("duplicate exits")
        for v in (*self.exits, *self.pursuer_starts, self.evader_start):
            if not 0 <= v < n:
                raise InputError(f"node {v} outside [0,{n})")
        if self.evader_start in self.exits:
            raise InputError("evader cannot start on an exit")
        if len(self.pursuer_starts) < 1:
            raise InputError("need at least one pursuer")
        if self.horizon < 1:
            raise InputError("horizon must be >= 1")
        d = self.graph.distances[self.evader_start, list(self.exits)]
        if (d < 0).any():
            raise InputError("every exit must be reachable from the evader start")

    @property
    def n_pursuers(self) -> int:
        return len(self.pursuer_starts)

    @cached_property
    def exit_distances(self) -> np.ndarray:
        return self.graph.distances[self.evader_start, list(self.exits)].astype(np.int64)

    @cached_property
    def is_exit(self) -> np.ndarray:
        mask = np.zeros(self.graph.node_count, dtype=bool)
        mask[list(self.exits)] = True
        return mask

    def to_dict(self) -> dict:
        return {
            "graph": self.graph.to_dict(),
            "exits": list(self.exits),
            "pursuer_starts": list(self.pursuer_starts),
            "evader_start": self.evader_start,
            "horizon": self.horizon,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GameSpec":
        try:
            return cls(
                Graph.from_dict(data["graph"]),
                tuple(data["exits"]),
                tuple(data["pursuer_starts"]),
                int(data["evader_start"]),
                int(data["horizon"]),
            )
        except KeyError as exc:
            raise InputError(f"game record missing field {exc}") from exc

    def with_evader_start(self, node: int) -> "GameSpec":
        return GameSpec(self.graph, self.exits, self.pursuer_starts, node, self.horizon)


@dataclass(frozen=True)
class EvaderPlan:
    chosen_exit: int
    path: tuple[int, ...]


def make_plan(spec: GameSpec, exit_node: int, rng: np.random.Generator) -> EvaderPlan:
    paths, lengths = sample_shortest_paths(spec.graph, spec.evader_start, np.array([exit_node]), rng)
    return EvaderPlan(int(exit_node), tuple(int(v) for v in paths[0, : lengths[0]]))


@dataclass(frozen=True)
class Observation:
    pursuer_locs: tuple[int, ...]
    evader_loc: int
    member_id: int
    t: int


@dataclass(frozen=True)
class GameState:
    t: int
    pursuer_locs: tuple[int, ...]
    evader_loc: int
    evader_path: tuple[int, ...]  # remaining path, starting at evader_loc
    terminal: bool = False
    cause: str | None = None
    spec: GameSpec | None = field(default=None, repr=False, compare=False)
    rules: Rules = field(default=DEFAULT_RULES, repr=False, compare=False)

    def observation(self, member_id: int) -> Observation:
        if not 0 <= member_id < len(self.pursuer_locs):
            raise InputError(f"member id {member_id} out of range")
        return Observation(self.pursuer_locs, self.evader_loc, member_id, self.t)


@dataclass(frozen=True)
class StepOutcome:
    reward_p: float
    reward_e: float
    state: GameState


def _terminal_rewards(cause: str | None) -> tuple[float, float]:
    if cause in (CAPTURE, TIMEOUT):
        return 1.0, -1.0
    if cause == ESCAPE:
        return -1.0, 1.0
    return 0.0, 0.0


def reset(spec: GameSpec, plan: EvaderPlan, rules: Rules = DEFAULT_RULES) -> GameState:
    path = tuple(plan.path)
    if not path or path[0] != spec.evader_start:
        raise InputError("evader plan must start at the evader's start node")
    if path[-1] != plan.chosen_exit or plan.chosen_exit not in spec.exits:
        raise InputError("evader plan must end at its chosen exit")
    for a, b in zip(path, path[1:]):
        if b not in spec.graph.adjacency[a]:
            raise InputError(f"evader plan uses non-edge ({a},{b})")
    captured = spec.evader_start in spec.pursuer_starts
    return GameState(
        t=0,
        pursuer_locs=spec.pursuer_starts,
        evader_loc=spec.evader_start,
        evader_path=path,
        terminal=captured,
        cause=CAPTURE if captured else None,
        spec=spec,
        rules=rules,
    )


def initial_rewards(state: GameState) -> tuple[float, float]:
    """Rewards already due at t=0 (non-zero only for an immediate capture)."""
    return _terminal_rewards(state.cause) if state.terminal else (0.0, 0.0)


def step(state: GameState, pursuer_actions: Sequence[int]) -> StepOutcome:
    spec, rules = state.spec, state.rules
    if spec is None:
        raise InputError("state carries no game spec; create it with reset()")
    if state.terminal:
        raise InputError("cannot step a terminal state")
    if len(pursuer_actions) != len(state.pursuer_locs):
        raise InputError(f"expected {len(state.pursuer_locs)} actions, got {len(pursuer_actions)}")
    for i, (loc, act) in enumerate(zip(state.pursuer_locs, pursuer_actions)):
        if int(act) not in legal_actions(spec.graph, loc, rules.strict_neighbors):
            raise InputError(f"illegal action {act} for pursuer member {i} at node {loc}")
    path = state.evader_path[1:] if len(state.evader_path) > 1 else state.evader_path
    evader = path[0]
    pursuers = tuple(int(a) for a in pursuer_actions)
    t = state.t + 1
    captured = evader in pursuers
    escaped = evader in spec.exits
    cause = None
    if captured and escaped:
        cause = CAPTURE if rules.capture_first else ESCAPE
    elif captured:
        cause = CAPTURE
    elif escaped:
        cause = ESCAPE
    elif t >= spec.horizon:
        cause = TIMEOUT
    rp, re = _terminal_rewards(cause)
    nxt = GameState(t, pursuers, evader, path, cause is not None, cause, spec, rules)
    return StepOutcome(rp, re, nxt)


@dataclass
class EpisodeRecord:
    observations: list[list[Observation]] = field(default_factory=list)
    actions: list[tuple[int, ...]] = field(default_factory=list)
    rewards: list[tuple[float, float]] = field(default_factory=list)
    cause: str | None = None
    evader_path: tuple[int, ...] = ()

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def pursuer_return(self) -> float:
        return sum(r[0] for r in self.rewards)

    def to_json(self) -> str:
        return json.dumps({
            "evader_path": list(self.evader_path),
            "observations": [
                [[list(o.pursuer_locs), o.evader_loc, o.member_id, o.t] for o in step_obs]
                for step_obs in self.observations
            ],
            "actions": [list(a) for a in self.actions],
            "rewards": [list(r) for r in self.rewards],
            "cause": self.cause,
        })

    @classmethod
    def from_json(cls, line: str) -> "EpisodeRecord":
        d = json.loads(line)
        obs = [[Observation(tuple(p), e, i, t) for p, e, i, t in s] for s in d["observations"]]
        return cls(obs, [tuple(a) for a in d["actions"]], [tuple(r) for r in d["rewards"]],
                   d["cause"], tuple(d["evader_path"]))


def write_episodes(path, records: Sequence[EpisodeRecord]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_episodes(path) -> list[EpisodeRecord]:
    with open(path) as fh:
        return [EpisodeRecord.from_json(line) for line in fh if line.strip()]


def rollout(
    spec: GameSpec,
    plan: EvaderPlan,
    pursuer_policy: Callable[[Observation], object],
    rng: np.random.Generator | None = None,
    rules: Rules = DEFAULT_RULES,
) -> EpisodeRecord:
    """Play one episode.

    ``pursuer_policy`` maps an observation to a node id, or to a probability
    vector over ``legal_actions`` of that member's location, which is then
    sampled with ``rng``.
    """
    rng = rng if rng is not None else np.random.default_rng()
    state = reset(spec, plan, rules)
    rec = EpisodeRecord(evader_path=tuple(plan.path))
    if state.terminal:
        rec.rewards.append(initial_rewards(state))
        rec.cause = state.cause
        return rec
    while not state.terminal:
        obs = [state.observation(i) for i in range(len(state.pursuer_locs))]
        acts = []
        for o in obs:
            out = pursuer_policy(o)
            if np.ndim(out) == 0:
                acts.append(int(out))
            else:
                legal = legal_actions(spec.graph, o.pursuer_locs[o.member_id], rules.strict_neighbors)
                probs = np.asarray(out, dtype=float)[: len(legal)]
                acts.append(legal[int(rng.choice(len(legal), p=probs / probs.sum()))])
        outcome = step(state, acts)
        rec.observations.append(obs)
        rec.actions.append(tuple(acts))
        rec.rewards.append((outcome.reward_p, outcome.reward_e))
        state = outcome.state
    rec.cause = state.cause
    return rec


class VecEpisodes:
    """Many episodes of one game advanced in lockstep with numpy.

    Every episode shares the clock ``t``; finished episodes are frozen and
    excluded from :meth:`active`.
    """

    def __init__(self, spec: GameSpec, exits_chosen: np.ndarray, rng: np.random.Generator,
                 n_slots: int | None = None, rules: Rules = DEFAULT_RULES):
        self.spec = spec
        self.rules = rules
        self.table = spec.graph.action_table(n_slots, rules.strict_neighbors)
        exits_chosen = np.asarray(exits_chosen, dtype=np.int32)
        self.paths, self.lengths = sample_shortest_paths(spec.graph, spec.evader_start, exits_chosen, rng)
        self.exits_chosen = exits_chosen
        b = len(exits_chosen)
        self.t = 0
        self.ploc = np.tile(np.array(spec.pursuer_starts, dtype=np.int32), (b, 1))
        self.eloc = np.full(b, spec.evader_start, dtype=np.int32)
        self.done = np.zeros(b, dtype=bool)
        self.cause = np.zeros(b, dtype=np.int8)
        self.reward = np.zeros(b)
        self.length = np.zeros(b, dtype=np.int32)
        caught = (self.ploc == self.eloc[:, None]).any(axis=1)
        self.done[caught] = True
        self.cause[caught] = CAUSE_CODES[CAPTURE]
        self.reward[caught] = 1.0

    @property
    def batch(self) -> int:
        return len(self.eloc)

    def active(self) -> np.ndarray:
        return np.nonzero(~self.done)[0]

    def legal_mask(self, idx: np.ndarray) -> np.ndarray:
        """[len(idx), n, n_slots] legal-slot mask of the given episodes."""
        return self.table[self.ploc[idx]] >= 0

    def step(self, idx: np.ndarray, slots: np.ndarray) -> np.ndarray:
        """Advance episodes ``idx`` (all active ones) with action slots [len(idx), n].

        Returns the pursuer reward of each stepped episode.
        """
        nxt = self.table[self.ploc[idx], slots]
        if (nxt < 0).any():
            b, i = np.argwhere(nxt < 0)[0]
            raise InputError(f"illegal action slot {slots[b, i]} for pursuer member {i}")
        self.t += 1
        pos = np.minimum(self.t, self.lengths[idx] - 1)
        evader = self.paths[idx, pos]
        captured = (nxt == evader[:, None]).any(axis=1)
        escaped = self.spec.is_exit[evader]
        timeout = self.t >= self.spec.horizon
        if self.rules.capture_first:
            cap = captured
            esc = escaped & ~captured
        else:
            esc = escaped
            cap = captured & ~escaped
        tmo = ~cap & ~esc & timeout
        reward = np.where(cap | tmo, 1.0, np.where(esc, -1.0, 0.0))
        cause = np.where(cap, 1, np.where(esc, 2, np.where(tmo, 3, 0))).astype(np.int8)
        self.ploc[idx] = nxt
        self.eloc[idx] = evader
        finished = cause > 0
        self.done[idx] = finished
        self.cause[idx] = cause
        self.reward[idx] = reward
        self.length[idx] = self.t
        return reward
