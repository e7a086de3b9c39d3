"""Exact game values by backward induction (test and evaluation oracle).

The evader walks a uniformly sampled shortest path, so it is always at hop
distance ``t`` from its start at time ``t`` and its posterior over the
remaining route depends only on its current node. The pursuer's information
state is therefore (evader node, joint pursuer locations), and a backward
pass over evader nodes in decreasing distance from the start gives the exact
value of the optimal (or of any fixed observation-based) pursuer policy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels
from .errors import InputError, RefusalError
from .game import DEFAULT_RULES, GameSpec, Observation, Rules

MAX_EXPANDED = 10_000_000


def exit_distribution(spec: GameSpec, evader_policy) -> np.ndarray:
    probs = np.asarray(evader_policy, dtype=np.float64)
    if probs.shape != (len(spec.exits),):
        raise InputError(f"evader policy needs {len(spec.exits)} entries, got {probs.shape}")
    if (probs < -1e-12).any() or abs(probs.sum() - 1.0) > 1e-9:
        raise InputError("evader policy must be a probability vector")
    return np.clip(probs, 0.0, None) / probs.sum()


def evader_transitions(spec: GameSpec, evader_policy) -> np.ndarray:
    """[V, V] next-node distribution of the evader given its current node.

    Row x is the posterior-weighted mix over exits e still on a shortest
    route through x of the uniform-path step probabilities N(u,e)/N(x,e).
    """
    probs = exit_distribution(spec, evader_policy)
    g = spec.graph
    dist, count = g.distances, g.path_counts
    s = spec.evader_start
    n = g.node_count
    trans = np.zeros((n, n))
    for x in range(n):
        dsx = dist[s, x]
        if dsx < 0:
            continue
        weights = np.zeros(len(spec.exits))
        for j, e in enumerate(spec.exits):
            if probs[j] == 0 or x == e:
                continue
            if dist[x, e] >= 0 and dist[s, e] == dsx + dist[x, e]:
                weights[j] = probs[j] * count[x, e] / count[s, e]
        if weights.sum() == 0:
            continue
        weights /= weights.sum()
        for j, e in enumerate(spec.exits):
            if weights[j] == 0:
                continue
            for u in g.adjacency[x]:
                if dist[u, e] == dist[x, e] - 1:
                    trans[x, u] += weights[j] * count[u, e] / count[x, e]
    return trans


def _check_size(spec: GameSpec, n_slots: int) -> None:
    n = spec.n_pursuers
    v = spec.graph.node_count
    d = spec.graph.distances[spec.evader_start]
    evader_nodes = int(((d >= 0) & (d < spec.horizon)).sum())
    expanded = evader_nodes * v ** n * n_slots ** n
    if expanded > MAX_EXPANDED:
        raise RefusalError(f"exact solve would expand {expanded:,} state-actions (> {MAX_EXPANDED:,})")


@dataclass
class ExactSolution:
    spec: GameSpec
    value: float
    values: np.ndarray      # [V, V**n] value before the step out of (evader node, joint locs)
    best_joint: np.ndarray  # argmax joint action index, -1 where unused
    table: np.ndarray       # action table used

    def joint_index(self, locs) -> int:
        v = self.spec.graph.node_count
        return int(sum(int(p) * v ** m for m, p in enumerate(locs)))

    def policy(self) -> Callable[[Observation], int]:
        """Deterministic optimal pursuer policy as an observation -> node callable."""
        n_slots = self.table.shape[1]

        def act(obs: Observation) -> int:
            aidx = int(self.best_joint[obs.evader_loc, self.joint_index(obs.pursuer_locs)])
            slot = (aidx // n_slots ** obs.member_id) % n_slots
            return int(self.table[obs.pursuer_locs[obs.member_id], slot])

        return act


def solve_exact(spec: GameSpec, evader_policy, policy_table: np.ndarray | None = None,
                rules: Rules = DEFAULT_RULES) -> ExactSolution:
    table = spec.graph.action_table(None, rules.strict_neighbors)
    if not rules.capture_first:
        raise InputError("exact solver implements the capture-first tie-break only")
    _check_size(spec, table.shape[1])
    trans = evader_transitions(spec, evader_policy)
    evader_dist = spec.graph.distances[spec.evader_start].astype(np.int32)
    values, best = kernels.value_dp(
        table, spec.is_exit.astype(np.uint8), evader_dist, np.ascontiguousarray(trans),
        spec.n_pursuers, spec.horizon, policy_table,
    )
    sol = ExactSolution(spec, 0.0, values, best, table)
    if spec.evader_start in spec.pursuer_starts:
        sol.value = 1.0
    else:
        sol.value = float(values[spec.evader_start, sol.joint_index(spec.pursuer_starts)])
    return sol


def exact_game_value(spec: GameSpec, evader_policy, pursuer_policy=None,
                     rules: Rules = DEFAULT_RULES) -> float:
    """Expected pursuer reward against an evader mixing over exits.

    With ``pursuer_policy`` None this is the optimal pursuer value. Otherwise
    ``pursuer_policy`` is either a probability table [V, V**n, n, A] or a
    batched callable accepted by :func:`policy_table` and is evaluated exactly.
    """
    table = None
    if pursuer_policy is not None:
        table = pursuer_policy if isinstance(pursuer_policy, np.ndarray) else policy_table(
            spec, pursuer_policy, rules)
    return solve_exact(spec, evader_policy, table, rules).value


def policy_table(spec: GameSpec, prob_fn, rules: Rules = DEFAULT_RULES) -> np.ndarray:
    """Tabulate an observation-based pursuer policy over every oracle state.

    ``prob_fn(ploc [M,n], eloc [M], member [M], t [M], mask [M,A])`` returns
    action-slot probabilities [M, A]; the time of each state is the evader's
    hop distance from its start.
    """
    g = spec.graph
    n = spec.n_pursuers
    v = g.node_count
    action_table = g.action_table(None, rules.strict_neighbors)
    n_slots = action_table.shape[1]
    _check_size(spec, n_slots)
    d = g.distances[spec.evader_start]
    xs = np.nonzero((d >= 0) & (d < spec.horizon) & ~spec.is_exit)[0]
    joint = np.arange(v ** n)
    locs = np.stack([(joint // v ** m) % v for m in range(n)], axis=1).astype(np.int32)
    out = np.zeros((v, v ** n, n, n_slots))
    for x in xs:
        ploc = np.repeat(locs, n, axis=0)
        member = np.tile(np.arange(n), len(locs))
        eloc = np.full(len(ploc), x, dtype=np.int32)
        t = np.full(len(ploc), d[x], dtype=np.int32)
        mask = action_table[ploc[np.arange(len(ploc)), member]] >= 0
        probs = np.asarray(prob_fn(ploc, eloc, member, t, mask), dtype=np.float64)
        out[x] = probs.reshape(v ** n, n, n_slots)
    return out


def uniform_prob_fn(ploc, eloc, member, t, mask):
    mask = np.asarray(mask, dtype=float)
    return mask / mask.sum(axis=1, keepdims=True)


def best_exit_values(spec: GameSpec, policy_tables, weights, rules: Rules = DEFAULT_RULES) -> np.ndarray:
    """Pursuer value of a mixture of fixed pursuer policies against each pure exit."""
    vals = np.zeros(len(spec.exits))
    for tab, w in zip(policy_tables, weights):
        if w == 0:
            continue
        for j in range(len(spec.exits)):
            onehot = np.zeros(len(spec.exits))
            onehot[j] = 1.0
            vals[j] += w * solve_exact(spec, onehot, tab, rules).value
    return vals
