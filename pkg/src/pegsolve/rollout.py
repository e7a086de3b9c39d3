"""Batched episode collection, reference actions and advantage estimation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .game import DEFAULT_RULES, GameSpec, Rules, VecEpisodes

# prob_fn(game_index, ploc[M,n], eloc[M], member[M], t[M], mask[M,A]) -> probs[M,A]
ProbFn = Callable[[int, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
# value_fn(game_index, ploc[S,n], eloc[S], t[S]) -> values[S]
ValueFn = Callable[[int, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class EpisodeBatch:
    """Rollout data.

    Member rows (one per pursuer member per step) hold observations, legal
    masks, sampled and reference actions. Step rows (one per joint step) hold
    the central state, value estimate, reward and advantage; ``step_of`` links
    each member row to its step row.
    """

    game: np.ndarray
    ploc: np.ndarray
    eloc: np.ndarray
    member: np.ndarray
    t: np.ndarray
    mask: np.ndarray
    action: np.ndarray
    ref_action: np.ndarray
    logp: np.ndarray
    step_of: np.ndarray
    s_game: np.ndarray
    s_ploc: np.ndarray
    s_eloc: np.ndarray
    s_t: np.ndarray
    s_value: np.ndarray
    s_reward: np.ndarray
    s_done: np.ndarray
    s_episode: np.ndarray
    episode_returns: np.ndarray
    adv: np.ndarray | None = None
    ret: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.action)

    @property
    def n_steps(self) -> int:
        return len(self.s_reward)


def sample_slots(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw per row; zero-probability slots are never returned."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(probs)) * cdf[:, -1]
    slots = (cdf < u[:, None]).sum(axis=1)
    last = probs.shape[1] - 1 - np.argmax(probs[:, ::-1] > 0, axis=1)
    return np.minimum(slots, last)


def collect(
    specs: Sequence[GameSpec],
    exits_per_game: Sequence[np.ndarray],
    prob_fn: ProbFn,
    rng: np.random.Generator,
    n_slots: int,
    value_fn: ValueFn | None = None,
    with_reference: bool = False,
    rules: Rules = DEFAULT_RULES,
) -> EpisodeBatch:
    """Roll out one vectorized batch of episodes per game.

    ``exits_per_game[g]`` lists the exit chosen for each episode of game g.
    """
    cols: dict[str, list] = {k: [] for k in (
        "game", "ploc", "eloc", "member", "t", "mask", "action", "ref", "logp", "step_of",
        "s_game", "s_ploc", "s_eloc", "s_t", "s_value", "s_reward", "s_done", "s_episode")}
    returns = []
    n_steps = 0
    episode_base = 0
    for g, (spec, exits) in enumerate(zip(specs, exits_per_game)):
        sim = VecEpisodes(spec, exits, rng, n_slots, rules)
        n = spec.n_pursuers
        dist = spec.graph.distances
        while True:
            idx = sim.active()
            if len(idx) == 0:
                break
            b = len(idx)
            ploc_s = sim.ploc[idx].copy()
            eloc_s = sim.eloc[idx].copy()
            t_s = np.full(b, sim.t, dtype=np.int32)
            ploc = np.repeat(ploc_s, n, axis=0)
            eloc = np.repeat(eloc_s, n)
            member = np.tile(np.arange(n, dtype=np.int32), b)
            t = np.full(b * n, sim.t, dtype=np.int32)
            mask = sim.legal_mask(idx).reshape(b * n, -1)
            probs = np.asarray(prob_fn(g, ploc, eloc, member, t, mask), dtype=np.float64)
            slots = sample_slots(probs, rng)
            if with_reference:
                ref = kernels.reference_actions(
                    dist, sim.table, np.ascontiguousarray(sim.paths[idx]),
                    np.ascontiguousarray(sim.lengths[idx]), t_s, np.ascontiguousarray(ploc_s),
                ).reshape(-1)
            else:
                ref = np.full(b * n, -1, dtype=np.int64)
            values = value_fn(g, ploc_s, eloc_s, t_s) if value_fn is not None else np.zeros(b)
            reward = sim.step(idx, slots.reshape(b, n))
            rows = np.arange(b * n)
            cols["game"].append(np.full(b * n, g))
            cols["ploc"].append(ploc)
            cols["eloc"].append(eloc)
            cols["member"].append(member)
            cols["t"].append(t)
            cols["mask"].append(mask)
            cols["action"].append(slots)
            cols["ref"].append(ref)
            cols["logp"].append(np.log(np.maximum(probs[rows, slots], 1e-300)))
            cols["step_of"].append(n_steps + np.repeat(np.arange(b), n))
            cols["s_game"].append(np.full(b, g))
            cols["s_ploc"].append(ploc_s)
            cols["s_eloc"].append(eloc_s)
            cols["s_t"].append(t_s)
            cols["s_value"].append(np.asarray(values, dtype=np.float64))
            cols["s_reward"].append(reward)
            cols["s_done"].append(sim.done[idx].copy())
            cols["s_episode"].append(episode_base + idx)
            n_steps += b
        returns.append(sim.reward.copy())
        episode_base += sim.batch
    width = n_slots
    n_p = specs[0].n_pursuers if specs else 1

    def cat(key, shape_tail=(), dtype=None):
        if not cols[key]:
            return np.zeros((0, *shape_tail), dtype=dtype or np.float64)
        return np.concatenate(cols[key])

    return EpisodeBatch(
        game=cat("game", dtype=np.int64), ploc=cat("ploc", (n_p,), np.int32), eloc=cat("eloc", dtype=np.int32),
        member=cat("member", dtype=np.int32), t=cat("t", dtype=np.int32),
        mask=cat("mask", (width,), bool), action=cat("action", dtype=np.int64),
        ref_action=cat("ref", dtype=np.int64), logp=cat("logp"), step_of=cat("step_of", dtype=np.int64),
        s_game=cat("s_game", dtype=np.int64), s_ploc=cat("s_ploc", (n_p,), np.int32),
        s_eloc=cat("s_eloc", dtype=np.int32), s_t=cat("s_t", dtype=np.int32), s_value=cat("s_value"),
        s_reward=cat("s_reward"), s_done=cat("s_done", dtype=bool), s_episode=cat("s_episode", dtype=np.int64),
        episode_returns=np.concatenate(returns) if returns else np.zeros(0),
    )


def gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray, episodes: np.ndarray,
        gamma: float = 0.99, lam: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates and returns for step rows.

    Rows of one episode must appear in time order; the step after the last
    row of an episode is terminal (value 0).
    """
    n = len(rewards)
    adv = np.zeros(n)
    order = np.lexsort((np.arange(n), episodes))
    running = 0.0
    next_value = 0.0
    prev_ep = None
    for k in order[::-1]:
        if episodes[k] != prev_ep or dones[k]:
            running, next_value = 0.0, 0.0
        delta = rewards[k] + gamma * next_value - values[k]
        running = delta + gamma * lam * running
        adv[k] = running
        next_value = values[k]
        prev_ep = episodes[k]
    return adv, adv + values


def normalize(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    if len(adv) < 2:
        return adv - adv.mean() if len(adv) else adv
    std = adv.std()
    return (adv - adv.mean()) / (std + eps) if std > eps else adv - adv.mean()


def with_advantages(batch: EpisodeBatch, gamma: float = 0.99, lam: float = 0.95) -> EpisodeBatch:
    batch.adv, batch.ret = gae(batch.s_reward, batch.s_value, batch.s_done, batch.s_episode, gamma, lam)
    return batch
