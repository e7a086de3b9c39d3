"""Population-based game solving: best responses, empirical meta-game and meta-solvers."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from . import kernels
from .errors import ConfigurationError, InputError
from .game import DEFAULT_RULES, GameSpec, Rules, VecEpisodes
from .model import ModelConfig, PursuerPolicy, random_policy
from .nn import masked_softmax
from .oracle import exact_game_value, policy_table, solve_exact
from .policy import Critic
from .ppo import PolicyLearner, PPOConfig, ppo_update
from .rollout import collect, sample_slots

log = logging.getLogger(__name__)

META_SOLVERS = ("uniform", "prd", "regret_matching")


@dataclass(frozen=True)
class PSROConfig:
    epochs: int = 8
    br_episodes: int = 10
    br_batch_episodes: int = 10
    payoff_episodes: int = 64
    evader_episodes_per_exit: int = 64
    temperature: float = 0.2
    meta_solver: str = "regret_matching"
    meta_iters: int = 10_000
    ppo: PPOConfig = field(default_factory=PPOConfig)
    eval_episodes: int = 512
    track_exploitability: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("PSRO needs at least one epoch")
        if self.meta_solver not in META_SOLVERS:
            raise ConfigurationError(f"unknown meta-solver {self.meta_solver!r}")
        if self.br_batch_episodes < 1:
            raise ConfigurationError("br_batch_episodes must be >= 1")


# --- simulation ---------------------------------------------------------------

def play(spec: GameSpec, policy: PursuerPolicy, exits: np.ndarray, rng: np.random.Generator,
         rules: Rules = DEFAULT_RULES) -> np.ndarray:
    """Pursuer reward of one episode per entry of ``exits``."""
    exits = np.asarray(exits)
    if len(exits) == 0:
        return np.zeros(0)
    sim = VecEpisodes(spec, exits, rng, policy.table.shape[1], rules)
    n = spec.n_pursuers
    while True:
        idx = sim.active()
        if len(idx) == 0:
            return sim.reward.copy()
        b = len(idx)
        ploc = np.repeat(sim.ploc[idx], n, axis=0)
        mask = sim.legal_mask(idx).reshape(b * n, -1)
        probs = policy.probs(ploc, np.repeat(sim.eloc[idx], n), np.tile(np.arange(n), b),
                             np.full(b * n, sim.t), mask)
        sim.step(idx, sample_slots(probs, rng).reshape(b, n))


def _draw_exits(spec: GameSpec, probs, count: int, rng: np.random.Generator) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    return np.asarray(spec.exits)[rng.choice(len(spec.exits), count, p=probs / probs.sum())]


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    if len(x) < 2:
        return float(x.mean()), 0.0
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(len(x)))


def estimate_payoff(spec: GameSpec, pursuer: PursuerPolicy, evader, episodes: int,
                    rng: np.random.Generator, rules: Rules = DEFAULT_RULES) -> tuple[float, float]:
    """(mean pursuer reward, standard error) of a pure policy pair."""
    if episodes < 1:
        raise InputError("episodes must be >= 1")
    return _mean_se(play(spec, pursuer, _draw_exits(spec, evader, episodes, rng), rng, rules))


def evader_values(spec: GameSpec, pursuers: Sequence[PursuerPolicy], sigma_p, episodes_per_exit: int,
                  rng: np.random.Generator, rules: Rules = DEFAULT_RULES) -> np.ndarray:
    """Estimated evader value of each exit against the pursuer meta-strategy."""
    sigma_p = np.asarray(sigma_p, dtype=np.float64)
    exits = np.repeat(np.asarray(spec.exits), episodes_per_exit)
    which = rng.choice(len(pursuers), len(exits), p=sigma_p / sigma_p.sum())
    reward = np.zeros(len(exits))
    for i in np.unique(which):
        sel = np.nonzero(which == i)[0]
        reward[sel] = play(spec, pursuers[i], exits[sel], rng, rules)
    return -reward.reshape(len(spec.exits), episodes_per_exit).mean(axis=1)


def softmax_values(values, temperature: float) -> np.ndarray:
    z = np.asarray(values, dtype=np.float64) / temperature
    z = np.exp(z - z.max())
    return z / z.sum()


def evader_br(spec: GameSpec, pursuers, sigma_p, episodes_per_exit: int = 64, temperature: float = 0.2,
              rng: np.random.Generator | None = None, rules: Rules = DEFAULT_RULES) -> np.ndarray:
    if not len(pursuers):
        raise InputError("pursuer population is empty")
    if len(spec.exits) == 1:
        return np.ones(1)
    rng = rng if rng is not None else np.random.default_rng()
    return softmax_values(evader_values(spec, pursuers, sigma_p, episodes_per_exit, rng, rules), temperature)


def pursuer_br(spec: GameSpec, evaders: Sequence[np.ndarray], sigma_e, init: PursuerPolicy,
               budget_episodes: int, cfg: PSROConfig, rng: np.random.Generator,
               critic: Critic | None = None, h_critic: torch.Tensor | None = None,
               train_rep: bool = False, rules: Rules = DEFAULT_RULES) -> PursuerPolicy:
    """Fine-tune a copy of ``init`` against evaders drawn from ``sigma_e``.

    Only the actor vector (plus the representation layer when ``train_rep``)
    and a private copy of the critic are updated.
    """
    if budget_episodes <= 0:
        return init
    policy = init.clone(trainable_rep=train_rep)
    critic = copy.deepcopy(critic) if critic is not None else Critic(
        policy.rep.central_width, 0, seed=int(rng.integers(2**31)), dtype=policy.flat.dtype)
    if critic.game_width == 0:
        h_critic = None
    for p in critic.parameters():
        p.requires_grad_(True)
    learner = PolicyLearner(policy, critic, cfg.ppo, h_critic, train_rep)
    sigma_e = np.asarray(sigma_e, dtype=np.float64)
    n_slots = policy.table.shape[1]
    done = 0

    def prob_fn(g, ploc, eloc, member, t, mask):
        with torch.no_grad():
            logits = policy.logits(ploc, eloc, member, t, flat=learner.flat)
            return masked_softmax(logits, torch.as_tensor(mask)).double().numpy()

    while done < budget_episodes:
        count = min(cfg.br_batch_episodes, budget_episodes - done)
        which = rng.choice(len(evaders), count, p=sigma_e / sigma_e.sum())
        exits = np.array([_draw_exits(spec, evaders[j], 1, rng)[0] for j in which])
        batch = collect([spec], [exits], prob_fn, rng, n_slots, learner.value_fn(), rules=rules)
        if len(batch):
            ppo_update(learner, batch, cfg.ppo, 0.0, rng)
        done += count
    out = PursuerPolicy(policy.arch, learner.flat.detach().clone(), policy.rep, policy.base_ids,
                        policy.h_aug, policy.table, "br")
    for p in out.rep.parameters():
        p.requires_grad_(False)
    return out


# --- meta-game ----------------------------------------------------------------

def meta_solve(payoff, method: str = "regret_matching", iters: int = 10_000) -> tuple[np.ndarray, np.ndarray]:
    """Meta-strategies (row, column) of the zero-sum matrix game with row payoff ``payoff``."""
    u = np.ascontiguousarray(np.asarray(payoff, dtype=np.float64))
    if u.ndim != 2 or u.size == 0:
        raise InputError("payoff must be a non-empty matrix")
    if not np.isfinite(u).all():
        raise InputError("payoff matrix has non-finite entries")
    m, k = u.shape
    row0, col0 = np.full(m, 1.0 / m), np.full(k, 1.0 / k)
    if method == "uniform" or (m == 1 and k == 1):
        return row0, col0
    if method == "regret_matching":
        row, col = kernels.regret_matching(u, int(iters), row0, col0)
    elif method == "prd":
        row, col, _, _ = kernels.projected_replicator(u, int(iters), 1e-2, 1e-3, row0, col0)
    else:
        raise ConfigurationError(f"unknown meta-solver {method!r}")
    row, col = np.asarray(row), np.asarray(col)
    return row / row.sum(), col / col.sum()


@dataclass
class MetaGame:
    pursuers: list[PursuerPolicy]
    evaders: list[np.ndarray]
    payoff: np.ndarray
    std_error: np.ndarray
    counts: np.ndarray
    sigma_p: np.ndarray
    sigma_e: np.ndarray
    exit_value_cache: dict = field(default_factory=dict, repr=False)

    @property
    def sizes(self) -> tuple[int, int]:
        return len(self.pursuers), len(self.evaders)

    def expand(self, spec: GameSpec, pursuer: PursuerPolicy, evader: np.ndarray, episodes: int,
               rng: np.random.Generator, rules: Rules = DEFAULT_RULES) -> int:
        """Add one policy per side and simulate only the new row and column."""
        self.pursuers.append(pursuer)
        self.evaders.append(np.asarray(evader, dtype=np.float64))
        m, k = self.sizes
        u = np.zeros((m, k))
        se = np.zeros((m, k))
        cnt = np.zeros((m, k), dtype=np.int64)
        u[: m - 1, : k - 1] = self.payoff
        se[: m - 1, : k - 1] = self.std_error
        cnt[: m - 1, : k - 1] = self.counts
        cells = [(m - 1, j) for j in range(k)] + [(i, k - 1) for i in range(m - 1)]
        for i, j in cells:
            u[i, j], se[i, j] = estimate_payoff(spec, self.pursuers[i], self.evaders[j], episodes, rng, rules)
            cnt[i, j] = episodes
        self.payoff, self.std_error, self.counts = u, se, cnt
        return len(cells)


def uniform_evader(spec: GameSpec) -> np.ndarray:
    return np.full(len(spec.exits), 1.0 / len(spec.exits))


def init_meta_game(spec: GameSpec, pursuer: PursuerPolicy, evader: np.ndarray, episodes: int,
                   rng: np.random.Generator, rules: Rules = DEFAULT_RULES) -> MetaGame:
    mean, se = estimate_payoff(spec, pursuer, evader, episodes, rng, rules)
    return MetaGame([pursuer], [np.asarray(evader, dtype=np.float64)], np.array([[mean]]),
                    np.array([[se]]), np.array([[episodes]]), np.ones(1), np.ones(1))


def worst_case_utility(spec: GameSpec, pursuers, sigma_p, evaders, sigma_e, episodes: int,
                       rng: np.random.Generator, rules: Rules = DEFAULT_RULES) -> tuple[float, float]:
    """Monte-Carlo pursuer utility when both sides sample pure policies from their meta-strategies."""
    if episodes < 1:
        raise InputError("episodes must be >= 1")
    sigma_p = np.asarray(sigma_p, dtype=np.float64)
    sigma_e = np.asarray(sigma_e, dtype=np.float64)
    which_p = rng.choice(len(pursuers), episodes, p=sigma_p / sigma_p.sum())
    which_e = rng.choice(len(evaders), episodes, p=sigma_e / sigma_e.sum())
    exits = np.array([_draw_exits(spec, evaders[j], 1, rng)[0] for j in which_e])
    reward = np.zeros(episodes)
    for i in np.unique(which_p):
        sel = np.nonzero(which_p == i)[0]
        reward[sel] = play(spec, pursuers[i], exits[sel], rng, rules)
    return _mean_se(reward)


def _exit_values(spec: GameSpec, meta: MetaGame, i: int, rules: Rules) -> np.ndarray:
    key = id(meta.pursuers[i])
    if key not in meta.exit_value_cache:
        table = policy_table(spec, meta.pursuers[i].probs, rules)
        vals = []
        for j in range(len(spec.exits)):
            onehot = np.zeros(len(spec.exits))
            onehot[j] = 1.0
            vals.append(solve_exact(spec, onehot, table, rules).value)
        meta.exit_value_cache[key] = (meta.pursuers[i], np.array(vals))
    return meta.exit_value_cache[key][1]


def exploitability(spec: GameSpec, meta: MetaGame, rules: Rules = DEFAULT_RULES) -> float:
    """Exact NashConv of (sigma_p, sigma_e); refuses games too large to enumerate."""
    mix = np.zeros(len(spec.exits))
    for w, pe in zip(meta.sigma_e, meta.evaders):
        mix += w * pe
    mix /= mix.sum()
    best_pursuer = exact_game_value(spec, mix, None, rules)
    vals = np.zeros(len(spec.exits))
    for i, w in enumerate(meta.sigma_p):
        if w > 0:
            vals += w * _exit_values(spec, meta, i, rules)
    best_evader = -vals.min()
    return float(best_pursuer + best_evader)


@dataclass
class PSROInit:
    """How each epoch's pursuer best response is seeded.

    ``policy`` set: every BR starts from this policy (generalist modes).
    ``policy`` None: every BR starts from a fresh random actor and
    representation layer built from ``scratch_cfg``.
    """

    policy: PursuerPolicy | None = None
    critic: Critic | None = None
    h_critic: torch.Tensor | None = None
    scratch_cfg: ModelConfig | None = None


def run_psro(spec: GameSpec, init: PSROInit, cfg: PSROConfig = PSROConfig(),
             rng: np.random.Generator | None = None, clock_offset: float = 0.0,
             on_epoch: Callable[[dict], None] | None = None,
             rules: Rules = DEFAULT_RULES) -> tuple[MetaGame, list[dict]]:
    """Run ``cfg.epochs`` PSRO epochs. Wall clock excludes the evaluation passes."""
    rng = rng if rng is not None else np.random.default_rng()
    scratch = init.policy is None
    if scratch and init.scratch_cfg is None:
        raise ConfigurationError("from-scratch PSRO needs scratch_cfg")

    def fresh():
        return random_policy(spec, init.scratch_cfg, int(rng.integers(2**31)))

    clock = 0.0
    t0 = time.perf_counter()
    base = fresh() if scratch else init.policy
    meta = init_meta_game(spec, base, uniform_evader(spec), cfg.payoff_episodes, rng, rules)
    clock += time.perf_counter() - t0
    history = [_epoch_row(spec, meta, 0, clock_offset + clock, cfg, rng, rules)]
    if on_epoch:
        on_epoch(history[-1])
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        new_e = evader_br(spec, meta.pursuers, meta.sigma_p, cfg.evader_episodes_per_exit,
                          cfg.temperature, rng, rules)
        start = fresh() if scratch else init.policy
        new_p = pursuer_br(spec, meta.evaders, meta.sigma_e, start, cfg.br_episodes, cfg, rng,
                           None if scratch else init.critic, None if scratch else init.h_critic,
                           train_rep=scratch, rules=rules)
        meta.expand(spec, new_p, new_e, cfg.payoff_episodes, rng, rules)
        meta.sigma_p, meta.sigma_e = meta_solve(meta.payoff, cfg.meta_solver, cfg.meta_iters)
        clock += time.perf_counter() - t0
        history.append(_epoch_row(spec, meta, epoch, clock_offset + clock, cfg, rng, rules))
        if on_epoch:
            on_epoch(history[-1])
    return meta, history


def _epoch_row(spec, meta: MetaGame, epoch: int, clock: float, cfg: PSROConfig, rng, rules) -> dict:
    util, se = worst_case_utility(spec, meta.pursuers, meta.sigma_p, meta.evaders, meta.sigma_e,
                                  cfg.eval_episodes, rng, rules)
    row = {"epoch": epoch, "wall_clock_s": clock, "worst_case_utility": util, "std_error": se,
           "population_size": len(meta.pursuers), "exploitability_if_available": ""}
    if cfg.track_exploitability:
        row["exploitability_if_available"] = exploitability(spec, meta, rules)
    return row
