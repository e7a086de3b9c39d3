"""Multi-task pre-training of the pursuer model with interception guidance."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import kernels
from .encoders import GraphEncoder
from .errors import ConfigurationError, InputError
from .game import DEFAULT_RULES, EvaderPlan, GameSpec, GameState, Rules
from .model import ModelConfig, PursuerModel
from .nn import masked_softmax
from .policy import actor_logits
from .ppo import ModelLearner, PPOConfig, ppo_update
from .rollout import collect

log = logging.getLogger(__name__)

METRIC_FIELDS = ("update", "episode", "mean_return", "guidance_loss", "entropy", "wall_clock")


@dataclass(frozen=True)
class PretrainConfig:
    c1: int = 8
    c2: int = 4
    episodes_per_policy: int = 4
    alpha: float = 0.5
    alpha_final: float | None = None   # linear decay target; None keeps alpha constant
    episodes_total: int = 200_000
    ppo: PPOConfig = field(default_factory=PPOConfig)
    train_gnn: bool = False
    target_return: float | None = None
    target_window: int = 5
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.c1 < 1 or self.c2 < 1 or self.episodes_per_policy < 1:
            raise ConfigurationError("c1, c2 and episodes_per_policy must be >= 1")
        for a in (self.alpha, self.alpha if self.alpha_final is None else self.alpha_final):
            if not 0.0 <= a <= 1.0:
                raise ConfigurationError("alpha must lie in [0, 1]")

    def alpha_at(self, progress: float) -> float:
        if self.alpha_final is None:
            return self.alpha
        return self.alpha + (self.alpha_final - self.alpha) * min(max(progress, 0.0), 1.0)


def sample_evader_policy(spec: GameSpec, rng: np.random.Generator) -> np.ndarray:
    """Flat-Dirichlet draw over the game's exits."""
    k = len(spec.exits)
    if k == 1:
        return np.ones(1)
    p = rng.dirichlet(np.ones(k))
    return p / p.sum()


def reference_policy(spec: GameSpec, plan: EvaderPlan, state: GameState,
                     rules: Rules = DEFAULT_RULES) -> list[int]:
    """Interception reference move (a destination node) for every pursuer member."""
    if state.terminal:
        raise InputError("reference policy needs a non-terminal state")
    table = spec.graph.action_table(None, rules.strict_neighbors)
    path = np.asarray(plan.path, dtype=np.int32)[None]
    slots = kernels.reference_actions(
        spec.graph.distances, table, np.ascontiguousarray(path), np.array([len(plan.path)], dtype=np.int32),
        np.array([state.t], dtype=np.int32), np.array([state.pursuer_locs], dtype=np.int32))
    return [int(table[loc, s]) for loc, s in zip(state.pursuer_locs, slots[0])]


@dataclass
class PretrainResult:
    model: PursuerModel
    metrics: list[dict]
    wall_clock: float
    episodes: int
    reached_target_at: float | None = None   # seconds, when target_return was hit


def _sample_exits(spec: GameSpec, cfg: PretrainConfig, rng: np.random.Generator) -> np.ndarray:
    exits = np.asarray(spec.exits)
    out = []
    for _ in range(cfg.c2):
        probs = sample_evader_policy(spec, rng)
        out.append(exits[rng.choice(len(exits), cfg.episodes_per_policy, p=probs)])
    return np.concatenate(out)


def _model_prob_fn(model: PursuerModel, contexts, flats):
    def fn(g, ploc, eloc, member, t, mask):
        with torch.no_grad():
            ctx = contexts[g]
            feats = model.actor_inputs(ctx, ctx.h_aug, ploc, eloc, member, t)
            logits = actor_logits(flats[g], model.arch, feats)
            return masked_softmax(logits, torch.as_tensor(mask)).double().numpy()
    return fn


def _model_value_fn(model: PursuerModel, contexts):
    def fn(g, ploc, eloc, t):
        with torch.no_grad():
            return model.values(contexts[g], contexts[g].h_aug, ploc, eloc, t).double().numpy()
    return fn


def write_metrics(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def pretrain(train_set, model: PursuerModel | None = None, cfg: PretrainConfig = PretrainConfig(),
             rng: np.random.Generator | None = None, gnn: GraphEncoder | None = None,
             model_cfg: dict | None = None, out_dir=None, time_offset: float = 0.0,
             rules: Rules = DEFAULT_RULES) -> PretrainResult:
    """Sample games and evader mixtures, roll out the model's actors, update, repeat.

    ``time_offset`` is added to every logged wall clock (e.g. the Stage-I
    time when comparing against joint training).
    """
    games = list(train_set)
    if not games:
        raise InputError("pre-training needs a non-empty training set")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if model is None:
        mcfg = ModelConfig.for_specs(games, seed=cfg.seed, **(model_cfg or {}))
        model = PursuerModel(mcfg, gnn)
    if cfg.train_gnn:
        for p in model.gnn.parameters():
            p.requires_grad_(True)
    else:
        for p in model.gnn.parameters():
            p.requires_grad_(False)
    ctx_cache: dict[int, object] = {}
    n_slots = model.cfg.n_actions
    metrics: list[dict] = []
    episodes = 0
    update = 0
    reached = None
    t0 = time.perf_counter()
    store_holder = None
    while episodes < cfg.episodes_total:
        picks = rng.choice(len(games), cfg.c1, replace=len(games) < cfg.c1)
        contexts = []
        for gi in picks:
            if gi not in ctx_cache:
                ctx_cache[gi] = model.context(games[gi])
            ctx = ctx_cache[gi]
            if cfg.train_gnn:
                with torch.no_grad():
                    ctx.h_aug = model.embed(ctx)
            contexts.append(ctx)
        with torch.no_grad():
            if model.hyper is not None:
                flats = list(model.hyper(torch.stack([c.h_aug for c in contexts])))
            else:
                flats = [model.shared_actor.detach()] * len(contexts)
        specs = [c.spec for c in contexts]
        exits = [_sample_exits(s, cfg, rng) for s in specs]
        batch = collect(specs, exits, _model_prob_fn(model, contexts, flats), rng, n_slots,
                        _model_value_fn(model, contexts), with_reference=True, rules=rules)
        episodes += len(batch.episode_returns)
        alpha = cfg.alpha_at(episodes / cfg.episodes_total)
        if store_holder is None:
            store_holder = ModelLearner(model, contexts, cfg.ppo, cfg.train_gnn)
        store_holder.contexts = contexts
        parts = ppo_update(store_holder, batch, cfg.ppo, alpha, rng) if len(batch) else {}
        update += 1
        row = {"update": update, "episode": episodes,
               "mean_return": float(batch.episode_returns.mean()),
               "guidance_loss": parts.get("guidance", float("nan")),
               "entropy": parts.get("entropy", float("nan")),
               "wall_clock": time_offset + time.perf_counter() - t0}
        metrics.append(row)
        if update % 50 == 0:
            log.info("update %d episodes %d return %.3f guidance %.3f", update, episodes,
                     row["mean_return"], row["guidance_loss"])
        if out_dir and cfg.checkpoint_every and update % cfg.checkpoint_every == 0:
            model.save(Path(out_dir) / "model.ckpt", {"episodes": episodes, "pretrain": _cfg_dict(cfg)})
        if cfg.target_return is not None and len(metrics) >= cfg.target_window:
            recent = np.mean([m["mean_return"] for m in metrics[-cfg.target_window:]])
            if recent >= cfg.target_return:
                reached = row["wall_clock"]
                break
    wall = time_offset + time.perf_counter() - t0
    if out_dir:
        model.save(Path(out_dir) / "model.ckpt",
                   {"episodes": episodes, "pretrain": _cfg_dict(cfg), "wall_clock": wall,
                    "train_games": len(games)})
        write_metrics(metrics, Path(out_dir) / "metrics.csv")
    return PretrainResult(model, metrics, wall, episodes, reached)


def _cfg_dict(cfg: PretrainConfig) -> dict:
    d = asdict(cfg)
    d["ppo"] = asdict(cfg.ppo)
    return d


def mt_baseline_pretrain(train_set, cfg: PretrainConfig = PretrainConfig(), rng=None, aug: bool = False,
                         gnn: GraphEncoder | None = None, model_cfg: dict | None = None, out_dir=None,
                         rules: Rules = DEFAULT_RULES) -> PretrainResult:
    """A single shared actor trained on the same batches; ``aug`` feeds it the game embedding."""
    extra = dict(model_cfg or {})
    extra["method"] = "mt_aug" if aug else "mt"
    return pretrain(train_set, None, replace(cfg, train_gnn=False), rng, gnn, extra, out_dir, rules=rules)
