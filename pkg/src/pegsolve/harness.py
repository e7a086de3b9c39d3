"""Evaluation metrics, method comparisons, ablations and the zero-shot heatmap."""

from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .encoders import RawObservation, pre_pretrain
from .errors import ConfigurationError, InputError
from .game import GameSpec
from .model import ModelConfig, PursuerModel, PursuerPolicy
from .policy import PolicyArchitecture
from .pretrain import PretrainConfig, pretrain
from .psro import PSROConfig, PSROInit, evader_br, run_psro, worst_case_utility

log = logging.getLogger(__name__)

WORKERS_ENV = "PEGSOLVE_WORKERS"
COMPARISON_FIELDS = ("method", "game_id", "seed", "wall_clock_s", "epoch", "worst_case_utility",
                     "std_error", "config_hash")
GENERALIST_METHODS = ("grasper", "mt_psro", "mt_psro_aug")
ALL_METHODS = GENERALIST_METHODS + ("psro", "random")


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError as exc:
        raise ConfigurationError(f"{WORKERS_ENV} must be an integer") from exc


def _fan_out(fn: Callable, tasks: Sequence, workers: int | None = None) -> list:
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(fn, tasks))


class MetricsLog:
    """Append-only list of metric rows with CSV export."""

    def __init__(self, fields: Sequence[str] = COMPARISON_FIELDS):
        self.fields = tuple(fields)
        self.rows: list[dict] = []

    def extend(self, rows) -> None:
        self.rows.extend(rows)

    def __len__(self):
        return len(self.rows)

    def write_csv(self, path) -> None:
        write_csv(self.rows, path, self.fields)


def write_csv(rows, path, fields) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _load(model_or_path) -> PursuerModel:
    if isinstance(model_or_path, PursuerModel):
        return model_or_path
    return PursuerModel.load(model_or_path)[0]


def uniform_policy(spec: GameSpec, n_slots: int | None = None) -> PursuerPolicy:
    """Pursuer that picks uniformly among legal moves (zero actor weights)."""
    n_slots = n_slots or spec.graph.max_degree + 1
    rep = RawObservation(spec.graph.base_node_count, spec.n_pursuers, spec.horizon)
    arch = PolicyArchitecture(rep.width, (8,), n_slots)
    return PursuerPolicy(arch, torch.zeros(arch.param_count), rep,
                         np.asarray(spec.graph.base_ids, dtype=np.int64), None,
                         spec.graph.action_table(n_slots), "uniform")


def policy_utility(spec: GameSpec, policy: PursuerPolicy, episodes: int, rng: np.random.Generator,
                   br_episodes_per_exit: int = 64, temperature: float = 0.2) -> tuple[float, float]:
    """Utility of one fixed pursuer policy against the evader's softmax best response."""
    sigma_e = evader_br(spec, [policy], [1.0], br_episodes_per_exit, temperature, rng)
    return worst_case_utility(spec, [policy], [1.0], [sigma_e], [1.0], episodes, rng)


def zero_shot_eval(spec: GameSpec, model, episodes: int = 512, rng: np.random.Generator | None = None,
                   br_episodes_per_exit: int = 64, temperature: float = 0.2) -> tuple[float, float]:
    """(utility, std error) of the model's generated base policy, no fine-tuning."""
    model = _load(model)
    rng = rng if rng is not None else np.random.default_rng(0)
    return policy_utility(spec, model.base_policy(spec), episodes, rng, br_episodes_per_exit, temperature)


def scratch_config(spec: GameSpec, like: ModelConfig | None = None, **overrides) -> ModelConfig:
    """Model sizes for from-scratch PSRO on ``spec``, matching a generalist's actor when given."""
    base = dict(n_pursuers=spec.n_pursuers, vocab=spec.graph.base_node_count,
                t_max=spec.horizon, n_actions=spec.graph.max_degree + 1)
    if like is not None:
        base.update(vocab=like.vocab, t_max=like.t_max, n_actions=like.n_actions,
                    d_loc=like.d_loc, d_id=like.d_id, d_time=like.d_time, actor_hidden=like.actor_hidden,
                    critic_hidden=like.critic_hidden, dtype=like.dtype)
    base.update(overrides)
    return ModelConfig(method="mt", **base)


def psro_init(method: str, spec: GameSpec, model: PursuerModel | None,
              scratch: ModelConfig | None = None) -> PSROInit:
    if method in GENERALIST_METHODS:
        if model is None:
            raise ConfigurationError(f"method {method!r} needs a pre-trained checkpoint")
        ctx = model.context(spec)
        return PSROInit(model.base_policy(spec, ctx), model.critic, ctx.h_aug)
    if method == "psro":
        return PSROInit(scratch_cfg=scratch or scratch_config(spec, model.cfg if model else None))
    raise ConfigurationError(f"method {method!r} has no PSRO initialisation")


@dataclass
class ComparisonTask:
    method: str
    game_id: int
    seed: int
    spec: GameSpec
    model: PursuerModel | None
    psro_cfg: PSROConfig
    offset: float
    scratch: ModelConfig | None
    config_hash: str


def _run_task(task: ComparisonTask) -> list[dict]:
    torch.set_num_threads(1)
    rng = np.random.default_rng([task.seed, task.game_id, ALL_METHODS.index(task.method)])
    base = {"method": task.method, "game_id": task.game_id, "seed": task.seed, "config_hash": task.config_hash}
    if task.method == "random":
        util, se = policy_utility(task.spec, uniform_policy(task.spec), task.psro_cfg.eval_episodes, rng,
                                  task.psro_cfg.evader_episodes_per_exit, task.psro_cfg.temperature)
        return [{**base, "epoch": k, "wall_clock_s": 0.0, "worst_case_utility": util, "std_error": se}
                for k in range(task.psro_cfg.epochs + 1)]
    init = psro_init(task.method, task.spec, task.model, task.scratch)
    _, history = run_psro(task.spec, init, task.psro_cfg, rng, clock_offset=task.offset)
    return [{**base, **{k: h[k] for k in ("epoch", "wall_clock_s", "worst_case_utility", "std_error")}}
            for h in history]


def run_comparison(test_set, methods: Mapping[str, PursuerModel | str | None], psro_cfg: PSROConfig,
                   seeds: Sequence[int], pretrain_seconds: Mapping[str, float] | None = None,
                   train_sizes: Mapping[str, int] | None = None, scratch: ModelConfig | None = None,
                   config_hash: str = "", workers: int | None = None) -> MetricsLog:
    """PSRO curves (utility vs wall clock) per method x game x seed.

    Generalist rows are offset by the pre-training time amortized over the
    training set; PSRO-from-scratch and random rows carry no offset.
    """
    pretrain_seconds = dict(pretrain_seconds or {})
    train_sizes = dict(train_sizes or {})
    loaded = {}
    for name, m in methods.items():
        if name not in ALL_METHODS:
            raise ConfigurationError(f"unknown method {name!r}")
        if name in GENERALIST_METHODS:
            if m is None:
                raise ConfigurationError(f"method {name!r} needs a checkpoint")
            loaded[name] = _load(m)
        else:
            loaded[name] = _load(m) if m is not None else None
    ref = next((m for m in loaded.values() if m is not None), None)
    tasks = []
    for name, model in loaded.items():
        offset = 0.0
        if name in GENERALIST_METHODS:
            size = train_sizes.get(name, 0)
            offset = pretrain_seconds.get(name, 0.0) / size if size else 0.0
        for gi, spec in enumerate(test_set):
            sc = None
            if name == "psro":
                sc = scratch if scratch is not None else scratch_config(spec, ref.cfg if ref else None)
            for seed in seeds:
                tasks.append(ComparisonTask(name, gi, seed, spec, model, psro_cfg, offset, sc, config_hash))
    out = MetricsLog()
    for rows in _fan_out(_run_task, tasks, workers):
        out.extend(rows)
    return out


def final_utilities(log_rows, method: str, seed: int | None = None) -> dict[int, float]:
    """Last-epoch utility per game for one method (and seed)."""
    best: dict[int, tuple[int, float]] = {}
    for r in log_rows:
        if r["method"] != method or (seed is not None and r["seed"] != seed):
            continue
        g = r["game_id"]
        if g not in best or r["epoch"] > best[g][0]:
            best[g] = (r["epoch"], r["worst_case_utility"])
    return {g: v for g, (_, v) in best.items()}


ABLATION_FIELDS = ("hmp", "rep", "test_set", "utility", "std_error", "games", "pretrain_seconds")


def run_ablation(test_sets: Mapping[str, Sequence[GameSpec]], toggles: Mapping[tuple[bool, bool], object],
                 episodes: int = 512, seed: int = 0, pretrain_seconds: Mapping | None = None,
                 br_episodes_per_exit: int = 64, temperature: float = 0.2) -> list[dict]:
    """Zero-shot utility (mean +- across-game std error) per (HMP, Rep) toggle and test set."""
    expected = {(h, r) for h in (False, True) for r in (False, True)}
    if set(toggles) != expected:
        missing = sorted(expected - set(toggles))
        raise ConfigurationError(f"ablation needs all four (hmp, rep) checkpoints; missing {missing}")
    rows = []
    for key in sorted(expected):
        model = _load(toggles[key])
        for name, games in test_sets.items():
            vals = []
            for gi, spec in enumerate(games):
                rng = np.random.default_rng([seed, gi, int(key[0]), int(key[1])])
                vals.append(zero_shot_eval(spec, model, episodes, rng, br_episodes_per_exit, temperature)[0])
            vals = np.array(vals)
            se = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
            rows.append({"hmp": key[0], "rep": key[1], "test_set": name, "utility": float(vals.mean()),
                         "std_error": se, "games": len(vals),
                         "pretrain_seconds": (pretrain_seconds or {}).get(key, "")})
    return rows


HEATMAP_FIELDS = ("x", "y", "node", "kind", "pursuers", "utility", "std_error")


def heatmap(spec: GameSpec, model, episodes: int = 256, seed: int = 0, out_csv=None,
            br_episodes_per_exit: int = 64, temperature: float = 0.2, workers: int | None = None) -> list[dict]:
    """Zero-shot utility for every non-exit evader start, other conditions fixed.

    Exit nodes are listed with kind ``exit`` and no utility.
    """
    if spec.graph.coords is None:
        raise InputError("heatmap needs a map with node coordinates")
    model = _load(model)
    tasks = [(spec, model, v, episodes, seed, br_episodes_per_exit, temperature)
             for v in range(spec.graph.node_count) if not spec.is_exit[v]]
    results = dict(zip((t[2] for t in tasks), _fan_out(_heat_cell, tasks, workers)))
    counts = np.bincount(np.asarray(spec.pursuer_starts), minlength=spec.graph.node_count)
    rows = []
    for v in range(spec.graph.node_count):
        x, y = spec.graph.coords[v]
        row = {"x": x, "y": y, "node": v, "pursuers": int(counts[v])}
        if spec.is_exit[v]:
            row.update(kind="exit", utility="", std_error="")
        else:
            util, se = results[v]
            row.update(kind="start", utility=util, std_error=se)
        rows.append(row)
    if out_csv is not None:
        write_csv(rows, out_csv, HEATMAP_FIELDS)
    return rows


def _heat_cell(args):
    spec, model, v, episodes, seed, per_exit, temperature = args
    torch.set_num_threads(1)
    rng = np.random.default_rng([seed, v])
    # edge dropout can cut a start off from some exits; the evader only chooses among reachable ones
    reach = tuple(e for e in spec.exits if spec.graph.distances[v, e] >= 0)
    if not reach:
        return 1.0, 0.0   # no escape possible, the timeout pays the pursuer
    cell = GameSpec(spec.graph, reach, spec.pursuer_starts, v, spec.horizon)
    return zero_shot_eval(cell, model, episodes, rng, per_exit, temperature)


@dataclass
class TimingRun:
    seed: int
    frozen_seconds: float | None   # Stage I + pre-training until the threshold
    joint_seconds: float | None
    stage1_seconds: float
    frozen_episodes: int
    joint_episodes: int
    meta: dict = field(default_factory=dict)

    @property
    def frozen_faster(self) -> bool:
        if self.frozen_seconds is None:
            return False
        return self.joint_seconds is None or self.frozen_seconds < self.joint_seconds


def stage1_timing(train_set, threshold: float, seed: int, cfg: PretrainConfig,
                  model_cfg: dict | None = None, mae_steps: int = 2000) -> TimingRun:
    """Wall clock to a mean-return threshold: frozen pre-pretrained GNN vs joint GNN training.

    The frozen variant is charged for its Stage-I time. Both share the same
    episode budget (``cfg.episodes_total``); ``None`` means the threshold
    was not reached within it.
    """
    torch.manual_seed(seed)
    t0 = time.perf_counter()
    gnn, _ = pre_pretrain(train_set, steps=mae_steps, rng=np.random.default_rng(seed), seed=seed)
    stage1 = time.perf_counter() - t0
    target = replace(cfg, target_return=threshold, seed=seed)
    frozen = pretrain(train_set, None, replace(target, train_gnn=False), np.random.default_rng(seed), gnn,
                      model_cfg, time_offset=stage1)
    joint = pretrain(train_set, None, replace(target, train_gnn=True), np.random.default_rng(seed), None,
                     model_cfg)
    return TimingRun(seed, frozen.reached_target_at, joint.reached_target_at, stage1,
                     frozen.episodes, joint.episodes)
