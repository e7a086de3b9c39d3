"""Command-line entry point: ``pegsolve <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .encoders import GraphEncoder, MaskedAEConfig, pre_pretrain
from .errors import ConfigurationError, InputError, PegError
from .game import GameSpec
from .harness import (ABLATION_FIELDS, ALL_METHODS, GENERALIST_METHODS, heatmap, psro_init, run_ablation,
                      run_comparison, scratch_config, write_csv, zero_shot_eval)
from .instances import GameDataset, InstanceConfig, MapTemplate, build_dataset, write_maps
from .model import PursuerModel
from .nn import config_hash, load_checkpoint, save_checkpoint
from .ppo import PPOConfig
from .pretrain import PretrainConfig, pretrain
from .psro import META_SOLVERS, PSROConfig, run_psro

log = logging.getLogger("pegsolve")

PSRO_FIELDS = ("epoch", "wall_clock_s", "worst_case_utility", "std_error", "population_size",
               "exploitability_if_available")


def _template(args) -> MapTemplate:
    return MapTemplate(args.kind, args.width, args.height, args.nodes, args.attach_m, args.map,
                       args.keep_prob)


def _add_map_args(p):
    p.add_argument("--kind", choices=("grid", "scale_free", "file"), default="grid")
    p.add_argument("--width", type=int, default=10)
    p.add_argument("--height", type=int, default=10)
    p.add_argument("--nodes", type=int, default=300)
    p.add_argument("--attach-m", type=int, default=2)
    p.add_argument("--map", help="map JSON for --kind file")
    p.add_argument("--keep-prob", type=float, default=1.0, help="edge keep probability")


def cmd_gen_maps(args):
    paths = write_maps([_template(args)], args.out, args.count, args.seed)
    print(json.dumps({"written": [str(p) for p in paths]}))


def cmd_gen_games(args):
    cfg = InstanceConfig(args.pursuers, args.exits, (args.tmin, args.tmax), args.min_dist, args.seed,
                         args.boundary_exits)
    ds = build_dataset(_template(args), cfg, args.count)
    ds.save(args.out)
    print(json.dumps({"games": len(ds), "out": args.out}))


def save_gnn(encoder: GraphEncoder, path, meta: dict) -> None:
    save_checkpoint(path, dict(encoder.state_dict()),
                    {"kind": "gnn", "d_hidden": encoder.d_hidden, "layers": len(encoder.layers), **meta})


def load_gnn(path) -> GraphEncoder:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "gnn":
        raise ConfigurationError(f"{path} is not a GNN checkpoint")
    enc = GraphEncoder(d_hidden=meta["d_hidden"], layers=meta["layers"])
    enc.load_state_dict(tensors)
    for p in enc.parameters():
        p.requires_grad_(False)
    return enc


def cmd_pre_pretrain(args):
    ds = GameDataset.load(args.dataset)
    cfg = MaskedAEConfig(args.mask_ratio, args.gamma)
    t0 = time.perf_counter()
    enc, losses = pre_pretrain(ds, cfg, args.steps, np.random.default_rng(args.seed), batch_size=args.batch_size,
                               lr=args.lr, seed=args.seed, d_hidden=args.hidden, layers=args.layers)
    seconds = time.perf_counter() - t0
    save_gnn(enc, args.out, {"steps": args.steps, "seconds": seconds, "mask_ratio": args.mask_ratio,
                             "gamma": args.gamma, "seed": args.seed,
                             "initial_loss": losses[0] if losses else None,
                             "final_loss": losses[-1] if losses else None})
    write_csv([{"step": i, "loss": v} for i, v in enumerate(losses)], str(args.out) + ".loss.csv", ("step", "loss"))
    print(json.dumps({"seconds": seconds, "final_loss": losses[-1] if losses else None}))


def cmd_pretrain(args):
    ds = GameDataset.load(args.dataset)
    gnn = load_gnn(args.gnn_ckpt) if args.gnn_ckpt else None
    ppo = PPOConfig(lr=args.lr, critic_lr=args.lr, minibatches=args.minibatches)
    cfg = PretrainConfig(c1=args.c1, c2=args.c2, episodes_per_policy=args.episodes_per_policy,
                         alpha=args.alpha, episodes_total=args.episodes, ppo=ppo, train_gnn=args.train_gnn,
                         checkpoint_every=args.checkpoint_every, seed=args.seed)
    model_cfg = {"method": args.method, "use_rep": not args.no_rep, "actor_hidden": tuple(args.actor_hidden)}
    if gnn is not None:
        model_cfg["d_hidden"] = gnn.d_hidden
        model_cfg["gnn_layers"] = len(gnn.layers)
    torch.manual_seed(args.seed)
    res = pretrain(ds, None, cfg, np.random.default_rng(args.seed), gnn, model_cfg, args.out)
    print(json.dumps({"episodes": res.episodes, "wall_clock": res.wall_clock,
                      "final_return": res.metrics[-1]["mean_return"] if res.metrics else None}))


def _load_game(path, index: int) -> GameSpec:
    path = Path(path)
    if not path.exists():
        raise InputError(f"game file not found: {path}")
    text = path.read_text().strip()
    if "\n" in text or text.startswith('{"provenance"'):
        return GameDataset.load(path)[index]
    return GameSpec.from_dict(json.loads(text))


def _psro_cfg(args) -> PSROConfig:
    return PSROConfig(epochs=args.epochs, br_episodes=args.br_episodes,
                      br_batch_episodes=max(1, min(args.br_episodes, args.br_batch)),
                      payoff_episodes=args.payoff_episodes, meta_solver=args.meta_solver,
                      eval_episodes=args.eval_episodes, track_exploitability=args.exploitability)


def cmd_finetune(args):
    spec = _load_game(args.game, args.index)
    rng = np.random.default_rng(args.seed)
    torch.manual_seed(args.seed)
    if args.ckpt == "none":
        init = psro_init("psro", spec, None)
    else:
        model, _ = PursuerModel.load(args.ckpt)
        method = {"grasper": "grasper", "mt": "mt_psro", "mt_aug": "mt_psro_aug"}[model.cfg.method]
        init = psro_init(method, spec, model)
    _, history = run_psro(spec, init, _psro_cfg(args), rng)
    write_csv(history, args.out, PSRO_FIELDS)
    print(json.dumps(history[-1]))


def cmd_evaluate(args):
    model, _ = PursuerModel.load(args.ckpt)
    games = GameDataset.load(args.dataset) if args.dataset else [_load_game(args.game, args.index)]
    rows = []
    for gi, spec in enumerate(games):
        util, se = zero_shot_eval(spec, model, args.episodes, np.random.default_rng([args.seed, gi]))
        rows.append({"game_id": gi, "utility": util, "std_error": se})
    if args.out:
        write_csv(rows, args.out, ("game_id", "utility", "std_error"))
    print(json.dumps({"mean_utility": float(np.mean([r["utility"] for r in rows])), "games": len(rows)}))


def _pairs(items, what):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise InputError(f"{what} must look like name=path, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = v
    return out


def cmd_compare(args):
    test = GameDataset.load(args.test_set)
    ckpts = _pairs(args.ckpt, "--ckpt")
    methods = {}
    seconds, sizes = {}, {}
    for m in args.methods:
        if m in GENERALIST_METHODS:
            if m not in ckpts:
                raise ConfigurationError(f"method {m!r} needs --ckpt {m}=PATH")
            model, meta = PursuerModel.load(ckpts[m])
            methods[m] = model
            seconds[m] = float(meta.get("wall_clock", 0.0)) + float(meta.get("stage1_seconds", 0.0))
            sizes[m] = int(meta.get("train_games", 0))
        else:
            methods[m] = None
    cfg = _psro_cfg(args)
    h = config_hash({k: v for k, v in vars(args).items() if k != "func"})
    ref = next((m for m in methods.values() if m is not None), None)
    scratch = scratch_config(test[0], ref.cfg) if ref is not None else None
    log_ = run_comparison(test, methods, cfg, args.seeds, seconds, sizes, scratch, h)
    log_.write_csv(args.out)
    print(json.dumps({"rows": len(log_), "out": args.out}))


def cmd_ablate(args):
    sets = {k: GameDataset.load(v) for k, v in _pairs(args.test_set, "--test-set").items()}
    toggles = {}
    for key, path in _pairs(args.ckpt, "--ckpt").items():
        hmp, rep = (s.strip().lower() in ("1", "true", "on", "yes") for s in key.split(","))
        toggles[(hmp, rep)] = path
    rows = run_ablation(sets, toggles, args.episodes, args.seed)
    write_csv(rows, args.out, ABLATION_FIELDS)
    print(json.dumps({"rows": len(rows), "out": args.out}))


def cmd_heatmap(args):
    spec = _load_game(args.game, args.index)
    rows = heatmap(spec, args.ckpt, args.episodes, args.seed, args.out)
    print(json.dumps({"cells": sum(r["kind"] == "start" for r in rows), "out": args.out}))


def _add_psro_args(p):
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--br-episodes", type=int, default=10)
    p.add_argument("--br-batch", type=int, default=10, help="episodes per BR update")
    p.add_argument("--payoff-episodes", type=int, default=64)
    p.add_argument("--eval-episodes", type=int, default=512)
    p.add_argument("--meta-solver", choices=META_SOLVERS, default="regret_matching")
    p.add_argument("--exploitability", action="store_true", help="compute exact exploitability per epoch")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pegsolve", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-maps", help="write base maps (after edge dropout) as JSON")
    _add_map_args(p)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_maps)

    p = sub.add_parser("gen-games", help="sample a dataset of game instances (JSON lines)")
    _add_map_args(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--min-dist", type=int, default=6)
    p.add_argument("--exits", type=int, default=8)
    p.add_argument("--pursuers", type=int, default=5)
    p.add_argument("--tmin", type=int, default=6)
    p.add_argument("--tmax", type=int, default=10)
    p.add_argument("--boundary-exits", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_games)

    p = sub.add_parser("pre-pretrain", help="masked-autoencoder training of the graph encoder")
    p.add_argument("--dataset", required=True)
    p.add_argument("--mask-ratio", type=float, default=0.5)
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pre_pretrain)

    p = sub.add_parser("pretrain", help="multi-task pre-training of the pursuer model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--gnn-ckpt")
    p.add_argument("--episodes", type=int, default=200_000)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--c1", type=int, default=8)
    p.add_argument("--c2", type=int, default=4)
    p.add_argument("--episodes-per-policy", type=int, default=4)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--minibatches", type=int, default=4)
    p.add_argument("--method", choices=("grasper", "mt", "mt_aug"), default="grasper")
    p.add_argument("--no-rep", action="store_true", help="raw observation features instead of embeddings")
    p.add_argument("--train-gnn", action="store_true", help="train the GNN jointly instead of freezing it")
    p.add_argument("--actor-hidden", type=int, nargs="+", default=[128, 128])
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="PSRO on one game from a checkpoint or from scratch")
    p.add_argument("--game", required=True, help="game JSON, or dataset JSONL with --index")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--ckpt", required=True, help="model checkpoint, or 'none' for PSRO from scratch")
    _add_psro_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="zero-shot utility of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--game")
    p.add_argument("--dataset")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--episodes", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="PSRO curves per method on a test set")
    p.add_argument("--test-set", required=True)
    p.add_argument("--methods", nargs="+", choices=ALL_METHODS, required=True)
    p.add_argument("--ckpt", nargs="*", help="method=path for generalist methods")
    _add_psro_args(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("ablate", help="zero-shot ablation table over (HMP, Rep) checkpoints")
    p.add_argument("--test-set", nargs="+", required=True, help="name=path (two sets)")
    p.add_argument("--ckpt", nargs="+", required=True, help="'hmp,rep=path' with hmp/rep in {0,1}")
    p.add_argument("--episodes", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("heatmap", help="zero-shot utility per evader start node")
    p.add_argument("--game", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--episodes", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)
    try:
        args.func(args)
    except PegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
