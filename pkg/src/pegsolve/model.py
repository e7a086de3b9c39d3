"""The pursuer model bundle: encoders, actor source and critic, plus acting policies."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .encoders import GraphEncoder, ObsRepresentation, RawObservation, game_embedding, spec_tensors
from .errors import ConfigurationError
from .game import GameSpec, Observation
from .nn import config_hash, load_checkpoint, make_generator, masked_softmax, save_checkpoint
from .policy import Critic, HyperNetwork, PolicyArchitecture, actor_logits, init_actor_flat

METHODS = ("grasper", "mt", "mt_aug")
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class ModelConfig:
    n_pursuers: int
    vocab: int                 # base map node count
    t_max: int
    n_actions: int             # base map max degree + 1
    method: str = "grasper"    # grasper | mt | mt_aug
    use_rep: bool = True
    d_hidden: int = 128
    gnn_layers: int = 2
    d_loc: int = 32
    d_id: int = 8
    d_time: int = 8
    actor_hidden: tuple[int, ...] = (128, 128)
    hyper_hidden: int = 256
    critic_hidden: tuple[int, ...] = (128, 128)
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "actor_hidden", tuple(self.actor_hidden))
        object.__setattr__(self, "critic_hidden", tuple(self.critic_hidden))
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.dtype not in _DTYPES:
            raise ConfigurationError(f"unsupported dtype {self.dtype!r}")

    @classmethod
    def for_specs(cls, specs, **kw) -> "ModelConfig":
        specs = list(specs)
        n = specs[0].n_pursuers
        if any(s.n_pursuers != n for s in specs):
            raise ConfigurationError("all games must share the pursuer count")
        vocab = max(s.graph.base_node_count for s in specs)
        n_actions = max(s.graph.max_degree for s in specs) + 1
        if "base_max_degree" in kw:
            n_actions = max(n_actions, kw.pop("base_max_degree") + 1)
        t_max = kw.pop("t_max", max(s.horizon for s in specs))
        return cls(n_pursuers=n, vocab=vocab, t_max=t_max, n_actions=n_actions, **kw)

    @property
    def torch_dtype(self):
        return _DTYPES[self.dtype]


@dataclass
class GameContext:
    """Per-game tensors reused across rollouts and updates."""

    spec: GameSpec
    x: torch.Tensor
    adj: torch.Tensor
    base_ids: np.ndarray
    h_aug: torch.Tensor | None = None  # cached, gradient-free


class PursuerModel(nn.Module):
    def __init__(self, cfg: ModelConfig, gnn: GraphEncoder | None = None):
        super().__init__()
        self.cfg = cfg
        dt = cfg.torch_dtype
        self.gnn = gnn if gnn is not None else GraphEncoder(
            d_hidden=cfg.d_hidden, layers=cfg.gnn_layers, seed=cfg.seed, dtype=dt)
        if self.gnn.d_hidden != cfg.d_hidden:
            raise ConfigurationError("GNN width does not match d_hidden")
        rep_cls = ObsRepresentation if cfg.use_rep else RawObservation
        self.rep = rep_cls(cfg.vocab, cfg.n_pursuers, cfg.t_max, d_loc=cfg.d_loc, d_id=cfg.d_id,
                           d_time=cfg.d_time, seed=cfg.seed + 1, dtype=dt)
        d_game = cfg.d_hidden + 1
        in_width = self.rep.width + (d_game if cfg.method == "mt_aug" else 0)
        self.arch = PolicyArchitecture(in_width, cfg.actor_hidden, cfg.n_actions)
        if cfg.method == "grasper":
            self.hyper = HyperNetwork(d_game, self.arch, cfg.hyper_hidden, seed=cfg.seed + 2, dtype=dt)
            self.shared_actor = None
        else:
            self.hyper = None
            self.shared_actor = nn.Parameter(init_actor_flat(self.arch, make_generator(cfg.seed + 2), dtype=dt))
        self.critic = Critic(self.rep.central_width, 0 if cfg.method == "mt" else d_game,
                             cfg.critic_hidden, seed=cfg.seed + 3, dtype=dt)

    # -- per-game quantities ------------------------------------------------
    def context(self, spec: GameSpec) -> GameContext:
        if spec.n_pursuers != self.cfg.n_pursuers:
            raise ConfigurationError(f"model built for {self.cfg.n_pursuers} pursuers, game has {spec.n_pursuers}")
        if spec.graph.max_degree + 1 > self.cfg.n_actions:
            raise ConfigurationError("game graph degree exceeds the actor's action slots")
        if spec.horizon > self.cfg.t_max:
            raise ConfigurationError(f"horizon {spec.horizon} exceeds model t_max {self.cfg.t_max}")
        x, adj = spec_tensors(spec, self.cfg.torch_dtype)
        ctx = GameContext(spec, x, adj, np.asarray(spec.graph.base_ids, dtype=np.int64))
        with torch.no_grad():
            ctx.h_aug = self.embed(ctx)
        return ctx

    def embed(self, ctx: GameContext) -> torch.Tensor:
        return game_embedding(ctx.x, ctx.adj, ctx.spec.horizon, self.cfg.t_max, self.gnn)[1]

    def actor_flat(self, h_aug: torch.Tensor) -> torch.Tensor:
        if self.hyper is not None:
            return self.hyper(h_aug)
        return self.shared_actor

    def actor_inputs(self, ctx: GameContext, h_aug, ploc, eloc, member, t) -> torch.Tensor:
        feats = self.rep(ctx.base_ids[ploc], ctx.base_ids[eloc], member, t)
        if self.cfg.method == "mt_aug":
            feats = torch.cat([feats, h_aug.to(feats.dtype).expand(feats.shape[0], -1)], dim=1)
        return feats

    def values(self, ctx: GameContext, h_aug, ploc, eloc, t) -> torch.Tensor:
        central = self.rep.central(ctx.base_ids[ploc], ctx.base_ids[eloc], t)
        return self.critic(central, None if self.cfg.method == "mt" else h_aug)

    def base_policy(self, spec: GameSpec, ctx: GameContext | None = None) -> "PursuerPolicy":
        """Frozen zero-shot policy of this model on ``spec``."""
        ctx = ctx if ctx is not None else self.context(spec)
        with torch.no_grad():
            flat = self.actor_flat(ctx.h_aug).detach().clone()
        return PursuerPolicy(self.arch, flat, self.rep, ctx.base_ids,
                             ctx.h_aug if self.cfg.method == "mt_aug" else None,
                             spec.graph.action_table(self.cfg.n_actions))

    # -- persistence ----------------------------------------------------------
    def save(self, path, meta: dict | None = None) -> None:
        cfg = asdict(self.cfg)
        info = {"model_config": cfg, "architecture": self.arch.to_dict(), "config_hash": config_hash(cfg)}
        info.update(meta or {})
        save_checkpoint(path, {k: v for k, v in self.state_dict().items()}, info)

    @classmethod
    def load(cls, path) -> tuple["PursuerModel", dict]:
        tensors, meta = load_checkpoint(path)
        if "model_config" not in meta:
            raise ConfigurationError(f"{path} is not a pursuer model checkpoint")
        cfg = ModelConfig(**meta["model_config"])
        model = cls(cfg)
        try:
            model.load_state_dict(tensors)
        except RuntimeError as exc:
            raise ConfigurationError(f"checkpoint does not match its architecture: {exc}") from exc
        if model.arch.to_dict() != meta.get("architecture", model.arch.to_dict()):
            raise ConfigurationError("checkpoint architecture descriptor mismatch")
        return model, meta


@dataclass(eq=False)
class PursuerPolicy:
    """Self-contained acting policy: actor vector plus the encoders it reads from.

    ``rep`` may be shared with other policies; it is only read here.
    """

    arch: PolicyArchitecture
    flat: torch.Tensor
    rep: nn.Module
    base_ids: np.ndarray
    h_aug: torch.Tensor | None
    table: np.ndarray          # [V, A] action table of the game graph
    label: str = field(default="")

    def features(self, ploc, eloc, member, t) -> torch.Tensor:
        ploc = np.asarray(ploc)
        feats = self.rep(self.base_ids[ploc], self.base_ids[np.asarray(eloc)], member, t)
        if self.h_aug is not None:
            feats = torch.cat([feats, self.h_aug.to(feats.dtype).expand(feats.shape[0], -1)], dim=1)
        return feats

    def logits(self, ploc, eloc, member, t, flat: torch.Tensor | None = None) -> torch.Tensor:
        return actor_logits(self.flat if flat is None else flat, self.arch, self.features(ploc, eloc, member, t))

    def probs(self, ploc, eloc, member, t, mask) -> np.ndarray:
        """Batched action-slot probabilities [M, A]; usable as an oracle ``prob_fn``."""
        with torch.no_grad():
            out = masked_softmax(self.logits(ploc, eloc, member, t), torch.as_tensor(np.asarray(mask)))
        return out.double().numpy()

    def __call__(self, obs: Observation) -> np.ndarray:
        """Probabilities over ``legal_actions`` of the member's node (for :func:`game.rollout`)."""
        mask = self.table[obs.pursuer_locs[obs.member_id]][None] >= 0
        n_legal = int(mask.sum())
        return self.probs(np.array([obs.pursuer_locs]), np.array([obs.evader_loc]),
                          np.array([obs.member_id]), np.array([obs.t]), mask)[0, :n_legal]

    def clone(self, trainable_rep: bool = False) -> "PursuerPolicy":
        rep = copy.deepcopy(self.rep) if trainable_rep else self.rep
        return PursuerPolicy(self.arch, self.flat.detach().clone(), rep, self.base_ids, self.h_aug,
                             self.table, self.label)


def random_policy(spec: GameSpec, cfg: ModelConfig, seed: int) -> PursuerPolicy:
    """Freshly initialised actor and representation layer (PSRO from scratch)."""
    rep_cls = ObsRepresentation if cfg.use_rep else RawObservation
    rep = rep_cls(cfg.vocab, cfg.n_pursuers, cfg.t_max, d_loc=cfg.d_loc, d_id=cfg.d_id,
                  d_time=cfg.d_time, seed=seed, dtype=cfg.torch_dtype)
    arch = PolicyArchitecture(rep.width, cfg.actor_hidden, cfg.n_actions)
    flat = init_actor_flat(arch, make_generator(seed + 1), dtype=cfg.torch_dtype)
    return PursuerPolicy(arch, flat, rep, np.asarray(spec.graph.base_ids, dtype=np.int64), None,
                         spec.graph.action_table(cfg.n_actions), "random-init")
