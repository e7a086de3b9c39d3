"""Clipped-surrogate policy optimisation with a centralized critic and optional guidance term."""

from __future__ import annotations

import tempfile
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, TrainingError
from .nn import ParamStore, adam_step, masked_entropy, masked_log_softmax
from .policy import actor_logits
from .rollout import EpisodeBatch, normalize, with_advantages


@dataclass(frozen=True)
class PPOConfig:
    clip: float = 0.2
    gae_lambda: float = 0.95
    gamma: float = 0.99
    epochs: int = 4
    minibatches: int = 4
    lr: float = 3e-4
    critic_lr: float = 3e-4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5

    def __post_init__(self):
        if self.clip <= 0:
            raise ConfigurationError("clip epsilon must be > 0")
        if self.epochs < 1 or self.minibatches < 1:
            raise ConfigurationError("epochs and minibatches must be >= 1")


def guidance_term(logp_all: torch.Tensor, ref_action) -> torch.Tensor:
    """Mean cross-entropy -log pi(a_ref) of the reference actions."""
    ref = torch.as_tensor(np.asarray(ref_action), dtype=torch.long)
    return -logp_all.gather(1, ref[:, None]).squeeze(1).mean()


def hmp_loss(logp_all: torch.Tensor, mask, action, old_logp, adv, values: torch.Tensor, returns,
             ref_action, alpha: float, cfg: PPOConfig = PPOConfig()):
    """Clipped surrogate - entropy bonus + value loss, plus ``alpha`` times the guidance term.

    ``logp_all`` [m, A] are masked log-probabilities of the member rows;
    ``values``/``returns`` belong to the (separately sampled) step rows.
    Returns ``(total, parts)`` where parts holds detached floats.
    """
    if logp_all.shape[0] == 0:
        raise ConfigurationError("empty batch")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError("alpha must lie in [0, 1]")
    dt = logp_all.dtype
    mask = torch.as_tensor(np.asarray(mask), dtype=torch.bool)
    act = torch.as_tensor(np.asarray(action), dtype=torch.long)
    logp = logp_all.gather(1, act[:, None]).squeeze(1)
    ratio = torch.exp(logp - torch.as_tensor(np.asarray(old_logp), dtype=dt))
    adv = torch.as_tensor(np.asarray(adv), dtype=dt)
    surr = torch.minimum(ratio * adv, ratio.clamp(1 - cfg.clip, 1 + cfg.clip) * adv)
    policy_loss = -surr.mean()
    entropy = masked_entropy(logp_all, mask).mean()
    if values.shape[0]:
        value_loss = ((values - torch.as_tensor(np.asarray(returns), dtype=values.dtype)) ** 2).mean()
    else:
        value_loss = torch.zeros((), dtype=dt)
    base = policy_loss - cfg.entropy_coef * entropy + cfg.value_coef * value_loss
    if alpha > 0:
        guidance = guidance_term(logp_all, ref_action)
        total = base + alpha * guidance
    else:
        ref = np.asarray(ref_action)
        guidance = guidance_term(logp_all, ref).detach() if (ref >= 0).all() else torch.zeros(())
        total = base
    parts = {"policy_loss": float(policy_loss.detach()), "value_loss": float(value_loss.detach()),
             "entropy": float(entropy.detach()), "guidance": float(guidance.detach()),
             "total": float(total.detach())}
    return total, parts


def _dump(batch: EpisodeBatch) -> str:
    fd, path = tempfile.mkstemp(prefix="pegsolve_nan_batch_", suffix=".npz")
    with open(fd, "wb") as fh:
        np.savez(fh, **{k: v for k, v in vars(batch).items() if isinstance(v, np.ndarray)})
    return path


def ppo_update(learner, batch: EpisodeBatch, cfg: PPOConfig, alpha: float,
               rng: np.random.Generator) -> dict:
    """Several epochs of minibatch updates over one batch; returns averaged loss parts."""
    with_advantages(batch, cfg.gamma, cfg.gae_lambda)
    adv_member = normalize(batch.adv)[batch.step_of]
    m, s = len(batch), batch.n_steps
    sums: dict[str, float] = {}
    count = 0
    for _ in range(cfg.epochs):
        mperm = rng.permutation(m)
        sperm = rng.permutation(s)
        for rows, srows in zip(np.array_split(mperm, cfg.minibatches), np.array_split(sperm, cfg.minibatches)):
            if len(rows) == 0:
                continue
            logp_all = learner.logp_all(batch, rows)
            values = learner.values(batch, srows)
            total, parts = hmp_loss(
                logp_all, batch.mask[rows], batch.action[rows], batch.logp[rows], adv_member[rows],
                values, batch.ret[srows], batch.ref_action[rows], alpha, cfg)
            if not torch.isfinite(total):
                raise TrainingError(f"non-finite loss; offending batch written to {_dump(batch)}")
            total.backward()
            for store, lr in learner.stores():
                store.clip_grad_norm(cfg.max_grad_norm)
                adam_step(store, lr)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
    return {k: v / max(count, 1) for k, v in sums.items()}


class ModelLearner:
    """Gradient view of a PursuerModel over the games of one batch."""

    def __init__(self, model, contexts, ppo: PPOConfig, train_gnn: bool = False):
        self.model = model
        self.contexts = contexts
        self.train_gnn = train_gnn
        self.ppo = ppo
        self.actor_store = ParamStore.from_modules(
            rep=model.rep, hyper=model.hyper, gnn=model.gnn if train_gnn else None)
        if model.shared_actor is not None:
            self.actor_store.add("shared_actor", model.shared_actor)
        self.critic_store = ParamStore.from_modules(critic=model.critic)

    def stores(self):
        return [(self.actor_store, self.ppo.lr), (self.critic_store, self.ppo.critic_lr)]

    def _embeddings(self, games):
        if self.train_gnn:
            return {g: self.model.embed(self.contexts[g]) for g in games}
        return {g: self.contexts[g].h_aug for g in games}

    def logp_all(self, batch: EpisodeBatch, rows: np.ndarray) -> torch.Tensor:
        games = np.unique(batch.game[rows])
        emb = self._embeddings(games)
        flats = {}
        if self.model.hyper is not None:
            stacked = self.model.hyper(torch.stack([emb[g] for g in games]))
            flats = {g: stacked[i] for i, g in enumerate(games)}
        pieces, order = [], []
        for g in games:
            sel = rows[batch.game[rows] == g]
            ctx = self.contexts[g]
            feats = self.model.actor_inputs(ctx, emb[g], batch.ploc[sel], batch.eloc[sel],
                                            batch.member[sel], batch.t[sel])
            flat = flats[g] if flats else self.model.shared_actor
            pieces.append(actor_logits(flat, self.model.arch, feats))
            order.append(sel)
        logits = _reorder(pieces, order, rows)
        return masked_log_softmax(logits, torch.as_tensor(batch.mask[rows]))

    def values(self, batch: EpisodeBatch, srows: np.ndarray) -> torch.Tensor:
        games = np.unique(batch.s_game[srows])
        emb = self._embeddings(games)
        pieces, order = [], []
        for g in games:
            sel = srows[batch.s_game[srows] == g]
            pieces.append(self.model.values(self.contexts[g], emb[g], batch.s_ploc[sel],
                                            batch.s_eloc[sel], batch.s_t[sel]))
            order.append(sel)
        return _reorder(pieces, order, srows)


class PolicyLearner:
    """Fine-tunes one PursuerPolicy's actor vector (and optionally its
    representation layer) with its own critic on a single game."""

    def __init__(self, policy, critic, ppo: PPOConfig, h_critic: torch.Tensor | None, train_rep: bool):
        self.policy = policy
        self.critic = critic
        self.h_critic = h_critic
        self.ppo = ppo
        self.flat = torch.nn.Parameter(policy.flat.detach().clone())
        self.actor_store = ParamStore([("actor", self.flat)])
        if train_rep:
            for name, p in policy.rep.named_parameters():
                self.actor_store.add(f"rep.{name}", p)
        self.critic_store = ParamStore.from_modules(critic=critic)

    def stores(self):
        return [(self.actor_store, self.ppo.lr), (self.critic_store, self.ppo.critic_lr)]

    def logp_all(self, batch: EpisodeBatch, rows: np.ndarray) -> torch.Tensor:
        logits = self.policy.logits(batch.ploc[rows], batch.eloc[rows], batch.member[rows], batch.t[rows],
                                    flat=self.flat)
        return masked_log_softmax(logits, torch.as_tensor(batch.mask[rows]))

    def values(self, batch: EpisodeBatch, srows: np.ndarray) -> torch.Tensor:
        b = self.policy.base_ids
        central = self.policy.rep.central(b[batch.s_ploc[srows]], b[batch.s_eloc[srows]], batch.s_t[srows])
        return self.critic(central, self.h_critic)

    def value_fn(self):
        def fn(g, ploc, eloc, t):
            with torch.no_grad():
                b = self.policy.base_ids
                return self.critic(self.policy.rep.central(b[ploc], b[eloc], t), self.h_critic).double().numpy()
        return fn


def _reorder(pieces, order, rows) -> torch.Tensor:
    """Concatenate per-group outputs and restore the row order of ``rows``."""
    cat = torch.cat(pieces, dim=0)
    where = np.concatenate(order)
    pos = {int(r): i for i, r in enumerate(where)}
    return cat[torch.as_tensor([pos[int(r)] for r in rows], dtype=torch.long)]
