"""Game and observation encoders, and masked-autoencoder pre-pretraining of the GNN."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import InputError, TrainingError
from .game import GameSpec, Observation
from .nn import Dense, ParamStore, adam_step, graph_layer_forward, make_generator

log = logging.getLogger(__name__)

NODE_FEATURES = 4


def encode_spec(spec: GameSpec) -> np.ndarray:
    """Per-node features [is_exit, is_evader_start, pursuer_count, degree / max_degree]."""
    g = spec.graph
    x = np.zeros((g.node_count, NODE_FEATURES))
    x[list(spec.exits), 0] = 1.0
    x[spec.evader_start, 1] = 1.0
    for p in spec.pursuer_starts:
        x[p, 2] += 1.0
    if g.max_degree > 0:
        x[:, 3] = g.degrees / g.max_degree
    return x


class GraphEncoder(nn.Module):
    """Stack of mean-aggregation graph layers."""

    def __init__(self, d_in: int = NODE_FEATURES, d_hidden: int = 128, layers: int = 2,
                 activation: str = "relu", seed: int = 0, dtype=torch.float32):
        super().__init__()
        gen = make_generator(seed)
        dims = [d_in] + [d_hidden] * layers
        self.layers = nn.ModuleList(Dense(a, b, gen, dtype=dtype) for a, b in zip(dims[:-1], dims[1:]))
        self.activation = activation
        self.d_hidden = d_hidden

    def forward(self, x: torch.Tensor, mean_adj: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = graph_layer_forward(x, mean_adj, layer.weight, layer.bias, self.activation)
        return x


def game_embedding(x, mean_adj, horizon: int, t_max: int, encoder: GraphEncoder):
    """(h, h_aug): mean-pooled node codes and the same with T / T_max appended."""
    x = torch.as_tensor(x)
    mean_adj = torch.as_tensor(mean_adj)
    if x.shape[0] != mean_adj.shape[0]:
        raise InputError(f"{x.shape[0]} feature rows for {mean_adj.shape[0]} nodes")
    param = encoder.layers[0].weight
    codes = encoder(x.to(param.dtype), mean_adj.to(param.dtype))
    h = codes.mean(dim=0)
    tail = torch.tensor([horizon / t_max], dtype=h.dtype)
    return h, torch.cat([h, tail])


def spec_tensors(spec: GameSpec, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    return (torch.as_tensor(encode_spec(spec), dtype=dtype),
            torch.as_tensor(spec.graph.mean_adjacency, dtype=dtype))


@dataclass(frozen=True)
class MaskedAEConfig:
    mask_ratio: float = 0.5
    gamma: float = 2.0
    remask: bool = True

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise InputError("mask_ratio must lie strictly inside (0, 1)")
        if self.gamma < 1:
            raise InputError("gamma must be >= 1")


class MaskedAutoencoder(nn.Module):
    """Encoder, learnable input mask token and a single graph-layer decoder."""

    def __init__(self, encoder: GraphEncoder, seed: int = 0):
        super().__init__()
        gen = make_generator(seed + 1)
        dtype = encoder.layers[0].weight.dtype
        self.encoder = encoder
        self.mask_token = nn.Parameter(torch.zeros(NODE_FEATURES, dtype=dtype))
        self.decoder = Dense(encoder.d_hidden, NODE_FEATURES, gen, dtype=dtype)


def scaled_cosine_error(recon: torch.Tensor, target: torch.Tensor, gamma: float) -> torch.Tensor:
    """Per-row (1 - cos)^gamma, with cos taken as 0 when either row is zero."""
    dot = (recon * target).sum(-1)
    nr = recon.norm(dim=-1)
    nt = target.norm(dim=-1)
    ok = (nr > 0) & (nt > 0)
    cos = torch.where(ok, dot / torch.where(ok, nr * nt, torch.ones_like(dot)), torch.zeros_like(dot))
    return (1.0 - cos).clamp(min=0.0) ** gamma


def masked_ae_loss(x, mean_adj, cfg: MaskedAEConfig, model: MaskedAutoencoder,
                   rng: np.random.Generator, mask_nodes: np.ndarray | None = None) -> torch.Tensor:
    dtype = model.mask_token.dtype
    x = torch.as_tensor(x, dtype=dtype)
    mean_adj = torch.as_tensor(mean_adj, dtype=dtype)
    n = x.shape[0]
    if mask_nodes is None:
        k = max(1, math.ceil(cfg.mask_ratio * n))
        mask_nodes = np.sort(rng.choice(n, k, replace=False))
    idx = torch.as_tensor(mask_nodes, dtype=torch.long)
    masked = torch.zeros(n, 1, dtype=dtype)
    masked[idx] = 1.0
    x_in = x * (1 - masked) + masked * model.mask_token
    codes = model.encoder(x_in, mean_adj)
    if cfg.remask:
        codes = codes * (1 - masked)
    recon = graph_layer_forward(codes, mean_adj, model.decoder.weight, model.decoder.bias, "identity")
    return scaled_cosine_error(recon[idx], x[idx], cfg.gamma).mean()


def pre_pretrain(dataset, cfg: MaskedAEConfig = MaskedAEConfig(), steps: int = 2000,
                 rng: np.random.Generator | None = None, encoder: GraphEncoder | None = None,
                 batch_size: int = 8, lr: float = 1e-3, seed: int = 0,
                 d_hidden: int = 128, layers: int = 2):
    """Train a GraphEncoder on masked feature reconstruction.

    Returns ``(encoder, losses)``; the encoder comes back with gradients
    disabled.
    """
    games = list(dataset)
    if not games:
        raise InputError("pre-pretraining needs a non-empty dataset")
    rng = rng if rng is not None else np.random.default_rng(seed)
    encoder = encoder if encoder is not None else GraphEncoder(d_hidden=d_hidden, layers=layers, seed=seed)
    model = MaskedAutoencoder(encoder, seed)
    dtype = model.mask_token.dtype
    tensors = {}
    store = ParamStore.from_modules(mae=model)
    losses = []
    t0 = time.perf_counter()
    for step_i in range(steps):
        picks = rng.choice(len(games), min(batch_size, len(games)), replace=False)
        total = 0.0
        for gi in picks:
            if gi not in tensors:
                tensors[gi] = spec_tensors(games[gi], dtype)
            x, a = tensors[gi]
            total = total + masked_ae_loss(x, a, cfg, model, rng)
        loss = total / len(picks)
        if not torch.isfinite(loss):
            raise TrainingError(f"masked autoencoder loss diverged at step {step_i}")
        loss.backward()
        adam_step(store, lr)
        losses.append(float(loss.detach()))
        if step_i % 500 == 0:
            log.info("pre-pretrain step %d loss %.4f (%.1fs)", step_i, losses[-1], time.perf_counter() - t0)
    for p in encoder.parameters():
        p.requires_grad_(False)
    return encoder, losses


class ObsRepresentation(nn.Module):
    """Embedding lookups for locations, member id and time step, concatenated."""

    def __init__(self, vocab: int, n_members: int, t_max: int, d_loc: int = 32, d_id: int = 8,
                 d_time: int = 8, seed: int = 0, dtype=torch.float32):
        super().__init__()
        gen = make_generator(seed)
        self.vocab, self.n_members, self.t_max = vocab, n_members, t_max
        self.loc = nn.Parameter(torch.randn(vocab, d_loc, generator=gen, dtype=dtype))
        self.member = nn.Parameter(torch.randn(n_members, d_id, generator=gen, dtype=dtype))
        self.time = nn.Parameter(torch.randn(t_max + 1, d_time, generator=gen, dtype=dtype))

    @property
    def width(self) -> int:
        return (self.n_members + 1) * self.loc.shape[1] + self.member.shape[1] + self.time.shape[1]

    @property
    def central_width(self) -> int:
        return (self.n_members + 1) * self.loc.shape[1] + self.time.shape[1]

    def _check(self, ploc, eloc, t):
        if ploc.numel() and (int(ploc.max()) >= self.vocab or int(eloc.max()) >= self.vocab
                             or int(ploc.min()) < 0 or int(eloc.min()) < 0):
            raise InputError(f"location id outside embedding vocabulary of size {self.vocab}")
        if t.numel() and (int(t.max()) > self.t_max or int(t.min()) < 0):
            raise InputError(f"time step outside [0, {self.t_max}]")

    def forward(self, ploc, eloc, member, t) -> torch.Tensor:
        ploc, eloc, member, t = (torch.as_tensor(np.asarray(a), dtype=torch.long) for a in (ploc, eloc, member, t))
        self._check(ploc, eloc, t)
        if member.numel() and (int(member.max()) >= self.n_members or int(member.min()) < 0):
            raise InputError(f"member id outside [0, {self.n_members})")
        m = ploc.shape[0]
        return torch.cat([self.loc[ploc].reshape(m, -1), self.loc[eloc], self.member[member], self.time[t]], dim=1)

    def central(self, ploc, eloc, t) -> torch.Tensor:
        ploc, eloc, t = (torch.as_tensor(np.asarray(a), dtype=torch.long) for a in (ploc, eloc, t))
        self._check(ploc, eloc, t)
        m = ploc.shape[0]
        return torch.cat([self.loc[ploc].reshape(m, -1), self.loc[eloc], self.time[t]], dim=1)


class RawObservation(nn.Module):
    """Ablation stand-in for the representation layer: scaled raw integers."""

    def __init__(self, vocab: int, n_members: int, t_max: int, dtype=torch.float32, **_):
        super().__init__()
        self.vocab, self.n_members, self.t_max = vocab, n_members, t_max
        self.dtype = dtype

    @property
    def width(self) -> int:
        return self.n_members + 3

    @property
    def central_width(self) -> int:
        return self.n_members + 2

    def _raw(self, cols):
        return torch.as_tensor(np.stack(cols, axis=1), dtype=self.dtype)

    def forward(self, ploc, eloc, member, t):
        ploc = np.asarray(ploc)
        if ploc.size and (ploc.max() >= self.vocab or np.max(eloc) >= self.vocab):
            raise InputError(f"location id outside vocabulary of size {self.vocab}")
        cols = [ploc[:, i] / self.vocab for i in range(ploc.shape[1])]
        cols += [np.asarray(eloc) / self.vocab, np.asarray(member) / self.n_members, np.asarray(t) / self.t_max]
        return self._raw(cols)

    def central(self, ploc, eloc, t):
        ploc = np.asarray(ploc)
        cols = [ploc[:, i] / self.vocab for i in range(ploc.shape[1])]
        cols += [np.asarray(eloc) / self.vocab, np.asarray(t) / self.t_max]
        return self._raw(cols)


def obs_embed(obs: Observation, rep: ObsRepresentation, base_ids=None) -> torch.Tensor:
    """Embedding of one observation; ``base_ids`` maps instance node ids to vocabulary ids."""
    locs = list(obs.pursuer_locs) + [obs.evader_loc]
    if base_ids is not None:
        if max(locs) >= len(base_ids) or min(locs) < 0:
            raise InputError("node id outside the instance graph")
        locs = [base_ids[v] for v in locs]
    out = rep(np.array([locs[:-1]]), np.array([locs[-1]]), np.array([obs.member_id]), np.array([obs.t]))
    return out[0]
