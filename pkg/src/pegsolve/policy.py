"""Actor architecture, hypernetwork-generated actor weights and the critic."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ConfigurationError
from .nn import ACTIVATIONS, MLP, Dense, dense_forward, init_linear_, make_generator, masked_softmax


@dataclass(frozen=True)
class PolicyArchitecture:
    in_width: int
    hidden: tuple[int, ...] = (128, 128)
    n_actions: int = 5
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.in_width < 1 or self.n_actions < 1 or any(h < 1 for h in self.hidden):
            raise ConfigurationError("actor widths must be positive")

    @property
    def shapes(self) -> list[tuple[int, int]]:
        dims = [self.in_width, *self.hidden, self.n_actions]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def layer_sizes(self) -> list[int]:
        return [i * o + o for i, o in self.shapes]

    @property
    def param_count(self) -> int:
        return sum(self.layer_sizes)

    def slices(self) -> list[tuple[slice, slice, tuple[int, int]]]:
        """(weight slice, bias slice, (in, out)) per layer, tiling [0, P)."""
        out, pos = [], 0
        for i, o in self.shapes:
            out.append((slice(pos, pos + i * o), slice(pos + i * o, pos + i * o + o), (i, o)))
            pos += i * o + o
        return out

    def to_dict(self) -> dict:
        return {"in_width": self.in_width, "hidden": list(self.hidden),
                "n_actions": self.n_actions, "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyArchitecture":
        return cls(int(d["in_width"]), tuple(d["hidden"]), int(d["n_actions"]), d.get("activation", "tanh"))


def unflatten(flat: torch.Tensor, arch: PolicyArchitecture) -> list[tuple[torch.Tensor, torch.Tensor]]:
    if flat.shape[-1] != arch.param_count:
        raise ConfigurationError(f"flat vector has {flat.shape[-1]} entries, architecture needs {arch.param_count}")
    return [(flat[..., ws].reshape(*flat.shape[:-1], *shape), flat[..., bs]) for ws, bs, shape in arch.slices()]


def flatten(layers) -> torch.Tensor:
    parts = []
    for w, b in layers:
        parts.append(w.reshape(*w.shape[:-2], -1))
        parts.append(b)
    return torch.cat(parts, dim=-1)


def actor_logits(flat: torch.Tensor, arch: PolicyArchitecture, x: torch.Tensor) -> torch.Tensor:
    act = ACTIVATIONS[arch.activation]
    layers = unflatten(flat, arch)
    for i, (w, b) in enumerate(layers):
        x = dense_forward(x, w, b)
        if i < len(layers) - 1:
            x = act(x)
    return x


def init_actor_flat(arch: PolicyArchitecture, gen: torch.Generator, out_scale: float = 0.01,
                    dtype=torch.float32) -> torch.Tensor:
    """Fan-in initialised actor, final layer scaled by ``out_scale``."""
    layers = []
    for k, (i, o) in enumerate(arch.shapes):
        w = torch.empty(i, o, dtype=dtype)
        b = torch.empty(o, dtype=dtype)
        init_linear_(w, b, gen, out_scale if k == len(arch.shapes) - 1 else 1.0)
        layers.append((w, b))
    return flatten(layers)


@dataclass(frozen=True, eq=False)
class GeneratedPolicy:
    """Immutable actor parameter vector plus the architecture that slices it."""

    flat: torch.Tensor
    arch: PolicyArchitecture
    source: str = field(default="")

    def __post_init__(self):
        if self.flat.dim() != 1 or self.flat.shape[0] != self.arch.param_count:
            raise ConfigurationError(f"flat vector shape {tuple(self.flat.shape)} != ({self.arch.param_count},)")

    def layers(self):
        return unflatten(self.flat, self.arch)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return actor_logits(self.flat, self.arch, x)


def embedding_digest(h: torch.Tensor) -> str:
    return hashlib.sha256(h.detach().cpu().double().numpy().tobytes()).hexdigest()[:16]


def actor_forward(policy: GeneratedPolicy, obs_emb: torch.Tensor, legal_mask) -> torch.Tensor:
    """Action-slot distribution; one row per observation."""
    x = obs_emb if obs_emb.dim() == 2 else obs_emb.unsqueeze(0)
    mask = torch.as_tensor(legal_mask, dtype=torch.bool)
    mask = mask if mask.dim() == 2 else mask.unsqueeze(0)
    probs = masked_softmax(policy.logits(x.to(policy.flat.dtype)), mask)
    return probs if obs_emb.dim() == 2 else probs[0]


class HyperNetwork(nn.Module):
    """Maps a game embedding to the flat parameter vector of an actor.

    A ReLU trunk feeds one linear head per actor layer. Head weights start
    small and head biases start at an ordinary actor initialisation, so the
    first generated actors are ordinary, near-uniform policies that still
    depend on the embedding.
    """

    def __init__(self, d_in: int, arch: PolicyArchitecture, hidden: int = 256, depth: int = 2,
                 head_scale: float = 1e-2, seed: int = 0, dtype=torch.float32):
        super().__init__()
        gen = make_generator(seed)
        self.d_in, self.arch = d_in, arch
        dims = [d_in] + [hidden] * depth
        self.trunk = nn.ModuleList(Dense(a, b, gen, dtype=dtype) for a, b in zip(dims[:-1], dims[1:]))
        base = init_actor_flat(arch, gen, dtype=dtype)
        self.heads = nn.ModuleList()
        for (ws, bs, _), size in zip(arch.slices(), arch.layer_sizes):
            head = Dense(hidden, size, gen, dtype=dtype)
            with torch.no_grad():
                head.weight.normal_(0.0, head_scale / hidden ** 0.5, generator=gen)
                head.bias.copy_(base[ws.start: bs.stop])
            self.heads.append(head)

    def forward(self, h_aug: torch.Tensor) -> torch.Tensor:
        single = h_aug.dim() == 1
        z = h_aug.unsqueeze(0) if single else h_aug
        if z.shape[-1] != self.d_in:
            raise ConfigurationError(f"hypernetwork expects width {self.d_in}, got {z.shape[-1]}")
        z = z.to(self.trunk[0].weight.dtype)
        for layer in self.trunk:
            z = torch.relu(layer(z))
        flat = torch.cat([head(z) for head in self.heads], dim=-1)
        return flat[0] if single else flat


def hyper_forward(h_aug: torch.Tensor, hyper: HyperNetwork) -> GeneratedPolicy:
    return GeneratedPolicy(hyper(h_aug), hyper.arch, embedding_digest(h_aug))


class Critic(nn.Module):
    """Value MLP over the central state embedding, optionally joined with the game embedding."""

    def __init__(self, state_width: int, game_width: int = 0, hidden=(128, 128), seed: int = 0,
                 dtype=torch.float32):
        super().__init__()
        self.state_width, self.game_width = state_width, game_width
        self.mlp = MLP([state_width + game_width, *hidden, 1], make_generator(seed), "tanh", dtype=dtype)

    def forward(self, central: torch.Tensor, h_aug: torch.Tensor | None = None) -> torch.Tensor:
        if central.shape[-1] != self.state_width:
            raise ConfigurationError(f"critic expects state width {self.state_width}, got {central.shape[-1]}")
        x = central
        if self.game_width:
            if h_aug is None or h_aug.shape[-1] != self.game_width:
                raise ConfigurationError(f"critic expects a game embedding of width {self.game_width}")
            h = h_aug.expand(central.shape[0], -1) if h_aug.dim() == 1 else h_aug
            x = torch.cat([central, h.to(central.dtype)], dim=1)
        return self.mlp(x).squeeze(-1)


def critic_forward(critic: Critic, central_state_emb: torch.Tensor, h_aug: torch.Tensor | None = None):
    return critic(central_state_emb, h_aug)
