"""Differentiable building blocks on top of torch autograd.

torch's autograd records every primitive on a tape and replays it backward, so
gradients flow through weights that are themselves network outputs (the
hypernetwork case). This module adds the contract-checked primitives used by
the encoders and policies, a named parameter store with an explicit Adam step,
and the binary checkpoint container.
"""

from __future__ import annotations

import hashlib
import math
import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, InputError, TrainingError

ACTIVATIONS = {
    "tanh": torch.tanh,
    "relu": torch.relu,
    "elu": nn.functional.elu,
    "identity": lambda x: x,
}


def dense_forward(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """``x @ weight + bias`` with ``weight`` laid out as [in, out]."""
    if x.dim() != 2 or weight.dim() != 2 or bias.dim() != 1:
        raise ConfigurationError(
            f"dense_forward expects x[batch,in], W[in,out], b[out]; got "
            f"{tuple(x.shape)}, {tuple(weight.shape)}, {tuple(bias.shape)}"
        )
    if x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise ConfigurationError(
            f"shape mismatch: x{tuple(x.shape)} W{tuple(weight.shape)} b{tuple(bias.shape)}"
        )
    return x @ weight + bias


def embedding_lookup(table: torch.Tensor, index) -> torch.Tensor:
    """Row ``index`` of ``table``; accepts an int or an integer tensor of indices."""
    idx = torch.as_tensor(index, dtype=torch.long)
    vocab = table.shape[0]
    if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= vocab):
        raise InputError(f"embedding index out of range [0, {vocab}): {index}")
    return table[idx]


def graph_layer_forward(
    features: torch.Tensor,
    mean_adj: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor,
    activation: str = "relu",
) -> torch.Tensor:
    """Mean-aggregation graph convolution.

    ``mean_adj`` is the row-normalized adjacency with self-loops, so
    ``mean_adj @ X`` averages each node's closed neighbourhood. The result is
    passed through a dense layer and ``activation``.
    """
    if mean_adj.dim() != 2 or mean_adj.shape[0] != mean_adj.shape[1]:
        raise InputError(f"adjacency must be square, got {tuple(mean_adj.shape)}")
    if features.shape[0] != mean_adj.shape[0]:
        raise InputError(
            f"node count mismatch: features have {features.shape[0]} rows, "
            f"adjacency has {mean_adj.shape[0]} nodes"
        )
    return ACTIVATIONS[activation](dense_forward(mean_adj @ features, weight, bias))


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis restricted to ``mask``; masked entries are exactly 0."""
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not bool(mask.any(dim=-1).all()):
        raise InputError("masked_softmax needs at least one legal entry per row")
    return torch.softmax(logits.masked_fill(~mask, float("-inf")), dim=-1)


def masked_log_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Log of :func:`masked_softmax`; masked entries are ``-inf``."""
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not bool(mask.any(dim=-1).all()):
        raise InputError("masked_log_softmax needs at least one legal entry per row")
    return torch.log_softmax(logits.masked_fill(~mask, float("-inf")), dim=-1)


def masked_entropy(logp: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    p = logp.exp()
    return -(p * torch.where(mask, logp, torch.zeros_like(logp))).sum(-1)


class ParamStore:
    """Named trainable tensors plus Adam moment state.

    Iteration order is insertion order. Entries are the live ``torch``
    parameters of the owning modules, so module forwards see updates
    immediately.
    """

    def __init__(self, entries: Iterable[tuple[str, torch.Tensor]] = ()):
        self._params: OrderedDict[str, torch.Tensor] = OrderedDict()
        self._m: dict[str, torch.Tensor] = {}
        self._v: dict[str, torch.Tensor] = {}
        self.step_count = 0
        for name, p in entries:
            self.add(name, p)

    @classmethod
    def from_modules(cls, **modules: nn.Module) -> "ParamStore":
        store = cls()
        for prefix, module in modules.items():
            if module is None:
                continue
            for name, p in module.named_parameters():
                if p.requires_grad:
                    store.add(f"{prefix}.{name}", p)
        return store

    def add(self, name: str, param: torch.Tensor) -> None:
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        if not param.requires_grad:
            param.requires_grad_(True)
        self._params[name] = param
        self._m[name] = torch.zeros_like(param, requires_grad=False)
        self._v[name] = torch.zeros_like(param, requires_grad=False)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def parameters(self) -> list[torch.Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grad_norms(self) -> dict[str, torch.Tensor]:
        return {name: torch.linalg.vector_norm(p.grad.detach())
                for name, p in self._params.items() if p.grad is not None}

    def grad_norm(self) -> float:
        norms = list(self.grad_norms().values())
        return float(torch.linalg.vector_norm(torch.stack(norms))) if norms else 0.0

    def clip_grad_norm(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if math.isfinite(norm) and norm > max_norm > 0:
            scale = max_norm / (norm + 1e-12)
            for p in self._params.values():
                if p.grad is not None:
                    p.grad.mul_(scale)
        return norm

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self._params.items()}


def adam_step(
    store: ParamStore,
    lr: float = 3e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """One bias-corrected Adam update over every entry; gradients are cleared."""
    norms = store.grad_norms()
    if norms and not math.isfinite(float(torch.stack(list(norms.values())).sum())):
        bad = next(name for name, n in norms.items() if not math.isfinite(float(n)))
        raise TrainingError(f"non-finite gradient in parameter {bad!r}")
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    with torch.no_grad():
        for name, p in store.items():
            g = p.grad
            if g is None:
                continue
            m = store._m[name]
            v = store._v[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = v.sqrt().div_(c2 ** 0.5).add_(eps)
            p.addcdiv_(m, denom, value=-lr / c1)
    store.zero_grad()
    return store


def init_linear_(weight: torch.Tensor, bias: torch.Tensor, gen: torch.Generator, scale: float = 1.0):
    """Uniform fan-in initialisation for a [in, out] weight."""
    bound = scale / np.sqrt(weight.shape[0])
    with torch.no_grad():
        weight.uniform_(-bound, bound, generator=gen)
        bias.uniform_(-bound, bound, generator=gen)


class Dense(nn.Module):
    """Dense layer storing its weight as [in, out]."""

    def __init__(self, n_in: int, n_out: int, gen: torch.Generator, scale: float = 1.0,
                 dtype=torch.float32):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_in, n_out, dtype=dtype))
        self.bias = nn.Parameter(torch.empty(n_out, dtype=dtype))
        init_linear_(self.weight, self.bias, gen, scale)

    def forward(self, x):
        return dense_forward(x, self.weight, self.bias)


class MLP(nn.Module):
    def __init__(self, sizes: list[int], gen: torch.Generator, activation: str = "tanh",
                 out_scale: float = 1.0, dtype=torch.float32):
        super().__init__()
        self.activation = activation
        self.layers = nn.ModuleList(
            Dense(a, b, gen, scale=out_scale if i == len(sizes) - 2 else 1.0, dtype=dtype)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        )

    def forward(self, x):
        act = ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x


def make_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed) & 0x7FFF_FFFF_FFFF_FFFF)
    return gen


# --- checkpoint container -------------------------------------------------

_MAGIC = b"PEGCKPT\x00"
_FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, tensors: Mapping[str, torch.Tensor | np.ndarray], meta: Mapping | None = None) -> None:
    """Write ``tensors`` to ``path`` and ``meta`` to ``path + '.json'``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _FORMAT_VERSION, len(tensors)))
        for name, value in tensors.items():
            arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
            code = _CODES.get(arr.dtype)
            if code is None:
                raise ConfigurationError(f"unsupported dtype {arr.dtype} for {name!r}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    sidecar = {"format_version": _FORMAT_VERSION, **dict(meta or {})}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True, default=str))


def load_checkpoint(path) -> tuple[OrderedDict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint not found: {path}")
    tensors: OrderedDict[str, torch.Tensor] = OrderedDict()
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ConfigurationError(f"{path} is not a checkpoint file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _FORMAT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            code, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            dtype = _DTYPES[code]
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(fh.read(n * dtype.itemsize), dtype=dtype).reshape(shape)
            tensors[name] = torch.from_numpy(arr.astype(dtype.newbyteorder("=")))
    meta_path = Path(str(path) + ".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return tensors, meta
