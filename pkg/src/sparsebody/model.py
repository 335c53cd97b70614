"""Partitioned spatio-temporal transformer for full-body pose from sparse tracking.

Each of the five body partitions becomes one token per frame. A block runs
temporal self-attention per partition (mirrored limbs share weights), then
mixes the five tokens of every frame through two gated branches: data-driven
self-attention and a learnable per-channel partition graph.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import skeleton as sk
from .container import read_container, write_container
from .dataio import AUX_DIM, FEATURE_DIM, partition
from .errors import FileFormatError, ShapeMismatch
from .rotmath import IDENTITY_6D

# partition p -> shared parameter set (torso, arms, legs)
SHARE_INDEX = (0, 1, 1, 2, 2)
SHARE_GROUPS = ((0,), (1, 2), (3, 4))
TOPO_DIAG = 1.0
TOPO_TORSO_LIMB = 0.1
GATE_ATTN_INIT = 2.0
GATE_TOPO_INIT = -2.0
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    n_blocks: int = 6
    embed_dim: int = 256
    n_heads: int = 8
    window: int = 40
    dropout: float = 0.1
    ffn_mult: int = 4
    part_sizes: tuple[int, ...] = field(default=(6, 4, 4, 4, 4))

    def __post_init__(self):
        self.part_sizes = tuple(int(n) for n in self.part_sizes)
        if self.n_blocks < 1:
            raise ValueError("need at least one block")
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if len(self.part_sizes) != sk.N_PARTS:
            raise ValueError("expected five partitions")
        if self.window < 1:
            raise ValueError("window must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["part_sizes"] = list(self.part_sizes)
        return d


@dataclass
class PoseEstimate:
    rot6d: torch.Tensor  # (..., T, 22, 6) local rotations, joint 0 global
    beta: torch.Tensor  # (..., T, 16)
    positions: torch.Tensor | None = None  # (..., T, 22, 3), filled after FK


def sinusoidal_encoding(T: int, E: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(T, dtype=torch.float64)[:, None]
    i = torch.arange(0, E, 2, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * i / E)
    pe = torch.zeros(T, E, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)[:, : E // 2]
    return pe.to(dtype)


class MultiHeadSelfAttention(nn.Module):
    """Self-attention over the second-to-last axis of (..., N, E)."""

    def __init__(self, dim: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.attn_drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        *lead, N, E = x.shape
        h, d = self.n_heads, E // self.n_heads
        q, k, v = self.qkv(x).reshape(*lead, N, 3, h, d).movedim(-3, 0).transpose(-2, -3)
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
        out = self.attn_drop(w) @ v
        out = self.proj(out.transpose(-2, -3).reshape(*lead, N, E))
        return (out, w) if return_weights else out


class MLP(nn.Sequential):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, dropout: float = 0.0):
        super().__init__(nn.Linear(d_in, d_hidden), nn.GELU(), nn.Dropout(dropout), nn.Linear(d_hidden, d_out))


class KinematicAttention(nn.Module):
    """Gated fusion of partition self-attention and a learnable partition graph.

    ``Z = LN(H + sigmoid(G_A) * SA(H) + sigmoid(G_T) * topo(H))`` with
    ``topo(H)[t, p, e] = sum_q tanh(W[p, q, e]) H[t, q, e]``.
    """

    def __init__(self, dim: int, n_heads: int, n_parts: int = sk.N_PARTS, dropout: float = 0.0):
        super().__init__()
        self.attn = MultiHeadSelfAttention(dim, n_heads, dropout)
        self.w_topo = nn.Parameter(torch.zeros(n_parts, n_parts, dim))
        self.gate_attn = nn.Parameter(torch.full((dim,), GATE_ATTN_INIT))
        self.gate_topo = nn.Parameter(torch.full((dim,), GATE_TOPO_INIT))
        self.norm = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def static_branch(self, H: torch.Tensor) -> torch.Tensor:
        return torch.einsum("pqe,...qe->...pe", torch.tanh(self.w_topo), H)

    def forward(self, H: torch.Tensor, record: dict | None = None) -> torch.Tensor:
        dyn = torch.sigmoid(self.gate_attn) * self.drop(self.attn(H))
        static = torch.sigmoid(self.gate_topo) * self.static_branch(H)
        if record is not None:
            record.update(H=H.detach(), dyn=dyn.detach(), static=static.detach())
        return self.norm(H + dyn + static)


class TKBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        E = cfg.embed_dim
        self.temporal = nn.ModuleList(MultiHeadSelfAttention(E, cfg.n_heads, cfg.dropout) for _ in SHARE_GROUPS)
        self.kinematic = KinematicAttention(E, cfg.n_heads, sk.N_PARTS, cfg.dropout)
        self.ffn = MLP(E, cfg.ffn_mult * E, E, cfg.dropout)
        self.norm = nn.LayerNorm(E)
        self.drop = nn.Dropout(cfg.dropout)

    def temporal_attention(self, F: torch.Tensor) -> torch.Tensor:
        """Per-partition attention over time; F is (B, T, P, E)."""
        out = torch.empty_like(F)
        for attn, group in zip(self.temporal, SHARE_GROUPS):
            x = F[:, :, list(group)].permute(0, 2, 1, 3)  # (B, g, T, E)
            out[:, :, list(group)] = attn(x).permute(0, 2, 1, 3)
        return out

    def forward(self, F: torch.Tensor, record: dict | None = None) -> torch.Tensor:
        H = F + self.drop(self.temporal_attention(F))
        Z = self.kinematic(H, record)
        return self.norm(Z + self.drop(self.ffn(Z)))


class SparsePoseNet(nn.Module):
    """Maps (B, T, 22, 18) features plus (B, T, 3) head displacement to poses."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        E = cfg.embed_dim
        P = sk.N_PARTS
        self.scheme = sk.default_partition()
        if self.scheme.sizes != cfg.part_sizes:
            raise ValueError("config partition sizes differ from the joint partition")
        self.embed = nn.ModuleList(nn.Linear(n * FEATURE_DIM + AUX_DIM, E) for n in cfg.part_sizes)
        self.modulation = MLP(P * E, 2 * E, 2 * P * E)
        self.blocks = nn.ModuleList(TKBlock(cfg) for _ in range(cfg.n_blocks))
        self.pose_heads = nn.ModuleList(MLP(E, E, cfg.part_sizes[g[0]] * 6) for g in SHARE_GROUPS)
        self.shape_head = MLP(P * E, E, sk.N_BETAS)

    # -- stages -----------------------------------------------------------
    def embed_parts(self, X: torch.Tensor, aux: torch.Tensor) -> torch.Tensor:
        """Per-partition linear embedding plus positional encoding -> (B, T, P, E)."""
        T = X.shape[-3]
        pe = sinusoidal_encoding(T, self.config.embed_dim, X.dtype)
        tokens = []
        for emb, Xp in zip(self.embed, partition(X, self.scheme)):
            flat = torch.cat([Xp.flatten(-2), aux], dim=-1)
            tokens.append(emb(flat) + pe)
        return torch.stack(tokens, dim=-2)

    def modulate(self, E: torch.Tensor) -> torch.Tensor:
        """Scale-and-shift each partition token from the concatenation of all five."""
        B, T, P, D = E.shape
        ab = self.modulation(E.reshape(B, T, P * D)).reshape(B, T, P, 2, D)
        alpha, shift = ab[..., 0, :], ab[..., 1, :]
        return E * (1 + alpha) + shift

    def decode_pose(self, F: torch.Tensor) -> torch.Tensor:
        B, T = F.shape[:2]
        parts = [None] * sk.N_PARTS
        for head, group in zip(self.pose_heads, SHARE_GROUPS):
            out = head(F[:, :, list(group)])  # (B, T, g, n*6)
            for k, p in enumerate(group):
                parts[p] = out[:, :, k].reshape(B, T, self.config.part_sizes[p], 6)
        stacked = torch.cat(parts, dim=-2)
        return stacked[..., torch.as_tensor(self.scheme.inverse), :]

    def decode_shape(self, F: torch.Tensor) -> torch.Tensor:
        return self.shape_head(F.flatten(-2))

    def forward(self, X: torch.Tensor, aux: torch.Tensor, records: list | None = None) -> PoseEstimate:
        if X.shape[-2:] != (sk.N_JOINTS, FEATURE_DIM) or aux.shape[-1] != AUX_DIM:
            raise ShapeMismatch(f"bad input shapes {tuple(X.shape)}, {tuple(aux.shape)}")
        squeeze = X.ndim == 3
        if squeeze:
            X, aux = X[None], aux[None]
        F = self.modulate(self.embed_parts(X, aux))
        for block in self.blocks:
            rec = {} if records is not None else None
            F = block(F, rec)
            if records is not None:
                records.append(rec)
        est = PoseEstimate(self.decode_pose(F), self.decode_shape(F))
        if squeeze:
            est = PoseEstimate(est.rot6d[0], est.beta[0])
        return est

    # -- bookkeeping --------------------------------------------------------
    def parameter_groups(self) -> dict[str, list[str]]:
        """Parameter names bucketed by role, for gradient checks and reports."""
        groups: dict[str, list[str]] = {}
        for name, _ in self.named_parameters():
            if ".w_topo" in name:
                key = "w_topo"
            elif ".gate_attn" in name:
                key = "gate_attn"
            elif ".gate_topo" in name:
                key = "gate_topo"
            elif ".temporal." in name:
                key = "temporal_attention"
            elif ".kinematic.attn." in name:
                key = "spatial_attention"
            elif ".ffn." in name:
                key = "ffn"
            elif "norm." in name:
                key = "layer_norm"
            else:
                key = name.split(".")[0]
            groups.setdefault(key, []).append(name)
        return groups


def init_params(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> SparsePoseNet:
    """Build a network with deterministic initial weights.

    Linear weights are U(-1/sqrt(fan_in), 1/sqrt(fan_in)) and biases zero,
    drawn in registration order from a generator seeded with ``seed``.
    Pose-head output biases start at the identity rotation. The partition
    graph starts as a torso-rooted star and the gates at fixed logits.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SparsePoseNet(cfg)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, nn.Linear):
                bound = 1.0 / math.sqrt(mod.in_features)
                mod.weight.copy_(torch.rand(mod.weight.shape, generator=gen) * 2 * bound - bound)
                mod.bias.zero_()
            elif isinstance(mod, nn.LayerNorm):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
            elif isinstance(mod, KinematicAttention):
                mod.w_topo.copy_(star_topology(sk.N_PARTS, cfg.embed_dim))
                mod.gate_attn.fill_(GATE_ATTN_INIT)
                mod.gate_topo.fill_(GATE_TOPO_INIT)
        for head, group in zip(model.pose_heads, SHARE_GROUPS):
            n = cfg.part_sizes[group[0]]
            head[-1].bias.copy_(torch.tensor(IDENTITY_6D).repeat(n))
    return model.to(dtype)


def star_topology(n_parts: int, dim: int) -> torch.Tensor:
    """Identity on the diagonal, torso<->limb links, no limb<->limb links."""
    W = torch.zeros(n_parts, n_parts, dim)
    W[range(n_parts), range(n_parts)] = TOPO_DIAG
    W[0, 1:] = TOPO_TORSO_LIMB
    W[1:, 0] = TOPO_TORSO_LIMB
    return W


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(path, model: SparsePoseNet, meta: dict | None = None) -> None:
    header = {
        "kind": "checkpoint",
        "checkpoint_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "meta": meta or {},
    }
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    write_container(path, header, arrays)


def load_checkpoint(path) -> tuple[SparsePoseNet, dict]:
    header, arrays = read_container(path, kind="checkpoint")
    if header.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise FileFormatError(f"{path}: unsupported checkpoint version")
    cfg = ModelConfig(**header["config"])
    dtypes = {a.dtype for a in arrays.values()}
    dtype = torch.float64 if np.dtype("<f8") in dtypes else torch.float32
    model = SparsePoseNet(cfg).to(dtype)
    state = {k: torch.from_numpy(v) for k, v in arrays.items()}
    missing = set(model.state_dict()) ^ set(state)
    if missing:
        raise FileFormatError(f"{path}: parameter names differ: {sorted(missing)[:5]}")
    model.load_state_dict(state)
    return model, header.get("meta", {})
