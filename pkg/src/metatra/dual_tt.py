"""Dual trajectory transformer encoder.

Two symmetric pathways over relativized coordinates:

* temporal -> interacted (TI): per-agent self-attention over time, then
  relation-typed graph attention on the last-step summaries;
* interacted -> temporal (IT): relation-typed graph attention at every
  frame, then self-attention over the resulting sequence.

Their per-agent outputs are concatenated into a ``2 * d_model`` embedding.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import List, NamedTuple, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import AGENT_TYPE_INDEX, AGENT_TYPES
from .errors import ConfigError, NumericError, UsageError

SCHEMES = ("distance-bands", "type-pairs", "team")
ACTIVATIONS = {
    "elu": F.elu,
    "relu": F.relu,
    "tanh": torch.tanh,
    "identity": lambda x: x,
}


@dataclass
class ModelConfig:
    d_model: int = 32
    n_heads_temporal: int = 2
    n_heads_relation: int = 2
    relation_scheme: str = "distance-bands"
    relation_types: int = 2
    neighbor_radius: float = 2.0
    band_edge: float = 1.0
    pair_types: Tuple[str, ...] = ("pedestrian", "bike", "car")
    d_latent: int = 16
    activation: str = "elu"
    n_layers: int = 1
    share_pathways: bool = False

    def __post_init__(self):
        self.pair_types = tuple(self.pair_types)
        self.validate()

    def validate(self):
        if self.d_model % self.n_heads_temporal or self.d_model % self.n_heads_relation:
            raise ConfigError(f"d_model={self.d_model} must be divisible by both head counts")
        if self.relation_scheme not in SCHEMES:
            raise ConfigError(f"unknown relation scheme {self.relation_scheme!r}; choose from {SCHEMES}")
        expected = {"distance-bands": 2, "team": 3, "type-pairs": len(self.pair_types) ** 2}[self.relation_scheme]
        if self.relation_types != expected:
            raise ConfigError(f"scheme {self.relation_scheme!r} defines {expected} relation types, "
                              f"config says {self.relation_types}")
        if self.relation_types < 1:
            raise ConfigError("relation_types must be >= 1")
        if not self.neighbor_radius > 0:
            raise ConfigError("neighbor_radius must be positive")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.n_layers < 1 or self.d_latent < 1:
            raise ConfigError("n_layers and d_latent must be >= 1")
        for t in self.pair_types:
            if t not in AGENT_TYPE_INDEX:
                raise ConfigError(f"unknown agent type {t!r} in pair_types")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pair_types"] = list(self.pair_types)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------- graph

@torch.no_grad()
def build_relation_graph(positions: torch.Tensor, types: torch.Tensor, mask: torch.Tensor,
                         config: ModelConfig) -> torch.Tensor:
    """Typed adjacency for one frame.

    positions (..., N, 2), types (..., N) agent-type codes, mask (..., N).
    Returns bool (..., R, N, N) with ``adj[..., r, i, j]`` true iff j is a
    neighbor of i under relation r.
    """
    n = positions.shape[-2]
    diff = positions.unsqueeze(-2) - positions.unsqueeze(-3)
    dist = torch.sqrt((diff * diff).sum(-1))
    eye = torch.eye(n, dtype=torch.bool, device=positions.device)
    near = (dist <= config.neighbor_radius) & mask.unsqueeze(-1) & mask.unsqueeze(-2) & ~eye
    scheme = config.relation_scheme
    if scheme == "distance-bands":
        rel = (dist > config.band_edge).long()
    elif scheme == "team":
        ball = AGENT_TYPE_INDEX["ball"]
        ti, tj = types.unsqueeze(-1), types.unsqueeze(-2)
        rel = torch.where(ti == tj, 0, 1)
        rel = torch.where((ti == ball) | (tj == ball), 2, rel)
    else:
        lookup = torch.full((len(AGENT_TYPES),), -1, dtype=torch.long)
        for k, name in enumerate(config.pair_types):
            lookup[AGENT_TYPE_INDEX[name]] = k
        local = lookup[types]
        if bool(((local < 0) & mask).any()):
            raise ConfigError(f"agent type outside pair_types {config.pair_types}")
        rel = local.unsqueeze(-1) * len(config.pair_types) + local.unsqueeze(-2)
    r_ids = torch.arange(config.relation_types, device=positions.device)
    onehot = rel.unsqueeze(-3) == r_ids.view(-1, 1, 1)
    return onehot & near.unsqueeze(-3)


def graph_edges(adj: torch.Tensor) -> List[List[Tuple[int, int]]]:
    """Directed edge lists ``(i, j)`` per relation for a single (R, N, N) adjacency."""
    return [[(int(i), int(j)) for i, j in torch.nonzero(a).tolist()] for a in adj]


# -------------------------------------------------------------- embedding

def sinusoidal_encoding(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    idx = torch.arange(0, dim, 2, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * idx / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return pe.to(dtype)


class PositionEmbedding(nn.Module):
    """Per-frame affine map of coordinates with tanh, plus sinusoidal time encoding."""

    def __init__(self, d_model: int):
        super().__init__()
        self.proj = nn.Linear(2, d_model)

    def forward(self, coords: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(coords).all():
            raise NumericError("non-finite coordinates passed to the position embedding")
        h = torch.tanh(self.proj(coords))
        return h + sinusoidal_encoding(coords.shape[-2], h.shape[-1], h.dtype)


# -------------------------------------------------------------- temporal

class TemporalAttentionLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.norm = nn.LayerNorm(d_model)

    def forward(self, x: torch.Tensor, time_mask: Optional[torch.Tensor] = None):
        *lead, T, d = x.shape

        def heads(t):
            return t.view(*lead, T, self.n_heads, self.d_head).transpose(-2, -3)

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if time_mask is not None:
            keep = time_mask.unsqueeze(-2).unsqueeze(-2)
            logits = logits.masked_fill(~keep, torch.finfo(logits.dtype).min)
        attn = torch.softmax(logits, dim=-1)
        mixed = (attn @ v).transpose(-2, -3).reshape(*lead, T, d)
        return self.norm(x + self.out(mixed)), attn


class TemporalMining(nn.Module):
    """Bidirectional multi-head self-attention over each agent's frames."""

    def __init__(self, d_model: int, n_heads: int, n_layers: int = 1):
        super().__init__()
        self.layers = nn.ModuleList(TemporalAttentionLayer(d_model, n_heads) for _ in range(n_layers))

    def forward(self, x: torch.Tensor, time_mask: Optional[torch.Tensor] = None):
        """x (..., T, d) -> (summary (..., d) at the last frame, sequence (..., T, d), attentions)."""
        if x.shape[-2] < 1:
            raise UsageError("temporal mining needs at least one frame")
        if time_mask is not None and not bool(time_mask.any(-1).all()):
            raise UsageError("temporal mining got a fully masked sequence")
        attns = []
        for layer in self.layers:
            x, a = layer(x, time_mask)
            attns.append(a)
        return x[..., -1, :], x, attns


# ------------------------------------------------------------- interacted

class AttentionRecord(NamedTuple):
    beta: torch.Tensor  # (B, R, K, N, N); zero where no edge
    gamma: torch.Tensor  # (B, R)
    hhat: torch.Tensor  # (B, R, N, d)


def relation_attention(h_i: torch.Tensor, h_neighbors: torch.Tensor, a_r: torch.Tensor) -> torch.Tensor:
    """Softmax over neighbors of ``a_r . [h_i || h_j]``.

    h_i (d,), h_neighbors (M, d), a_r (2d,). Returns weights (M,).
    """
    if h_neighbors.shape[0] == 0:
        raise UsageError("relation attention needs at least one neighbor")
    pair = torch.cat([h_i.expand_as(h_neighbors), h_neighbors], dim=-1)
    return torch.softmax(pair @ a_r, dim=0)


def relation_fuse(hhat: torch.Tensor, mask: torch.Tensor, q: torch.Tensor, W: torch.Tensor,
                  b: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Relation-level attention shared across the agents of each graph.

    hhat (B, R, N, d), mask (B, N). gamma (B, R) is the softmax over r of the
    valid-agent mean of ``q . tanh(W hhat + b)``; returns (gamma, fused (B, N, d)).
    """
    scores = torch.tanh(hhat @ W.T + b) @ q  # (B, R, N)
    m = mask.to(hhat.dtype).unsqueeze(1)
    count = m.sum(-1).clamp_min(1.0)
    logits = (scores * m).sum(-1) / count
    gamma = torch.softmax(logits, dim=-1)
    fused = (gamma.unsqueeze(-1).unsqueeze(-1) * hhat).sum(1)
    return gamma, fused


class InteractedMining(nn.Module):
    """Relation-typed multi-head graph attention followed by relation fusion.

    A node with no neighbors under relation r takes ``sigma(W_self h_i)`` for
    that relation; a node with no neighbors at all outputs exactly that.
    """

    def __init__(self, d_model: int, n_heads: int, n_relations: int, activation: str = "elu"):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.n_relations = n_relations
        self.act = ACTIVATIONS[activation]
        scale = 1.0 / math.sqrt(d_model)
        self.node_proj = nn.Parameter(torch.empty(n_relations, d_model, d_model).uniform_(-scale, scale))
        self.attn_src = nn.Parameter(torch.empty(n_relations, n_heads, self.d_head).uniform_(-scale, scale))
        self.attn_dst = nn.Parameter(torch.empty(n_relations, n_heads, self.d_head).uniform_(-scale, scale))
        self.self_proj = nn.Linear(d_model, d_model)
        self.fuse_W = nn.Parameter(torch.empty(d_model, d_model).uniform_(-scale, scale))
        self.fuse_b = nn.Parameter(torch.zeros(d_model))
        self.fuse_q = nn.Parameter(torch.empty(d_model).uniform_(-scale, scale))

    def forward(self, h: torch.Tensor, adj: torch.Tensor, mask: torch.Tensor):
        """h (B, N, d), adj (B, R, N, N), mask (B, N) -> (h_R (B, N, d), AttentionRecord)."""
        B, N, d = h.shape
        K, dh = self.n_heads, self.d_head
        proj = torch.einsum("bnd,red->brne", h, self.node_proj).view(B, self.n_relations, N, K, dh)
        src = torch.einsum("brnkh,rkh->brkn", proj, self.attn_src)
        dst = torch.einsum("brnkh,rkh->brkn", proj, self.attn_dst)
        logits = src.unsqueeze(-1) + dst.unsqueeze(-2)  # (B, R, K, N_i, N_j)
        edge = adj.unsqueeze(2)
        logits = logits.masked_fill(~edge, torch.finfo(logits.dtype).min)
        beta = torch.where(edge, torch.softmax(logits, dim=-1), torch.zeros((), dtype=h.dtype))
        agg = torch.einsum("brkij,brjkh->brikh", beta, proj).reshape(B, self.n_relations, N, d)
        fallback = self.act(self.self_proj(h))
        has_nb = adj.any(-1)  # (B, R, N)
        hhat = torch.where(has_nb.unsqueeze(-1), self.act(agg), fallback.unsqueeze(1))
        gamma, fused = relation_fuse(hhat, mask, self.fuse_q, self.fuse_W, self.fuse_b)
        isolated = ~has_nb.any(1)
        out = torch.where(isolated.unsqueeze(-1), fallback, fused)
        return out, AttentionRecord(beta, gamma, hhat)


# --------------------------------------------------------------- pathways

class DualTT(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.embed_ti = PositionEmbedding(c.d_model)
        self.temporal_ti = TemporalMining(c.d_model, c.n_heads_temporal, c.n_layers)
        self.interact_ti = InteractedMining(c.d_model, c.n_heads_relation, c.relation_types, c.activation)
        if c.share_pathways:
            self.embed_it, self.temporal_it, self.interact_it = self.embed_ti, self.temporal_ti, self.interact_ti
        else:
            self.embed_it = PositionEmbedding(c.d_model)
            self.temporal_it = TemporalMining(c.d_model, c.n_heads_temporal, c.n_layers)
            self.interact_it = InteractedMining(c.d_model, c.n_heads_relation, c.relation_types, c.activation)

    @property
    def out_dim(self) -> int:
        return 2 * self.config.d_model

    def graphs(self, coords: torch.Tensor, types: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Per-frame adjacency (W, T, R, N, N) for coords (W, N, T, 2)."""
        pos = coords.transpose(1, 2)  # (W, T, N, 2)
        T = pos.shape[1]
        return build_relation_graph(pos, types.unsqueeze(1).expand(-1, T, -1),
                                    mask.unsqueeze(1).expand(-1, T, -1), self.config)

    def pathway_ti(self, coords, mask, adj, records=None):
        h_T, _, _ = self.temporal_ti(self.embed_ti(coords))
        out, rec = self.interact_ti(h_T, adj[:, -1], mask)
        if records is not None:
            records.append(rec)
        return out

    def pathway_it(self, coords, mask, adj, records=None):
        W, N, T, _ = coords.shape
        e = self.embed_it(coords).transpose(1, 2).reshape(W * T, N, -1)
        a = adj.reshape(W * T, *adj.shape[2:])
        m = mask.unsqueeze(1).expand(-1, T, -1).reshape(W * T, N)
        h, rec = self.interact_it(e, a, m)
        if records is not None:
            records.append(rec)
        seq = h.view(W, T, N, -1).transpose(1, 2)
        out, _, _ = self.temporal_it(seq)
        return out

    def forward(self, coords: torch.Tensor, mask: torch.Tensor, types: torch.Tensor,
                adj: Optional[torch.Tensor] = None, records: Optional[list] = None) -> torch.Tensor:
        """coords (W, N, T, 2) relativized; returns fused embedding (W, N, 2 * d_model).

        Padded slots come out zeroed.
        """
        if adj is None:
            adj = self.graphs(coords, types, mask)
        fused = torch.cat([self.pathway_ti(coords, mask, adj, records),
                           self.pathway_it(coords, mask, adj, records)], dim=-1)
        return fused * mask.unsqueeze(-1).to(fused.dtype)
