"""CVAE prediction head: latent encoders, sampling, KL, residual GRU decoders, loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, UsageError


class LatentDistribution(NamedTuple):
    """Diagonal Gaussian; ``sigma`` is a standard deviation, strictly positive."""

    mu: torch.Tensor
    sigma: torch.Tensor


class LatentSample(NamedTuple):
    z: torch.Tensor
    provenance: str  # "prior" | "posterior" | "mixed"


class PredictionOutput(NamedTuple):
    x_hat: torch.Tensor  # (..., t_obs, 2)
    y_hat: torch.Tensor  # (..., t_fut, 2)


class LossBreakdown(NamedTuple):
    total: torch.Tensor
    pred: torch.Tensor
    kl: torch.Tensor
    recon: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(v.detach()) for k, v in self._asdict().items()}


@dataclass
class LossWeights:
    kl: float = 1.0  # zeta
    recon: float = 0.5  # eta

    def __post_init__(self):
        if self.kl < 0 or self.recon < 0:
            raise ConfigError("loss weights must be non-negative")


class GaussianHead(nn.Module):
    """Two affine heads producing mu and softplus-positive sigma."""

    def __init__(self, in_dim: int, d_latent: int):
        super().__init__()
        self.mu = nn.Linear(in_dim, d_latent)
        self.sigma = nn.Linear(in_dim, d_latent)

    def forward(self, x: torch.Tensor) -> LatentDistribution:
        return LatentDistribution(self.mu(x), F.softplus(self.sigma(x)))


class PastEncoder(GaussianHead):
    """p(Z | X) from the past embedding."""


class FutureEncoder(GaussianHead):
    """q(Z | X, Y) from the concatenated past and future embeddings. Training only."""

    def forward(self, fused_past: torch.Tensor, fused_future: torch.Tensor) -> LatentDistribution:
        if not self.training:
            raise UsageError("the future encoder is only available in training mode")
        if fused_past.shape != fused_future.shape:
            raise UsageError(f"past/future embeddings differ in shape: {tuple(fused_past.shape)} "
                             f"vs {tuple(fused_future.shape)}")
        return super().forward(torch.cat([fused_past, fused_future], dim=-1))


def sample_latent(dist: LatentDistribution, generator: Optional[torch.Generator] = None,
                  eps: Optional[torch.Tensor] = None, provenance: str = "prior") -> LatentSample:
    """Reparameterized draw ``mu + sigma * eps``; pass ``eps`` to freeze the noise."""
    if eps is None:
        eps = torch.randn(dist.mu.shape, generator=generator, dtype=dist.mu.dtype)
    return LatentSample(dist.mu + dist.sigma * eps, provenance)


def kl_divergence(q: LatentDistribution, p: LatentDistribution, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over latent dims, averaged over valid agents."""
    if q.mu.shape != p.mu.shape:
        raise UsageError("KL between distributions of different shapes")
    var_q, var_p = q.sigma ** 2, p.sigma ** 2
    per_dim = torch.log(p.sigma) - torch.log(q.sigma) + (var_q + (q.mu - p.mu) ** 2) / (2 * var_p) - 0.5
    per_agent = per_dim.sum(-1)
    if mask is None:
        return per_agent.mean()
    m = mask.to(per_agent.dtype)
    return (per_agent * m).sum() / m.sum().clamp_min(1.0)


class ResidualDecoder(nn.Module):
    """GRU cell unrolled over a horizon, emitting displacements accumulated from an anchor."""

    def __init__(self, ctx_dim: int, hidden: int):
        super().__init__()
        self.init = nn.Linear(ctx_dim, hidden)
        self.cell = nn.GRUCell(ctx_dim + 2, hidden)
        self.readout = nn.Linear(hidden, 2)

    def forward(self, ctx: torch.Tensor, anchor: torch.Tensor, steps: int):
        """ctx (M, C), anchor (M, 2) -> (positions (M, steps, 2), displacements (M, steps, 2))."""
        h = torch.tanh(self.init(ctx))
        prev = torch.zeros(ctx.shape[0], 2, dtype=ctx.dtype)
        disps = []
        for _ in range(steps):
            h = self.cell(torch.cat([ctx, prev], dim=-1), h)
            prev = self.readout(h)
            disps.append(prev)
        d = torch.stack(disps, dim=1)
        return anchor.unsqueeze(1) + torch.cumsum(d, dim=1), d


class ResidualDecoders(nn.Module):
    """Block A reconstructs the past from the first observed point; block B predicts from the last."""

    def __init__(self, ctx_dim: int, hidden: int):
        super().__init__()
        self.past = ResidualDecoder(ctx_dim, hidden)
        self.future = ResidualDecoder(ctx_dim, hidden)

    def forward(self, z, fused_past, first_obs, last_obs, t_obs: int, t_fut: int) -> PredictionOutput:
        lead = z.shape[:-1]
        ctx = torch.cat([z, fused_past], dim=-1).reshape(-1, z.shape[-1] + fused_past.shape[-1])
        x_hat, _ = self.past(ctx, first_obs.reshape(-1, 2), t_obs)
        y_hat, _ = self.future(ctx, last_obs.reshape(-1, 2), t_fut)
        return PredictionOutput(x_hat.reshape(*lead, t_obs, 2), y_hat.reshape(*lead, t_fut, 2))


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    """Squared Euclidean error per agent-step, averaged over valid agents and steps."""
    sq = ((pred - target) ** 2).sum(-1).mean(-1)  # (...,) per agent
    if mask is None:
        return sq.mean()
    m = mask.to(sq.dtype)
    return (sq * m).sum() / m.sum().clamp_min(1.0)


def loss_total(output: PredictionOutput, X: torch.Tensor, Y: torch.Tensor,
               q: LatentDistribution, p: LatentDistribution, weights: LossWeights,
               mask: Optional[torch.Tensor] = None, latent_mask: Optional[torch.Tensor] = None) -> LossBreakdown:
    """``pred + zeta * KL + eta * recon``.

    ``latent_mask`` masks q/p when they are not aligned with the output rows
    (MetaMix doubles the outputs but not the distributions).
    """
    pred = masked_mse(output.y_hat, Y, mask)
    recon = masked_mse(output.x_hat, X, mask)
    kl = kl_divergence(q, p, mask if latent_mask is None else latent_mask)
    total = pred + weights.kl * kl + weights.recon * recon
    return LossBreakdown(total, pred, kl, recon)
