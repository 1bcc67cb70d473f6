"""The full predictor: past/future dual-TT encoders + CVAE head + residual decoders."""
from __future__ import annotations

from typing import Callable, NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn

from .cvae import (FutureEncoder, LossWeights, PastEncoder, PredictionOutput,
                   ResidualDecoders, loss_total, sample_latent)
from .data import Batch
from .dual_tt import DualTT, ModelConfig
from .errors import UsageError


class BatchTensors(NamedTuple):
    past: torch.Tensor  # (W, N, t_obs, 2)
    future: torch.Tensor  # (W, N, t_fut, 2)
    mask: torch.Tensor  # (W, N)
    types: torch.Tensor  # (W, N)
    reference: torch.Tensor  # (W, 2)

    @classmethod
    def from_batch(cls, batch: Batch, dtype=torch.float32) -> "BatchTensors":
        return cls(torch.as_tensor(batch.past, dtype=dtype), torch.as_tensor(batch.future, dtype=dtype),
                   torch.as_tensor(batch.mask), torch.as_tensor(batch.types),
                   torch.as_tensor(batch.reference, dtype=dtype))


class MetaTra(nn.Module):
    def __init__(self, config: ModelConfig, t_obs: int = 8, t_pre: int = 20):
        super().__init__()
        if not 0 < t_obs < t_pre:
            raise UsageError(f"need 0 < t_obs < t_pre, got {t_obs}, {t_pre}")
        self.config = config
        self.t_obs = t_obs
        self.t_fut = t_pre - t_obs
        d_fused = 2 * config.d_model
        self.past_encoder_tt = DualTT(config)
        self.future_encoder_tt = DualTT(config)
        self.prior = PastEncoder(d_fused, config.d_latent)
        self.posterior = FutureEncoder(2 * d_fused, config.d_latent)
        self.decoders = ResidualDecoders(config.d_latent + d_fused, config.d_model)

    def encode_past(self, bt: BatchTensors):
        fused = self.past_encoder_tt(bt.past, bt.mask, bt.types)
        return fused, self.prior(fused)

    def decode(self, z, fused_past, bt: BatchTensors) -> PredictionOutput:
        lead = z.shape[:-3]
        first = bt.past[..., 0, :].expand(*lead, *bt.past.shape[:2], 2)
        last = bt.past[..., -1, :].expand(*lead, *bt.past.shape[:2], 2)
        fused = fused_past.expand(*lead, *fused_past.shape)
        return self.decoders(z, fused, first, last, self.t_obs, self.t_fut)

    def forward(self, bt: BatchTensors, weights: LossWeights, generator: Optional[torch.Generator] = None,
                eps: Optional[torch.Tensor] = None,
                latent_hook: Optional[Callable[[torch.Tensor], torch.Tensor]] = None):
        """Single-sample training loss.

        ``latent_hook`` maps the posterior sample Z (W, N, d) to an extra
        latent batch of the same shape; the decoder then sees both and the
        ground truth is duplicated (MetaMix). Returns (LossBreakdown, q, output).
        """
        fused_p, p = self.encode_past(bt)
        fused_f = self.future_encoder_tt(bt.future, bt.mask, bt.types)
        q = self.posterior(fused_p, fused_f)
        z = sample_latent(q, generator=generator, eps=eps, provenance="posterior").z
        if latent_hook is None:
            out = self.decode(z.unsqueeze(0), fused_p, bt)
            copies = 1
        else:
            out = self.decode(torch.stack([z, latent_hook(z)]), fused_p, bt)
            copies = 2
        X = bt.past.expand(copies, *bt.past.shape)
        Y = bt.future.expand(copies, *bt.future.shape)
        mask = bt.mask.expand(copies, *bt.mask.shape)
        loss = loss_total(out, X, Y, q, p, weights, mask=mask, latent_mask=bt.mask)
        return loss, q, out


def build_model(config: ModelConfig, t_obs: int = 8, t_pre: int = 20, seed: int = 0,
                dtype=torch.float32) -> MetaTra:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = MetaTra(config, t_obs, t_pre)
    return model.to(dtype)


@torch.no_grad()
def predict_k(model: MetaTra, batch, K: int = 20, seed: int = 0) -> np.ndarray:
    """K prior samples decoded and returned in scene coordinates, shape (K, W, N, t_fut, 2)."""
    if K < 1:
        raise UsageError("K must be >= 1")
    dtype = next(model.parameters()).dtype
    bt = batch if isinstance(batch, BatchTensors) else BatchTensors.from_batch(batch, dtype)
    was_training = model.training
    model.eval()
    try:
        fused, p = model.encode_past(bt)
        gen = torch.Generator().manual_seed(seed)
        eps = torch.randn((K, *p.mu.shape), generator=gen, dtype=dtype)
        z = p.mu + p.sigma * eps
        out = model.decode(z, fused, bt)
    finally:
        model.train(was_training)
    y = out.y_hat + bt.reference[:, None, None, :]
    return y.double().numpy()
