"""Meta-learning trainer: task sampling, serial inner loop, parallel outer merge, MetaMix, ERM.

The optimizer pieces (:func:`inner_step`, :func:`parallel_outer_update`) work on
plain named-tensor snapshots and loss callables, so they can be checked on
scalar surrogates as well as on the full model.
"""
from __future__ import annotations

import copy
import logging
import math
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.func import functional_call

from .cvae import LatentDistribution, LossWeights
from .errors import ConfigError, NumericError
from .model import BatchTensors, MetaTra

log = logging.getLogger(__name__)

LossFn = Callable[[Mapping[str, torch.Tensor]], torch.Tensor]


# ------------------------------------------------------------------- config

@dataclass
class MetaConfig:
    inner_lr: float = 0.0015  # lambda, serial inner loop
    outer_lr: float = 0.001  # kappa, parallel outer merge
    lr_source: Optional[float] = None  # lambda_S, defaults to inner_lr
    lr_target: Optional[float] = None  # lambda_T, defaults to inner_lr
    serial_tasks: int = 4  # J
    parallel_paths: int = 4  # C
    epochs: int = 500
    meta_learning: bool = True  # ML
    serial_parallel: bool = True  # SPT
    metamix: bool = True  # MM
    second_order: bool = False
    mix_alpha: float = 1.0
    mix_beta: float = 1.0
    ema_decay: float = 0.9
    clip_norm: Optional[float] = 5.0
    eval_batches: int = 2
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (self.inner_lr > 0 and self.outer_lr > 0):
            raise ConfigError("inner_lr and outer_lr must be positive")
        for name in ("lr_source", "lr_target"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.serial_tasks < 1 or self.parallel_paths < 1 or self.epochs < 1:
            raise ConfigError("serial_tasks, parallel_paths and epochs must be >= 1")
        if self.metamix and not self.meta_learning:
            raise ConfigError("MetaMix requires meta-learning (MM implies ML)")
        if not 0 <= self.ema_decay < 1:
            raise ConfigError("ema_decay must lie in [0, 1)")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive or null")

    @property
    def J(self) -> int:
        return self.serial_tasks if self.serial_parallel else 1

    @property
    def C(self) -> int:
        return self.parallel_paths if self.serial_parallel else 1

    @property
    def lam_s(self) -> float:
        return self.inner_lr if self.lr_source is None else self.lr_source

    @property
    def lam_t(self) -> float:
        return self.inner_lr if self.lr_target is None else self.lr_target

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetaConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimizerConfig:
    """Plain single-loop optimizer for the ERM baseline."""

    name: str = "sgd"
    lr: float = 0.0015
    epochs: int = 500
    clip_norm: Optional[float] = 5.0
    lr_decay: float = 1.0  # per-epoch multiplicative factor

    def __post_init__(self):
        if self.name not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.name!r}")
        if self.lr <= 0 or self.epochs < 1:
            raise ConfigError("optimizer lr must be positive and epochs >= 1")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** epoch


# ----------------------------------------------------------------- snapshot

class ParameterSnapshot(OrderedDict):
    """Value copy of every trainable array, keyed by parameter name."""

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "ParameterSnapshot":
        return cls((n, p.detach().clone()) for n, p in module.named_parameters())

    def copy(self) -> "ParameterSnapshot":
        return ParameterSnapshot((n, t.detach().clone()) for n, t in self.items())

    def load_into(self, module: torch.nn.Module) -> None:
        with torch.no_grad():
            for n, p in module.named_parameters():
                p.copy_(self[n])

    def _check(self, other: "ParameterSnapshot"):
        if list(self) != list(other):
            raise ConfigError(f"snapshots have different arrays: {sorted(set(self) ^ set(other))}")
        for n in self:
            if self[n].shape != other[n].shape:
                raise ConfigError(f"shape mismatch for {n}: {tuple(self[n].shape)} vs {tuple(other[n].shape)}")

    def __add__(self, other):
        self._check(other)
        return ParameterSnapshot((n, self[n] + other[n]) for n in self)

    def __sub__(self, other):
        self._check(other)
        return ParameterSnapshot((n, self[n] - other[n]) for n in self)

    def scale(self, factor: float) -> "ParameterSnapshot":
        return ParameterSnapshot((n, factor * t) for n, t in self.items())

    def check_finite(self):
        for n, t in self.items():
            if not torch.isfinite(t).all():
                raise NumericError(f"non-finite values in parameter {n}")

    def equal(self, other) -> bool:
        return list(self) == list(other) and all(torch.equal(self[n], other[n]) for n in self)


def _grads(loss: torch.Tensor, params: Mapping[str, torch.Tensor], create_graph=False) -> "OrderedDict[str, torch.Tensor]":
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {float(loss)}")
    names = list(params)
    if not loss.requires_grad:  # loss does not depend on the parameters
        return OrderedDict((n, torch.zeros_like(params[n])) for n in names)
    gs = torch.autograd.grad(loss, [params[n] for n in names], create_graph=create_graph, allow_unused=True)
    out = OrderedDict()
    for n, g in zip(names, gs):
        g = torch.zeros_like(params[n]) if g is None else g
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {n}")
        out[n] = g
    return out


def clip_grads(grads, max_norm: Optional[float]):
    """Rescale to global L2 norm ``max_norm`` (same rule as ``clip_grad_norm_``)."""
    if max_norm is None:
        return grads
    total = torch.sqrt(sum((g.detach() ** 2).sum() for g in grads.values()))
    coef = torch.clamp(max_norm / (total + 1e-6), max=1.0)
    if float(coef) >= 1.0:
        return grads
    return OrderedDict((n, g * coef) for n, g in grads.items())


def sgd_update(theta, grads, lr: float) -> ParameterSnapshot:
    return ParameterSnapshot((n, (theta[n] - lr * grads[n]).detach()) for n in theta)


def _leaves(theta) -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict((n, t.detach().clone().requires_grad_(True)) for n, t in theta.items())


# ----------------------------------------------------------------- updates

class StepInfo(NamedTuple):
    loss_source: float
    loss_target: Optional[float]


def inner_step(theta: Mapping[str, torch.Tensor], loss_source: LossFn, loss_target: Optional[LossFn],
               lr_source: float, lr_target: Optional[float] = None, second_order: bool = False,
               clip_norm: Optional[float] = None) -> Tuple[ParameterSnapshot, StepInfo]:
    """One meta-train / meta-test update.

    g_S = grad L_S(theta); theta' = theta - lr_S g_S; g_T = grad L_T(theta');
    returns theta - (lr_S g_S + lr_T g_T). In first-order mode g_T is taken
    at theta' as a fresh leaf; in second-order mode it is differentiated
    through theta'(theta). With ``loss_target=None`` this is a plain
    gradient step.
    """
    lr_target = lr_source if lr_target is None else lr_target
    params = _leaves(theta)
    ls = loss_source(params)
    g_s = clip_grads(_grads(ls, params, create_graph=second_order and loss_target is not None), clip_norm)
    if loss_target is None:
        return sgd_update(theta, g_s, lr_source), StepInfo(ls.item(), None)
    if second_order:
        adapted = OrderedDict((n, params[n] - lr_source * g_s[n]) for n in params)
        lt = loss_target(adapted)
        g_t = _grads(lt, params)
    else:
        adapted = _leaves(sgd_update(theta, g_s, lr_source))
        lt = loss_target(adapted)
        g_t = _grads(lt, adapted)
    g_t = clip_grads(g_t, clip_norm)
    new = ParameterSnapshot(
        (n, (theta[n] - (lr_source * g_s[n].detach() + lr_target * g_t[n].detach())).detach()) for n in theta)
    return new, StepInfo(ls.item(), lt.item())


def parallel_outer_update(theta: ParameterSnapshot, snapshots: Sequence[ParameterSnapshot],
                          kappa: float) -> ParameterSnapshot:
    """theta + kappa * (mean_c snapshot_c - theta); the mean is taken in list order."""
    if not snapshots:
        raise ConfigError("parallel_outer_update needs at least one snapshot")
    for s in snapshots:
        theta._check(s) if isinstance(theta, ParameterSnapshot) else ParameterSnapshot(theta)._check(s)
    mean = ParameterSnapshot((n, torch.stack([s[n] for s in snapshots]).mean(0)) for n in theta)
    if kappa == 1.0:
        return mean
    return ParameterSnapshot((n, theta[n] + kappa * (mean[n] - theta[n])) for n in theta)


# --------------------------------------------------------------- MetaMix

class SourcePriorAggregate:
    """Exponential moving average of batch-mean posterior (mu, sigma) over meta-train batches."""

    def __init__(self, decay: float = 0.9):
        self.decay = decay
        self.mu: Optional[torch.Tensor] = None
        self.sigma: Optional[torch.Tensor] = None
        self.updates = 0

    def update(self, mu: torch.Tensor, sigma: torch.Tensor):
        mu, sigma = mu.detach().clone(), sigma.detach().clone()
        if self.mu is None:
            self.mu, self.sigma = mu, sigma
        else:
            self.mu = self.decay * self.mu + (1 - self.decay) * mu
            self.sigma = self.decay * self.sigma + (1 - self.decay) * sigma
        self.updates += 1

    def update_from(self, q: LatentDistribution, mask: torch.Tensor):
        m = mask.to(q.mu.dtype).unsqueeze(-1)
        count = m.sum().clamp_min(1.0)
        self.update((q.mu * m).sum((0, 1)) / count, (q.sigma * m).sum((0, 1)) / count)

    def distribution(self) -> Optional[LatentDistribution]:
        if self.mu is None:
            return None
        return LatentDistribution(self.mu, self.sigma)

    def copy(self) -> "SourcePriorAggregate":
        return copy.deepcopy(self)

    @classmethod
    def merge(cls, parts: Sequence["SourcePriorAggregate"], decay: float) -> "SourcePriorAggregate":
        live = [p for p in parts if p.mu is not None]
        out = cls(decay)
        if live:
            out.mu = torch.stack([p.mu for p in live]).mean(0)
            out.sigma = torch.stack([p.sigma for p in live]).mean(0)
            out.updates = max(p.updates for p in live)
        return out


def metamix(z_t: torch.Tensor, source_prior: Optional[LatentDistribution], rng: np.random.Generator,
            generator: Optional[torch.Generator] = None, alpha: float = 1.0, beta: float = 1.0,
            rho: Optional[float] = None) -> Tuple[torch.Tensor, dict]:
    """Z_mix = Z_T + (1 - rho) Z_add with rho ~ Beta(alpha, beta) once per batch and Z_add ~ N(mu_S, sigma_S)."""
    if source_prior is None:
        log.warning("MetaMix requested before any source statistics exist; using Z_mix = Z_T")
        return z_t, {"rho": None, "fallback": True}
    if rho is None:
        rho = float(rng.beta(alpha, beta))
    eps = torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype)
    z_add = source_prior.mu + source_prior.sigma * eps
    return z_t + (1.0 - rho) * z_add, {"rho": rho, "fallback": False}


# ------------------------------------------------------------------- tasks

class TaskBatch(NamedTuple):
    role: str  # "meta_train" | "meta_test"
    domain_id: str
    index: int
    batch: BatchTensors


def _pool(source_batches: Mapping[str, Sequence]) -> List[Tuple[str, int]]:
    return [(d, i) for d in sorted(source_batches) for i in range(len(source_batches[d]))]


def sample_tasks(source_batches: Mapping[str, Sequence[BatchTensors]], rng: np.random.Generator):
    """Pick a pseudo-target domain uniformly; tau_T from it, tau_S from the other source domains."""
    domains = [d for d in sorted(source_batches) if len(source_batches[d])]
    if len(domains) < 2:
        raise ConfigError("meta-learning needs at least two non-empty source domains; "
                          "disable meta_learning for ERM training")
    target = domains[int(rng.integers(len(domains)))]
    t_idx = int(rng.integers(len(source_batches[target])))
    pool = [(d, i) for d in domains if d != target for i in range(len(source_batches[d]))]
    s_dom, s_idx = pool[int(rng.integers(len(pool)))]
    return (TaskBatch("meta_train", s_dom, s_idx, source_batches[s_dom][s_idx]),
            TaskBatch("meta_test", target, t_idx, source_batches[target][t_idx]))


class TaskSampler:
    """Per-path task stream. Without meta-learning it walks a seeded permutation of the pooled batches."""

    def __init__(self, source_batches: Mapping[str, Sequence[BatchTensors]], rng: np.random.Generator, meta: bool):
        self.source_batches = source_batches
        self.rng = rng
        self.meta = meta
        self.pool = _pool(source_batches)
        if not self.pool:
            raise ConfigError("no training batches")
        if not meta:
            self.order = rng.permutation(len(self.pool))
            self.cursor = 0

    def next(self):
        if self.meta:
            return sample_tasks(self.source_batches, self.rng)
        d, i = self.pool[int(self.order[self.cursor % len(self.pool)])]
        self.cursor += 1
        return TaskBatch("meta_train", d, i, self.source_batches[d][i]), None

    def noise_seed(self) -> int:
        return int(self.rng.integers(0, 2 ** 62))


def epoch_rng(seed: int, epoch: int, path: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, path])


# -------------------------------------------------------------- model glue

class ModelLoss:
    """Loss closures over a model evaluated with externally supplied parameters."""

    def __init__(self, model: MetaTra, weights: LossWeights):
        self.model = model
        self.weights = weights

    def __call__(self, params, bt: BatchTensors, seed: int, latent_hook=None):
        gen = torch.Generator().manual_seed(seed)
        loss, q, out = functional_call(self.model, dict(params), (bt, self.weights),
                                       {"generator": gen, "latent_hook": latent_hook})
        return loss, q, out

    def replica(self) -> "ModelLoss":
        return ModelLoss(copy.deepcopy(self.model), self.weights)


class PathResult(NamedTuple):
    theta: ParameterSnapshot
    aggregate: SourcePriorAggregate
    losses: List[float]


def serial_inner_loop(theta0: ParameterSnapshot, J: int, sampler: TaskSampler, loss: ModelLoss,
                      config: MetaConfig, aggregate: SourcePriorAggregate) -> PathResult:
    """J successive inner steps on freshly sampled tasks, starting from a copy of theta0."""
    theta = theta0.copy()
    losses = []
    for _ in range(J):
        tau_s, tau_t = sampler.next()
        s_seed = sampler.noise_seed()

        def source_loss(params, bt=tau_s.batch, seed=s_seed):
            lb, q, _ = loss(params, bt, seed)
            if config.metamix:
                aggregate.update_from(q, bt.mask)
            return lb.total

        target_loss = None
        if config.meta_learning and tau_t is not None:
            t_seed = sampler.noise_seed()
            hook = None
            if config.metamix:
                mix_rng = sampler.rng
                mix_gen = torch.Generator().manual_seed(sampler.noise_seed())

                def hook(z):
                    return metamix(z, aggregate.distribution(), mix_rng, mix_gen,
                                   config.mix_alpha, config.mix_beta)[0]

            def target_loss(params, bt=tau_t.batch, seed=t_seed, hook=hook):
                return loss(params, bt, seed, hook)[0].total

        theta, info = inner_step(theta, source_loss, target_loss, config.lam_s, config.lam_t,
                                 config.second_order, config.clip_norm)
        losses.append(info.loss_source if info.loss_target is None else info.loss_source + info.loss_target)
    return PathResult(theta, aggregate, losses)


class TrainResult(NamedTuple):
    theta: ParameterSnapshot
    aggregate: SourcePriorAggregate
    log: List[dict]
    epoch: int


def _eval_loss(loss: ModelLoss, theta, batches: Sequence[BatchTensors], seed: int) -> dict:
    if not batches:
        return {}
    acc = None
    with torch.no_grad():
        for i, bt in enumerate(batches):
            lb = loss(theta, bt, seed + i)[0].as_floats()
            acc = lb if acc is None else {k: acc[k] + lb[k] for k in acc}
    return {k: v / len(batches) for k, v in acc.items()}


def _eval_set(source_batches, n: int) -> List[BatchTensors]:
    return [source_batches[d][i] for d, i in _pool(source_batches)[:n]]


def train(model: MetaTra, source_batches: Mapping[str, Sequence[BatchTensors]], config: MetaConfig,
          weights: LossWeights = LossWeights(), seed: int = 0, theta: Optional[ParameterSnapshot] = None,
          aggregate: Optional[SourcePriorAggregate] = None, start_epoch: int = 0,
          on_epoch_end: Optional[Callable[[int, ParameterSnapshot, SourcePriorAggregate, dict], None]] = None,
          trace: Optional[list] = None) -> TrainResult:
    """Run epochs ``start_epoch .. config.epochs - 1`` of serial/parallel meta-training.

    Each epoch performs ceil(n_batches / J) outer iterations. Path c of
    epoch e draws every random choice from ``default_rng([seed, e, c])``.
    ``trace`` (if given) receives the merged snapshot after every outer
    iteration.
    """
    model.train()
    if config.meta_learning and len([d for d in source_batches if len(source_batches[d])]) < 2:
        raise ConfigError("meta-learning needs at least two source domains; disable meta_learning for ERM")
    theta = ParameterSnapshot.from_module(model) if theta is None else theta.copy()
    aggregate = aggregate if aggregate is not None else SourcePriorAggregate(config.ema_decay)
    loss = ModelLoss(model, weights)
    J, C = config.J, config.C
    n_pool = len(_pool(source_batches))
    n_iter = max(1, math.ceil(n_pool / J))
    eval_set = _eval_set(source_batches, config.eval_batches)
    replicas = [loss] + [loss.replica() for _ in range(C - 1)] if config.workers > 1 else [loss] * C
    history = []
    for epoch in range(start_epoch, config.epochs):
        samplers = [TaskSampler(source_batches, epoch_rng(seed, epoch, c), config.meta_learning) for c in range(C)]
        path_losses = [[] for _ in range(C)]
        for _ in range(n_iter):
            def run(c, theta=theta, aggregate=aggregate):
                return serial_inner_loop(theta, J, samplers[c], replicas[c], config, aggregate.copy())

            if config.workers > 1 and C > 1:
                with ThreadPoolExecutor(max_workers=config.workers) as pool:
                    results = list(pool.map(run, range(C)))
            else:
                results = [run(c) for c in range(C)]
            for c, r in enumerate(results):
                path_losses[c].extend(r.losses)
            if config.serial_parallel:
                theta = parallel_outer_update(theta, [r.theta for r in results], config.outer_lr)
            else:
                theta = results[0].theta
            aggregate = SourcePriorAggregate.merge([r.aggregate for r in results], config.ema_decay)
            theta.check_finite()
            if trace is not None:
                trace.append(theta.copy())
        comps = _eval_loss(loss, theta, eval_set, seed)
        entry = {
            "epoch": epoch,
            "path_losses": [float(np.mean(pl)) for pl in path_losses],
            "merged_eval_loss": comps.get("total"),
            "components": comps,
            "lr": {"inner": config.inner_lr, "outer": config.outer_lr,
                   "source": config.lam_s, "target": config.lam_t},
        }
        history.append(entry)
        if on_epoch_end is not None:
            on_epoch_end(epoch, theta, aggregate, entry)
    theta.load_into(model)
    return TrainResult(theta, aggregate, history, max(start_epoch, config.epochs))


def baseline_train(model: MetaTra, domains: Mapping[str, Sequence[BatchTensors]], optimizer: OptimizerConfig,
                   weights: LossWeights = LossWeights(), seed: int = 0, theta: Optional[ParameterSnapshot] = None,
                   start_epoch: int = 0, on_epoch_end=None, trace: Optional[list] = None,
                   eval_batches: int = 2) -> TrainResult:
    """Pooled empirical-risk training with one gradient step per batch.

    Batch order and noise follow the same per-epoch stream as path 0 of
    :func:`train`, so with meta-learning, SPT and MetaMix switched off and
    ``optimizer.name == "sgd"`` both produce identical parameter traces.
    """
    model.train()
    theta = ParameterSnapshot.from_module(model) if theta is None else theta.copy()
    loss = ModelLoss(model, weights)
    n_pool = len(_pool(domains))
    eval_set = _eval_set(domains, eval_batches)
    adam = None
    if optimizer.name == "adam":
        leaves = _leaves(theta)
        adam = torch.optim.Adam(list(leaves.values()), lr=optimizer.lr)
    history = []
    for epoch in range(start_epoch, optimizer.epochs):
        sampler = TaskSampler(domains, epoch_rng(seed, epoch, 0), meta=False)
        lr = optimizer.lr_at(epoch)
        if adam is not None:
            for group in adam.param_groups:
                group["lr"] = lr
        losses = []
        for _ in range(n_pool):
            task, _ = sampler.next()
            s_seed = sampler.noise_seed()
            if adam is None:
                params = _leaves(theta)
                lt = loss(params, task.batch, s_seed)[0].total
                g = clip_grads(_grads(lt, params), optimizer.clip_norm)
                theta = sgd_update(theta, g, lr)
            else:
                adam.zero_grad()
                lt = loss(leaves, task.batch, s_seed)[0].total
                g = clip_grads(_grads(lt, leaves), optimizer.clip_norm)
                for n, p in leaves.items():
                    p.grad = g[n]
                adam.step()
                theta = ParameterSnapshot((n, p.detach().clone()) for n, p in leaves.items())
            losses.append(lt.item())
            if trace is not None:
                trace.append(theta.copy())
        comps = _eval_loss(loss, theta, eval_set, seed)
        entry = {"epoch": epoch, "path_losses": [float(np.mean(losses))],
                 "merged_eval_loss": comps.get("total"), "components": comps,
                 "lr": {"inner": lr, "optimizer": optimizer.name}}
        history.append(entry)
        if on_epoch_end is not None:
            on_epoch_end(epoch, theta, None, entry)
    theta.load_into(model)
    return TrainResult(theta, SourcePriorAggregate(), history, max(start_epoch, optimizer.epochs))
