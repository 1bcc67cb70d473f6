"""Acceptance suite: one group per criterion, each tagged with ``criterion(n)``.

The terminal summary prints one PASS/FAIL line per criterion.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from metatra.cli import main
from metatra.config import ExperimentConfig
from metatra.cvae import LatentDistribution, LossWeights, kl_divergence
from metatra.data import SynthDomainSpec, make_batches, relativize, synth_generate, window_scene
from metatra.dual_tt import DualTT, InteractedMining, ModelConfig
from metatra.metrics import brute_force_metric_oracle, evaluate, min_ade_k, min_fde_k
from metatra.model import BatchTensors, build_model
from metatra.pipeline import run_experiment
from metatra.trainer import (MetaConfig, ModelLoss, OptimizerConfig, ParameterSnapshot, SourcePriorAggregate,
                             TaskSampler, baseline_train, epoch_rng, inner_step, metamix, serial_inner_loop, train)

crit = pytest.mark.criterion


# ------------------------------------------------ 1. attention normalization

@crit(1)
def test_attention_normalization():
    start = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    rng = np.random.default_rng(0)
    for _ in range(200):
        heads = int(rng.integers(1, 4))
        n = int(rng.integers(1, 7))
        R = int(rng.integers(1, 4))
        W = int(rng.integers(1, 4))
        torch.manual_seed(int(rng.integers(2 ** 31)))
        im = InteractedMining(2 * heads, heads, R).double()
        h = torch.randn(W, n, 2 * heads, generator=g, dtype=torch.float64)
        mask = torch.rand(W, n, generator=g) < 0.8
        mask[:, 0] = True
        adj = torch.rand(W, R, n, n, generator=g) < 0.5
        adj &= ~torch.eye(n, dtype=torch.bool)
        adj &= mask[:, None, :, None] & mask[:, None, None, :]
        _, rec = im(h, adj, mask)
        sums = rec.beta.sum(-1)
        has = adj.unsqueeze(2).any(-1).expand_as(sums)
        assert torch.allclose(sums[has], torch.ones_like(sums[has]), rtol=0, atol=1e-6)
        assert (rec.gamma.sum(-1) - 1).abs().max() <= 1e-6
    assert time.perf_counter() - start < 10


# ------------------------------------------------------ 2. gradient check

def _tiny_batch():
    g = torch.Generator().manual_seed(7)
    start = torch.tensor([[0.0, 0.0], [0.6, 0.1], [1.5, -0.3]], dtype=torch.float64)
    vel = torch.tensor([[0.1, 0.05], [-0.05, 0.1], [0.02, -0.08]], dtype=torch.float64)
    t = torch.arange(6, dtype=torch.float64)
    xy = start[:, None] + t[None, :, None] * vel[:, None] + 0.02 * torch.randn(3, 6, 2, generator=g, dtype=torch.float64)
    xy = xy - xy[:, 3].mean(0)
    return BatchTensors(xy[None, :, :4], xy[None, :, 4:], torch.ones(1, 3, dtype=torch.bool),
                        torch.zeros(1, 3, dtype=torch.long), torch.zeros(1, 2, dtype=torch.float64))


def _array_rel_err(a, b):
    return float((a - b).norm() / max(a.norm(), b.norm(), 1e-8))


@crit(2)
def test_gradient_check():
    start = time.perf_counter()
    cfg = ModelConfig(d_model=4, n_heads_temporal=2, n_heads_relation=2, relation_types=2, d_latent=4,
                      neighbor_radius=2.0, band_edge=1.0)
    model = build_model(cfg, 4, 6, seed=0, dtype=torch.float64)
    bt = _tiny_batch()
    adj = model.past_encoder_tt.graphs(bt.past, bt.types, bt.mask)
    assert adj[:, :, 0].any(), "tiny batch must exercise both relation types"
    assert adj[:, :, 1].any()
    eps = torch.randn(1, 3, 4, generator=torch.Generator().manual_seed(1), dtype=torch.float64)

    def loss():
        return model(bt, LossWeights(), eps=eps)[0].total

    model.zero_grad()
    loss().backward()
    worst = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            fd = torch.zeros_like(p)
            flat, fd_flat = p.view(-1), fd.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + 1e-5
                up = loss().item()
                flat[i] = orig - 1e-5
                down = loss().item()
                flat[i] = orig
                fd_flat[i] = (up - down) / 2e-5
            worst[name] = _array_rel_err(p.grad, fd)
    bad = {k: v for k, v in worst.items() if v > 1e-4}
    assert not bad, bad
    assert time.perf_counter() - start < 120


# ------------------------------------------------------- 3. metric oracle

@crit(3)
def test_metric_oracle_equivalence():
    rng = np.random.default_rng(3)
    for _ in range(100):
        K, T = int(rng.integers(1, 21)), int(rng.integers(1, 13))
        preds = rng.normal(scale=rng.uniform(0.1, 10), size=(K, T, 2))
        gt = rng.normal(size=(T, 2))
        ade, fde = brute_force_metric_oracle(preds, gt)
        assert abs(min_ade_k(preds, gt) - ade) <= 1e-12
        assert abs(min_fde_k(preds, gt) - fde) <= 1e-12
        ades = [min_ade_k(preds[:k], gt) for k in range(1, K + 1)]
        fdes = [min_fde_k(preds[:k], gt) for k in range(1, K + 1)]
        assert all(a >= b for a, b in zip(ades, ades[1:]))
        assert all(a >= b for a, b in zip(fdes, fdes[1:]))


# ----------------------------------------------- 4. optimizer reductions

def _two_domain_setup(small_windows):
    model = build_model(ModelConfig(d_model=8, d_latent=4), 4, 10, seed=0, dtype=torch.float64)
    half = len(small_windows) // 2
    doms = {"a": small_windows[:half], "b": small_windows[half:]}
    batches = {d: [BatchTensors.from_batch(b, torch.float64) for b in make_batches(w, 8, 0)] for d, w in doms.items()}
    return model, batches


@crit(4)
def test_reduction_erm_trace(small_windows):
    model, batches = _two_domain_setup(small_windows)
    off = MetaConfig(inner_lr=0.01, meta_learning=False, serial_parallel=False, metamix=False, epochs=3)
    t_meta, t_erm = [], []
    train(model, batches, off, seed=4, trace=t_meta)
    model2, _ = _two_domain_setup(small_windows)
    baseline_train(model2, batches, OptimizerConfig("sgd", 0.01, 3), seed=4, trace=t_erm)
    assert len(t_meta) == len(t_erm) > 0
    assert all(a.equal(b) for a, b in zip(t_meta, t_erm))


@crit(4)
def test_reduction_single_path_merge(small_windows):
    model, batches = _two_domain_setup(small_windows)
    cfg = MetaConfig(inner_lr=0.01, outer_lr=1.0, serial_tasks=2, parallel_paths=1, metamix=False, epochs=1)
    trace = []
    train(model, batches, cfg, seed=1, trace=trace)
    model2, _ = _two_domain_setup(small_windows)
    serial = serial_inner_loop(ParameterSnapshot.from_module(model2), cfg.J,
                               TaskSampler(batches, epoch_rng(1, 0, 0), True), ModelLoss(model2, LossWeights()),
                               cfg, SourcePriorAggregate())
    assert trace[0].equal(serial.theta)


@crit(4)
def test_reduction_quadratic_surrogate():
    def snap(w):
        return ParameterSnapshot([("w", torch.tensor(w, dtype=torch.float64))])

    def L_S(p):
        return 0.5 * p["w"] ** 2

    def L_T(p):
        return 0.5 * (p["w"] - 1) ** 2

    # theta' = 1 - 0.1 = 0.9; g_T(theta') = -0.1; theta'' = 1 - 0.1 * (1 - 0.1) = 0.91
    assert abs(inner_step(snap(1.0), L_S, L_T, 0.1)[0]["w"].item() - 0.91) <= 1e-12
    # second order: g_T = (0.9 - 1)(1 - 0.1) = -0.09 -> 1 - 0.1 * (1 - 0.09) = 0.909
    assert abs(inner_step(snap(1.0), L_S, L_T, 0.1, second_order=True)[0]["w"].item() - 0.909) <= 1e-12
    theta = snap(1.0)
    for _ in range(2):
        theta, _ = inner_step(theta, L_S, L_T, 0.1)
    assert abs(theta["w"].item() - 0.8371) <= 1e-12


# ---------------------------------------------------------------- 5. MetaMix

@crit(5)
def test_metamix_contracts(small_batch):
    model = build_model(ModelConfig(d_model=8, d_latent=4), 4, 10, seed=0, dtype=torch.float64)
    eps = torch.randn(*small_batch.mask.shape, 4, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    prior = LatentDistribution(torch.full((4,), 0.7, dtype=torch.float64), torch.full((4,), 1.3, dtype=torch.float64))
    rng = np.random.default_rng(0)
    plain, _, out1 = model(small_batch, LossWeights(), eps=eps)
    hook = lambda z: metamix(z, prior, rng, generator=torch.Generator().manual_seed(3), rho=1.0)[0]  # noqa: E731
    mixed, _, out2 = model(small_batch, LossWeights(), eps=eps, latent_hook=hook)
    B = small_batch.mask.numel()
    assert out2.y_hat.reshape(-1, *out2.y_hat.shape[-2:]).shape[0] == 2 * B
    assert out1.y_hat.reshape(-1, *out1.y_hat.shape[-2:]).shape[0] == B
    # rho = 1: both halves decode Z_T, so the Z_T half and the full doubled loss match the plain loss
    assert (out2.y_hat[0] - out1.y_hat[0]).abs().max() < 1e-9
    assert (out2.y_hat[1] - out1.y_hat[0]).abs().max() < 1e-9
    assert abs(mixed.total.item() - plain.total.item()) < 1e-9

    zt = torch.tensor([[1.0, 1.0]])
    p = LatentDistribution(torch.tensor([2.0, 0.0]), torch.zeros(2))
    assert torch.equal(metamix(zt, p, rng, rho=1.0)[0], zt)
    assert torch.equal(metamix(zt, p, rng, rho=0.0)[0], torch.tensor([[3.0, 1.0]]))
    assert torch.equal(metamix(zt, p, rng, rho=0.5)[0], torch.tensor([[2.0, 1.0]]))


# ------------------------------------------------------------- 6. overfit

@crit(6)
@pytest.mark.slow
def test_overfit_single_domain():
    torch.set_num_threads(1)
    spec = SynthDomainSpec("line", agents_per_scene=(3, 3), speed_std=0.0, turn_rate=0.0, avoidance_strength=0.0)
    scenes = synth_generate(spec, 50, 20, seed=0)
    windows = [relativize(w)[0] for s in scenes for w in window_scene(s, 8, 20, 1)]
    assert len(windows) == 50
    batches = [BatchTensors.from_batch(b) for b in make_batches(windows, 30, 0)]
    model = build_model(ModelConfig(), 8, 20, seed=0)
    losses = []
    res = baseline_train(model, {"line": batches}, OptimizerConfig("adam", 3e-3, 500, lr_decay=0.9954), seed=0,
                         on_epoch_end=lambda e, th, ag, entry: losses.append(entry["components"]["total"]))
    res.theta.load_into(model)
    ade = evaluate(model, {"line": windows}, K=1, seed=0).mean_min_ade
    print(f"overfit minADE_1 = {ade:.4f}")
    assert losses[49] < losses[0]
    assert ade < 0.05


# ------------------------------------------------------ 7. generalization

GEN_DOMAINS = [
    {"domain_id": "s1", "speed_mean": 0.7, "agents_per_scene": [3, 5]},
    {"domain_id": "s2", "speed_mean": 0.9, "agents_per_scene": [3, 5]},
    {"domain_id": "s3", "speed_mean": 1.3, "agents_per_scene": [3, 5]},
    {"domain_id": "s4", "speed_mean": 1.5, "agents_per_scene": [3, 5]},
    {"domain_id": "tgt", "speed_mean": 1.1, "agents_per_scene": [6, 9], "avoidance_strength": 0.8},
]


def _gen_config(seed, **toggles):
    return ExperimentConfig.from_dict({
        "seed": seed,
        "dataset": {"synth": GEN_DOMAINS, "n_scenes": 4, "frames_per_scene": 40, "stride": 4, "synth_seed": 100},
        "model": {"d_model": 16, "d_latent": 8, "neighbor_radius": 2.0, "band_edge": 1.0},
        "train": {"epochs": 100, "inner_lr": 0.03, "outer_lr": 1.0, "serial_tasks": 2, "parallel_paths": 2,
                  "batch_agent_budget": 64, **toggles},
        "eval": {"k": 20, "held_out": "tgt"},
    })


@crit(7)
@pytest.mark.slow
def test_generalization_direction():
    torch.set_num_threads(1)
    improvements = []
    for seed in range(5):
        erm = run_experiment(_gen_config(seed, meta_learning=False, serial_parallel=False, metamix=False))
        full = run_experiment(_gen_config(seed))
        a, b = erm.report.mean_min_ade, full.report.mean_min_ade
        improvements.append((a - b) / a)
        print(f"seed {seed}: ERM {a:.4f}  MGTP {b:.4f}  improvement {100 * improvements[-1]:+.1f}%")
    wins = sum(i >= 0 for i in improvements)
    print(f"MGTP <= ERM in {wins}/5 seeds, mean improvement {100 * np.mean(improvements):+.2f}%")
    assert wins >= 4
    assert np.mean(improvements) > 0


# ------------------------------------------------------------------- 8. KL

@crit(8)
def test_kl_properties():
    g = torch.Generator().manual_seed(8)
    shape = (1000, 4)
    q = LatentDistribution(torch.randn(shape, generator=g, dtype=torch.float64) * 3,
                           torch.rand(shape, generator=g, dtype=torch.float64) * 4 + 1e-3)
    p = LatentDistribution(torch.randn(shape, generator=g, dtype=torch.float64) * 3,
                           torch.rand(shape, generator=g, dtype=torch.float64) * 4 + 1e-3)
    for i in range(1000):
        qi = LatentDistribution(q.mu[i:i + 1], q.sigma[i:i + 1])
        pi = LatentDistribution(p.mu[i:i + 1], p.sigma[i:i + 1])
        assert kl_divergence(qi, pi).item() >= 0
        assert kl_divergence(qi, qi).item() == 0.0
    one = torch.ones(1, 1, dtype=torch.float64)
    hand = kl_divergence(LatentDistribution(0 * one, one), LatentDistribution(one, one)).item()
    assert abs(hand - 0.5) <= 1e-12


# ------------------------------------------------------- 9. reproducibility

def _run_cli(args, capsys):
    try:
        main([str(a) for a in args])
        code = 0
    except SystemExit as exc:
        code = exc.code
    out, err = capsys.readouterr()
    assert code == 0, err
    return out


@crit(9)
def test_cli_reproducibility(tmp_path, capsys):
    cfg = {
        "seed": 5,
        "dataset": {"synth": [{"domain_id": "a", "speed_mean": 0.8}, {"domain_id": "b", "speed_mean": 1.2},
                              {"domain_id": "c", "speed_mean": 1.0, "agents_per_scene": [4, 6]}],
                    "n_scenes": 2, "frames_per_scene": 14, "t_obs": 4, "t_pre": 10, "stride": 2},
        "model": {"d_model": 8, "d_latent": 4},
        "train": {"epochs": 2, "serial_tasks": 2, "parallel_paths": 2, "inner_lr": 0.01, "outer_lr": 0.5},
        "eval": {"k": 5, "held_out": "c"},
    }
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(cfg))
    ckpts, reports = [], []
    for i in range(2):
        info = json.loads(_run_cli(["--config", path, "--out", tmp_path / f"runs{i}", "train"], capsys))
        ckpts.append(Path(info["checkpoint"]).read_bytes())
        reports.append(_run_cli(["eval", "--checkpoint", info["checkpoint"]], capsys))
    assert ckpts[0] == ckpts[1]
    assert reports[0] == reports[1]
    assert json.loads(reports[0])["k"] == 5


# --------------------------------------------------- 10. masking / locality

def _tracks(*starts, T=8):
    drift = 0.05 * torch.arange(T, dtype=torch.float64).unsqueeze(1)
    return torch.stack([torch.tensor(s, dtype=torch.float64).expand(T, 2) + drift for s in starts]).unsqueeze(0)


@crit(10)
def test_padding_invariance():
    torch.manual_seed(10)
    enc = DualTT(ModelConfig(d_model=8, d_latent=4, neighbor_radius=1.0, band_edge=0.5)).double()
    coords = _tracks([0.0, 0.0], [0.3, 0.2], [0.8, -0.1])
    types = torch.zeros(1, 3, dtype=torch.long)
    base = enc(coords, torch.ones(1, 3, dtype=torch.bool), types)
    for trial in range(5):
        junk = torch.randn(1, 2, 8, 2, generator=torch.Generator().manual_seed(trial), dtype=torch.float64)
        padded = torch.cat([coords, junk], dim=1)
        mask = torch.tensor([[True, True, True, False, False]])
        out = enc(padded, mask, torch.zeros(1, 5, dtype=torch.long))
        assert (out[:, :3] - base).abs().max() <= 1e-9


@crit(10)
def test_out_of_radius_locality():
    torch.manual_seed(11)
    enc = DualTT(ModelConfig(d_model=8, d_latent=4, neighbor_radius=1.0, band_edge=0.5)).double()
    mask = torch.ones(1, 3, dtype=torch.bool)
    types = torch.zeros(1, 3, dtype=torch.long)
    g = torch.Generator().manual_seed(0)
    far = _tracks([20.0, 20.0])
    ref = None
    for _ in range(10):
        # the other two agents wander near the origin, always far outside the radius of the far agent
        others = torch.randn(1, 2, 8, 2, generator=g, dtype=torch.float64).cumsum(2) * 0.3
        out = enc(torch.cat([far, others], dim=1), mask, types)[:, 0]
        ref = out if ref is None else ref
        assert torch.equal(out, ref)
