"""Best-of-K displacement metrics, evaluation reports and the ablation grid."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from . import kernels
from .data import Batch, make_batches
from .errors import UsageError
from .model import MetaTra, predict_k


def _check(preds, gt):
    preds = np.asarray(preds, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if preds.ndim != 3 or gt.ndim != 2 or preds.shape[-1] != 2 or gt.shape[-1] != 2:
        raise UsageError(f"expected preds (K, T, 2) and gt (T, 2), got {preds.shape} and {gt.shape}")
    if preds.shape[0] < 1:
        raise UsageError("need at least one candidate")
    if preds.shape[1] != gt.shape[0]:
        raise UsageError(f"horizon mismatch: {preds.shape[1]} vs {gt.shape[0]}")
    if gt.shape[0] == 0:
        raise UsageError("zero-length future")
    return np.ascontiguousarray(preds[None]), np.ascontiguousarray(gt[None])


def min_ade_k(preds, gt) -> float:
    """Minimum over candidates of the mean per-step Euclidean distance."""
    p, g = _check(preds, gt)
    return float(kernels.best_of_k_errors(p, g)[0][0])


def min_fde_k(preds, gt) -> float:
    """Minimum over candidates of the final-step Euclidean distance."""
    p, g = _check(preds, gt)
    return float(kernels.best_of_k_errors(p, g)[1][0])


def brute_force_metric_oracle(preds, gt):
    """Reference (minADE, minFDE) with plain Python loops, for tests."""
    preds = [[list(map(float, step)) for step in cand] for cand in np.asarray(preds).tolist()]
    gt = [list(map(float, step)) for step in np.asarray(gt).tolist()]
    if not preds or not gt:
        raise UsageError("zero-length input")
    best_ade = best_fde = None
    for cand in preds:
        if len(cand) != len(gt):
            raise UsageError("horizon mismatch")
        total = 0.0
        for (px, py), (gx, gy) in zip(cand, gt):
            total += math.sqrt((px - gx) ** 2 + (py - gy) ** 2)
        ade = total / len(gt)
        fde = math.sqrt((cand[-1][0] - gt[-1][0]) ** 2 + (cand[-1][1] - gt[-1][1]) ** 2)
        best_ade = ade if best_ade is None else min(best_ade, ade)
        best_fde = fde if best_fde is None else min(best_fde, fde)
    return best_ade, best_fde


@dataclass
class DomainMetrics:
    min_ade: float
    min_fde: float
    n_agents: int


@dataclass
class MetricsReport:
    k: int
    seed: int
    config_digest: str = ""
    domains: Dict[str, DomainMetrics] = field(default_factory=dict)

    @property
    def mean_min_ade(self) -> float:
        return float(np.mean([d.min_ade for d in self.domains.values()])) if self.domains else float("nan")

    @property
    def mean_min_fde(self) -> float:
        return float(np.mean([d.min_fde for d in self.domains.values()])) if self.domains else float("nan")

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "config_digest": self.config_digest,
            "units": "scene units (meters for ETH-UCY)",
            "domains": {d: asdict(m) for d, m in sorted(self.domains.items())},
            "mean_min_ade": self.mean_min_ade,
            "mean_min_fde": self.mean_min_fde,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def agent_errors(model: MetaTra, batches: Sequence[Batch], K: int, seed: int):
    """Per-agent (minADE, minFDE) arrays over all valid agents of ``batches``."""
    ades, fdes = [], []
    for i, batch in enumerate(batches):
        bseed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        preds = predict_k(model, batch, K, bseed)  # (K, W, N, T, 2)
        gt = batch.future + batch.reference[:, None, None, :]
        sel = batch.mask
        p = np.ascontiguousarray(np.moveaxis(preds, 0, 2)[sel])  # (A, K, T, 2)
        g = np.ascontiguousarray(gt[sel])
        a, f = kernels.best_of_k_errors(p, g)
        ades.append(a)
        fdes.append(f)
    return np.concatenate(ades), np.concatenate(fdes)


def evaluate(model: MetaTra, domains: Dict[str, list], K: int = 20, seed: int = 0,
             batch_agent_budget: int = 512, config_digest: str = "") -> MetricsReport:
    """minADE_K / minFDE_K averaged over agents, per domain.

    ``domains`` maps domain id to relativized windows (or ready batches).
    """
    report = MetricsReport(K, seed, config_digest)
    for dom in sorted(domains):
        items = domains[dom]
        if not items:
            raise UsageError(f"domain {dom!r} has no windows to evaluate")
        batches = items if isinstance(items[0], Batch) else make_batches(items, batch_agent_budget, None)
        a, f = agent_errors(model, batches, K, seed)
        report.domains[dom] = DomainMetrics(float(a.mean()), float(f.mean()), int(a.size))
    return report


TOGGLE_ROWS = [
    {"meta_learning": False, "serial_parallel": False, "metamix": False},
    {"meta_learning": True, "serial_parallel": False, "metamix": False},
    {"meta_learning": True, "serial_parallel": True, "metamix": False},
    {"meta_learning": True, "serial_parallel": True, "metamix": True},
]


def _row_label(t: dict) -> str:
    return "/".join(("on" if t.get(k, False) else "off") for k in ("meta_learning", "serial_parallel", "metamix"))


def ablation_grid(base, toggles: Sequence[dict] = tuple(TOGGLE_ROWS), seeds: Sequence[int] = (0,),
                  scenes=None, progress=None) -> List[dict]:
    """Train and evaluate every toggle row for every seed on the held-out domain.

    ``base`` is an ExperimentConfig; rows use matched seeds. Returns one
    record per row with per-seed reports and mean/std of minADE/minFDE.
    """
    from .config import ExperimentConfig
    from .errors import ConfigError
    from .pipeline import run_experiment, load_scenes

    for t in toggles:
        if t.get("metamix") and not t.get("meta_learning"):
            raise ConfigError(f"toggle row {t}: MetaMix requires meta-learning")
    scenes = scenes if scenes is not None else load_scenes(base.dataset)
    rows = []
    for t in toggles:
        reports = []
        for s in seeds:
            raw = base.to_dict()
            raw["seed"] = int(s)
            raw["train"].update(t)
            cfg = ExperimentConfig.from_dict(raw)
            result = run_experiment(cfg, scenes=scenes)
            reports.append({"seed": int(s), "config_digest": cfg.digest(), "report": result.report.to_dict()})
            if progress:
                progress(t, s, result.report)
        ade = [r["report"]["mean_min_ade"] for r in reports]
        fde = [r["report"]["mean_min_fde"] for r in reports]
        rows.append({"toggles": dict(t), "label": _row_label(t), "runs": reports,
                     "min_ade_mean": float(np.mean(ade)), "min_ade_std": float(np.std(ade)),
                     "min_fde_mean": float(np.mean(fde)), "min_fde_std": float(np.std(fde))})
    return rows


def ablation_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["ML", "SPT", "MM", "min_ade_mean", "min_ade_std", "min_fde_mean", "min_fde_std", "seeds"])
    for r in rows:
        t = r["toggles"]
        w.writerow([int(bool(t.get("meta_learning"))), int(bool(t.get("serial_parallel"))), int(bool(t.get("metamix"))),
                    f"{r['min_ade_mean']:.6f}", f"{r['min_ade_std']:.6f}",
                    f"{r['min_fde_mean']:.6f}", f"{r['min_fde_std']:.6f}",
                    " ".join(str(x["seed"]) for x in r["runs"])])
    return buf.getvalue()
