"""Glue between configs, datasets on disk, training and evaluation."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional

import torch

from .checkpoint import Checkpoint
from .config import DatasetConfig, ExperimentConfig
from .data import (Scene, domain_statistics, format_scene, leave_one_out_split, load_ethucy_file,
                   make_batches, relativize, synth_generate, window_scene)
from .errors import ConfigError, DataError, UsageError
from .metrics import MetricsReport, evaluate
from .model import BatchTensors, MetaTra, build_model
from .trainer import TrainResult, train

DATASET_FORMAT = "metatra-dataset/1"


# ----------------------------------------------------------- dataset dirs

def write_dataset_dir(scenes: Dict[str, List[Scene]], out_dir) -> dict:
    """Write ``<out>/<domain>/scene_XXXX.txt`` files plus ``manifest.json``."""
    out = Path(out_dir)
    manifest = {"format": DATASET_FORMAT, "domains": {}}
    for dom in sorted(scenes):
        ddir = out / dom
        ddir.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, scene in enumerate(scenes[dom]):
            text = format_scene(scene).encode()
            name = f"{dom}/scene_{i:04d}.txt"
            (out / name).write_bytes(text)
            frames = [int(t.frames[0]) for t in scene.tracks] + [int(t.frames[-1]) for t in scene.tracks]
            entries.append({
                "file": name,
                "tracks": len(scene.tracks),
                "positions": int(sum(len(t.positions) for t in scene.tracks)),
                "frame_span": [min(frames), max(frames)] if frames else None,
                "sha256": hashlib.sha256(text).hexdigest(),
            })
        frame_dt = scenes[dom][0].frame_dt if scenes[dom] else 0.4
        manifest["domains"][dom] = {"frame_dt": frame_dt, "scenes": entries}
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def load_dataset_dir(path) -> Dict[str, List[Scene]]:
    path = Path(path)
    mfile = path / "manifest.json"
    if not mfile.exists():
        raise DataError(f"{path} is not a dataset directory (missing manifest.json)")
    manifest = json.loads(mfile.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise DataError(f"{mfile}: unsupported dataset format {manifest.get('format')!r}")
    out = {}
    for dom, info in sorted(manifest["domains"].items()):
        out[dom] = [load_ethucy_file(path / e["file"], info["frame_dt"], dom) for e in info["scenes"]]
    return out


def dataset_checksum(scenes: Dict[str, List[Scene]]) -> str:
    h = hashlib.sha256()
    for dom in sorted(scenes):
        for s in scenes[dom]:
            h.update(dom.encode())
            h.update(format_scene(s).encode())
    return h.hexdigest()


def check_inputs(ds: DatasetConfig) -> None:
    """Fail fast on missing inputs before any computation."""
    if ds.dir is not None and not (Path(ds.dir) / "manifest.json").exists():
        raise DataError(f"dataset directory not found or missing manifest: {ds.dir}")
    for dom, files in ds.paths.items():
        for f in files:
            if not Path(f).exists():
                raise DataError(f"dataset file for domain {dom!r} not found: {f}")
    if ds.dir is None and not ds.paths and not ds.synth:
        raise ConfigError("dataset: no dir, paths or synth specs given")


def load_scenes(ds: DatasetConfig) -> Dict[str, List[Scene]]:
    check_inputs(ds)
    if ds.dir is not None:
        return load_dataset_dir(ds.dir)
    if ds.paths:
        return {dom: [load_ethucy_file(f, ds.frame_dt, dom, ds.columns) for f in files]
                for dom, files in sorted(ds.paths.items())}
    return {spec.domain_id: synth_generate(spec, ds.n_scenes, ds.frames_per_scene, ds.synth_seed)
            for spec in ds.synth_specs()}


def windows_by_domain(scenes: Dict[str, List[Scene]], t_obs: int, t_pre: int, stride: int,
                      relative: bool = True) -> Dict[str, list]:
    out = {}
    for dom in sorted(scenes):
        ws = [w for s in scenes[dom] for w in window_scene(s, t_obs, t_pre, stride)]
        out[dom] = [relativize(w)[0] for w in ws] if relative else ws
    return out


def stats_table(scenes: Dict[str, List[Scene]], t_obs: int = 8, t_pre: int = 20, stride: int = 1) -> List[dict]:
    if not scenes:
        raise UsageError("dataset has no domains")
    rows = []
    raw = windows_by_domain(scenes, t_obs, t_pre, stride, relative=False)
    for dom in sorted(raw):
        if not raw[dom]:
            raise UsageError(f"domain {dom!r} yields no windows")
        st = domain_statistics(raw[dom], scenes[dom][0].frame_dt)
        rows.append({"domain": dom, "windows": len(raw[dom]), **st.as_dict()})
    return rows


def to_tensor_batches(windows: Dict[str, list], budget: int, seed: int, dtype=torch.float32):
    return {dom: [BatchTensors.from_batch(b, dtype) for b in make_batches(ws, budget, seed)]
            for dom, ws in sorted(windows.items()) if ws}


def split(windows: Dict[str, list], held_out: Optional[str]):
    if held_out is None:
        return dict(windows), {}
    sources, target = leave_one_out_split(windows, held_out)
    return dict(sources), dict([target])


# ----------------------------------------------------------- experiments

class ExperimentResult(NamedTuple):
    model: MetaTra
    train: TrainResult
    report: Optional[MetricsReport]


def run_experiment(cfg: ExperimentConfig, scenes=None, on_epoch_end: Optional[Callable] = None,
                   resume: Optional[Checkpoint] = None, evaluate_after: bool = True) -> ExperimentResult:
    """Train on the source domains (all but ``eval.held_out``) and evaluate on the held-out one."""
    ds = cfg.dataset
    scenes = scenes if scenes is not None else load_scenes(ds)
    windows = windows_by_domain(scenes, ds.t_obs, ds.t_pre, ds.stride)
    sources, target = split(windows, cfg.eval.held_out)
    batches = to_tensor_batches(sources, cfg.train.batch_agent_budget, cfg.seed)
    if not batches:
        raise DataError("no training windows in the source domains")
    model = build_model(cfg.model, ds.t_obs, ds.t_pre, cfg.seed)
    kw = {}
    if resume is not None:
        kw = {"theta": resume.theta, "aggregate": resume.aggregate, "start_epoch": resume.epoch}
    result = train(model, batches, cfg.train.meta, cfg.train.loss, cfg.seed, on_epoch_end=on_epoch_end, **kw)
    report = None
    if evaluate_after:
        eval_windows = target if target else sources
        report = evaluate(model, eval_windows, cfg.eval.k, cfg.seed, cfg.eval.batch_agent_budget, cfg.digest())
    return ExperimentResult(model, result, report)


def model_from_checkpoint(ck: Checkpoint) -> MetaTra:
    from .dual_tt import ModelConfig

    mc = ModelConfig.from_dict(ck.manifest["model"])
    model = build_model(mc, ck.manifest["t_obs"], ck.manifest["t_pre"], 0)
    ck.theta.load_into(model)
    return model
