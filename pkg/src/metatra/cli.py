"""Command line interface: ``metatra ingest|synth|train|eval|stats|plot|ablate``."""
from __future__ import annotations

import csv
import io
import json
import os
import sys
import time
from pathlib import Path
from typing import List, Optional

import click

from . import __version__, kernels
from .errors import ConfigError, DataError, MetaTraError, UsageError

ENV_OUT = "METATRA_OUT"


def _out_root(ctx, default: str) -> Path:
    out = ctx.obj.get("out") or os.environ.get(ENV_OUT)
    return Path(out) if out else Path(default)


def _config(ctx, required=True):
    from .config import load_config

    path = ctx.obj.get("config")
    if path is None:
        if required:
            raise ConfigError("--config is required for this command")
        return None
    return load_config(path, ctx.obj.get("overrides", ()), ctx.obj.get("seed"))


def _write_table(rows: List[dict], out: Optional[Path]):
    if out is not None and out.suffix.lower() == ".json":
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
        return
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if out is None:
        click.echo(buf.getvalue(), nl=False)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(buf.getvalue())


@click.group()
@click.option("--config", "config", type=click.Path(dir_okay=False), help="Experiment YAML file.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", type=click.Path(), default=None, help=f"Output location (default: ${ENV_OUT}).")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override a config field, e.g. train.epochs=5.")
@click.version_option(__version__, prog_name="metatra")
@click.pass_context
def cli(ctx, config, seed, out, overrides):
    ctx.ensure_object(dict)
    ctx.obj.update(config=config, seed=seed, out=out, overrides=overrides)


@cli.command()
@click.argument("paths", nargs=-1, type=click.Path())
@click.option("--frame-dt", type=float, default=0.4, show_default=True, help="Seconds per annotation step.")
@click.option("--columns", default="frame,agent,x,y", show_default=True, help="Column order of the input files.")
@click.pass_context
def ingest(ctx, paths, frame_dt, columns):
    """Parse raw `frame agent x y` files into a canonical dataset directory.

    Files named directly become domains named after their stem; files found
    inside a directory argument belong to a domain named after that directory.
    """
    from .data import load_ethucy_file
    from .pipeline import write_dataset_dir

    cols = [c.strip() for c in columns.split(",")]
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files += [(p.name, f) for f in sorted(p.glob("*.txt"))]
        elif p.exists():
            files.append((p.stem, p))
        else:
            raise DataError(f"input not found: {p}")
    if not files:
        raise UsageError("no input files to ingest")
    scenes, failures = {}, []
    for dom, f in files:
        try:
            scenes.setdefault(dom, []).append(load_ethucy_file(f, frame_dt, dom, cols))
        except DataError as exc:
            failures.append(f"{f}: {exc}")
    if failures:
        raise DataError(f"{len(failures)} file(s) failed to parse: " + " | ".join(failures))
    out = _out_root(ctx, "dataset")
    manifest = write_dataset_dir(scenes, out)
    click.echo(json.dumps({"out": str(out), "domains": {d: len(v["scenes"]) for d, v in manifest["domains"].items()}}))


@cli.command()
@click.pass_context
def synth(ctx):
    """Generate the synthetic domains listed under dataset.synth."""
    from .pipeline import write_dataset_dir
    from .data import synth_generate

    cfg = _config(ctx)
    ds = cfg.dataset
    specs = ds.synth_specs()
    if not specs:
        raise ConfigError("dataset.synth lists no domains")
    scenes = {s.domain_id: synth_generate(s, ds.n_scenes, ds.frames_per_scene, ds.synth_seed) for s in specs}
    out = _out_root(ctx, "dataset")
    manifest = write_dataset_dir(scenes, out)
    click.echo(json.dumps({"out": str(out), "domains": {d: len(v["scenes"]) for d, v in manifest["domains"].items()}}))


def _new_run_dir(root: Path, digest: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
    base = root / f"{stamp}-{digest[:8]}"
    path, i = base, 1
    while path.exists():
        path = Path(f"{base}-{i}")
        i += 1
    path.mkdir(parents=True)
    return path


@cli.command()
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Checkpoint to continue from; the epoch counter carries over.")
@click.pass_context
def train(ctx, resume):
    """Train on the source domains; writes a new run directory."""
    import torch

    from .checkpoint import load_checkpoint, save_checkpoint
    from .config import dump_config
    from .pipeline import check_inputs, dataset_checksum, load_scenes, run_experiment

    cfg = _config(ctx)
    check_inputs(cfg.dataset)
    ck = load_checkpoint(resume) if resume else None
    if ck is not None and ck.manifest.get("model") != cfg.model.to_dict():
        raise ConfigError("resume checkpoint was trained with a different model config")
    scenes = load_scenes(cfg.dataset)
    run = _new_run_dir(_out_root(ctx, "runs"), cfg.digest())
    (run / "config.yaml").write_text(dump_config(cfg))
    manifest = {
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "code_version": __version__,
        "torch_version": torch.__version__,
        "kernel_backend": kernels.BACKEND,
        "dataset_checksum": dataset_checksum(scenes),
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "resumed_from": str(resume) if resume else None,
        "start_epoch": ck.epoch if ck else 0,
    }
    (run / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    extra = {"model": cfg.model.to_dict(), "t_obs": cfg.dataset.t_obs, "t_pre": cfg.dataset.t_pre,
             "config": cfg.to_dict(), "config_digest": cfg.digest(), "seed": cfg.seed,
             "code_version": __version__, "rng": "numpy default_rng([seed, epoch, path])"}
    log_f = open(run / "train_log.jsonl", "w")
    loss_f = open(run / "loss_log.jsonl", "w")
    every = cfg.train.checkpoint_every

    def on_epoch_end(epoch, theta, aggregate, entry):
        log_f.write(json.dumps(entry, sort_keys=True) + "\n")
        log_f.flush()
        loss_f.write(json.dumps({"step": epoch, **entry["components"]}, sort_keys=True) + "\n")
        loss_f.flush()
        if every and (epoch + 1) % every == 0:
            save_checkpoint(run / f"checkpoint_epoch{epoch + 1:05d}.zip", theta, aggregate, epoch + 1, extra)

    try:
        result = run_experiment(cfg, scenes=scenes, on_epoch_end=on_epoch_end, resume=ck, evaluate_after=False)
    finally:
        log_f.close()
        loss_f.close()
    path = save_checkpoint(run / "checkpoint.zip", result.train.theta, result.train.aggregate, result.train.epoch, extra)
    click.echo(json.dumps({"run_dir": str(run), "checkpoint": str(path), "epoch": result.train.epoch}))


def _eval_scenes(ctx, ck, dataset):
    from .config import DatasetConfig
    from .pipeline import load_dataset_dir, load_scenes

    if dataset is not None:
        return load_dataset_dir(dataset)
    ds = DatasetConfig(**ck.manifest["config"]["dataset"])
    return load_scenes(ds)


@cli.command(name="eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--dataset", type=click.Path(file_okay=False), default=None,
              help="Dataset directory (default: the dataset recorded in the checkpoint).")
@click.option("--domain", "domains", multiple=True, help="Domain(s) to evaluate (default: the held-out domain).")
@click.option("-k", "--k", "k", type=int, default=None, help="Candidates per agent (default: eval.k of the run).")
@click.pass_context
def eval_cmd(ctx, checkpoint, dataset, domains, k):
    """Compute minADE_K / minFDE_K and print (or write with --out) the JSON report."""
    from .checkpoint import load_checkpoint
    from .metrics import evaluate
    from .pipeline import model_from_checkpoint, windows_by_domain

    ck = load_checkpoint(checkpoint)
    conf = ck.manifest["config"]
    k = conf["eval"]["k"] if k is None else k
    if k < 1:
        raise UsageError("K must be >= 1")
    seed = ctx.obj.get("seed")
    seed = conf["seed"] if seed is None else seed
    scenes = _eval_scenes(ctx, ck, dataset)
    ds = conf["dataset"]
    wins = windows_by_domain(scenes, ds["t_obs"], ds["t_pre"], ds["stride"])
    chosen = list(domains) or ([conf["eval"]["held_out"]] if conf["eval"].get("held_out") else sorted(wins))
    for d in chosen:
        if d not in wins:
            raise UsageError(f"unknown domain {d!r}; dataset has {sorted(wins)}")
    model = model_from_checkpoint(ck)
    report = evaluate(model, {d: wins[d] for d in chosen}, k, seed,
                      conf["eval"].get("batch_agent_budget", 512), ck.manifest.get("config_digest", ""))
    text = report.to_json() + "\n"
    out = ctx.obj.get("out")
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    click.echo(text, nl=False)


@cli.command()
@click.argument("dataset", type=click.Path(file_okay=False))
@click.option("--t-obs", type=int, default=8, show_default=True)
@click.option("--t-pre", type=int, default=20, show_default=True)
@click.option("--stride", type=int, default=1, show_default=True)
@click.pass_context
def stats(ctx, dataset, t_obs, t_pre, stride):
    """Density, speed and acceleration per domain (CSV, or JSON with --out *.json)."""
    from .pipeline import load_dataset_dir, stats_table

    rows = stats_table(load_dataset_dir(dataset), t_obs, t_pre, stride)
    out = ctx.obj.get("out")
    _write_table(rows, Path(out) if out else None)


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--dataset", type=click.Path(file_okay=False), default=None)
@click.option("--domain", default=None, help="Domain to draw windows from (default: the held-out domain).")
@click.option("--window", "window_ids", type=int, multiple=True, required=True, help="Window index within the domain.")
@click.option("--file", "files", multiple=True, help="Output file per window (.svg or .png).")
@click.option("-k", "--k", "k", type=int, default=20, show_default=True)
@click.pass_context
def plot(ctx, checkpoint, dataset, domain, window_ids, files, k):
    """Overlay past, K predictions and ground truth for selected windows."""
    from .checkpoint import load_checkpoint
    from .pipeline import model_from_checkpoint, windows_by_domain
    from .plotting import plot_window

    if k < 1:
        raise UsageError("K must be >= 1")
    if files and len(files) != len(window_ids):
        raise UsageError("give one --file per --window")
    ck = load_checkpoint(checkpoint)
    conf = ck.manifest["config"]
    seed = ctx.obj.get("seed")
    seed = conf["seed"] if seed is None else seed
    scenes = _eval_scenes(ctx, ck, dataset)
    ds = conf["dataset"]
    wins = windows_by_domain(scenes, ds["t_obs"], ds["t_pre"], ds["stride"])
    domain = domain or conf["eval"].get("held_out") or sorted(wins)[0]
    if domain not in wins:
        raise UsageError(f"unknown domain {domain!r}")
    model = model_from_checkpoint(ck)
    out_root = _out_root(ctx, "plots")
    written = []
    for i, wid in enumerate(window_ids):
        if not 0 <= wid < len(wins[domain]):
            raise UsageError(f"window id {wid} out of range for domain {domain!r} ({len(wins[domain])} windows)")
        path = Path(files[i]) if files else out_root / f"{domain}_{wid:05d}.png"
        written.append(str(plot_window(model, wins[domain][wid], path, k, seed)))
    click.echo(json.dumps({"files": written}))


@cli.command()
@click.option("--seeds", default="0", show_default=True, help="Comma-separated seeds.")
@click.option("--rows", default="all", show_default=True,
              help="Comma-separated toggle rows as ML/SPT/MM bit strings, e.g. 000,111; 'all' for the four standard rows.")
@click.pass_context
def ablate(ctx, seeds, rows):
    """Train and evaluate ML/SPT/MM variants with matched seeds; writes JSON and CSV."""
    from .metrics import TOGGLE_ROWS, ablation_csv, ablation_grid

    cfg = _config(ctx)
    seed_list = [int(s) for s in seeds.split(",") if s.strip()]
    if rows == "all":
        toggles = TOGGLE_ROWS
    else:
        toggles = []
        for bits in rows.split(","):
            if len(bits) != 3 or set(bits) - {"0", "1"}:
                raise UsageError(f"bad toggle row {bits!r}")
            toggles.append(dict(zip(("meta_learning", "serial_parallel", "metamix"), (b == "1" for b in bits))))
    table = ablation_grid(cfg, toggles, seed_list,
                          progress=lambda t, s, r: click.echo(f"{t} seed={s} minADE={r.mean_min_ade:.4f}", err=True))
    out = _out_root(ctx, "ablation")
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    (out / "ablation.csv").write_text(ablation_csv(table))
    click.echo(ablation_csv(table), nl=False)


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="metatra", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("error[aborted]: interrupted", err=True)
        sys.exit(130)
    except click.ClickException as exc:
        click.echo(f"error[usage]: {exc.format_message()}", err=True)
        sys.exit(2)
    except MetaTraError as exc:
        click.echo(f"error[{exc.code}]: {' '.join(str(exc).split())}", err=True)
        sys.exit(2 if isinstance(exc, (ConfigError, UsageError)) else 1)
    except (OSError, FloatingPointError) as exc:
        click.echo(f"error[io]: {' '.join(str(exc).split())}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
