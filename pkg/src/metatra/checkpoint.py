"""Checkpoint archive: ``manifest.json`` plus raw little-endian float32 arrays in a zip.

Entries are written in a fixed order with a fixed timestamp so identical
training runs produce identical bytes.
"""
from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import DataError
from .trainer import ParameterSnapshot, SourcePriorAggregate

FORMAT = "metatra-checkpoint/1"
_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    theta: ParameterSnapshot
    aggregate: SourcePriorAggregate
    manifest: dict

    @property
    def epoch(self) -> int:
        return int(self.manifest["epoch"])


def _entry(zf: zipfile.ZipFile, name: str, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _to_bytes(t: torch.Tensor) -> bytes:
    return t.detach().cpu().numpy().astype("<f4", copy=False).tobytes()


def save_checkpoint(path, theta: ParameterSnapshot, aggregate: Optional[SourcePriorAggregate],
                    epoch: int, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    arrays = []
    blobs = {}
    for name, t in theta.items():
        file = f"arrays/{name}.bin"
        arrays.append({"name": name, "shape": list(t.shape), "dtype": "<f4", "file": file})
        blobs[file] = _to_bytes(t)
    ema = None
    if aggregate is not None and aggregate.mu is not None:
        ema = {"decay": aggregate.decay, "updates": aggregate.updates,
               "mu": {"shape": list(aggregate.mu.shape), "file": "ema/mu.bin"},
               "sigma": {"shape": list(aggregate.sigma.shape), "file": "ema/sigma.bin"}}
        blobs["ema/mu.bin"] = _to_bytes(aggregate.mu)
        blobs["ema/sigma.bin"] = _to_bytes(aggregate.sigma)
    elif aggregate is not None:
        ema = {"decay": aggregate.decay, "updates": 0, "mu": None, "sigma": None}
    manifest = {"format": FORMAT, "epoch": int(epoch), "arrays": arrays, "ema": ema}
    manifest.update(extra or {})
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _entry(zf, "manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())
        for file in sorted(blobs):
            _entry(zf, file, blobs[file])
    tmp.replace(path)
    return path


def _read(zf, file, shape, dtype):
    arr = np.frombuffer(zf.read(file), dtype="<f4").reshape(shape)
    return torch.from_numpy(arr.astype(np.float32)).to(dtype)


def load_checkpoint(path, dtype=torch.float32) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format") != FORMAT:
                raise DataError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
            theta = ParameterSnapshot((a["name"], _read(zf, a["file"], a["shape"], dtype)) for a in manifest["arrays"])
            ema = manifest.get("ema") or {}
            agg = SourcePriorAggregate(ema.get("decay", 0.9))
            if ema.get("mu"):
                agg.mu = _read(zf, ema["mu"]["file"], ema["mu"]["shape"], dtype)
                agg.sigma = _read(zf, ema["sigma"]["file"], ema["sigma"]["shape"], dtype)
                agg.updates = int(ema.get("updates", 0))
    except (zipfile.BadZipFile, KeyError) as exc:
        raise DataError(f"{path}: corrupt checkpoint ({exc})") from None
    return Checkpoint(theta, agg, manifest)
