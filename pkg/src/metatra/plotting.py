"""Trajectory overlays: observed past, K predictions, ground truth."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import Batch  # noqa: E402
from .errors import UsageError  # noqa: E402
from .model import predict_k  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "metatra"


def plot_window(model, window, path, K: int = 20, seed: int = 0) -> Path:
    """Render one relativized window; format follows the file extension (.svg or .png)."""
    if K < 1:
        raise UsageError("K must be >= 1 for plotting")
    path = Path(path)
    ext = path.suffix.lower()
    if ext not in (".svg", ".png"):
        raise UsageError(f"unsupported plot format {ext!r}; use .svg or .png")
    batch = Batch.from_windows([window])
    preds = predict_k(model, batch, K, seed)[:, 0]  # (K, N, T, 2)
    ref = batch.reference[0]
    past = batch.past[0] + ref
    fut = batch.future[0] + ref
    fig, ax = plt.subplots(figsize=(5, 5))
    for n in np.flatnonzero(batch.mask[0]):
        ax.plot(past[n, :, 0], past[n, :, 1], color="0.2", lw=2, label="past" if n == 0 else None)
        for k in range(K):
            track = np.vstack([past[n, -1:], preds[k, n]])
            ax.plot(track[:, 0], track[:, 1], color="tab:red", lw=0.7, alpha=0.5,
                    label="predictions" if n == 0 and k == 0 else None)
        gt = np.vstack([past[n, -1:], fut[n]])
        ax.plot(gt[:, 0], gt[:, 1], color="tab:green", lw=1.5, ls="--", label="ground truth" if n == 0 else None)
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x (scene units)")
    ax.set_ylabel("y (scene units)")
    ax.set_title(window.window_id)
    ax.legend(loc="best", fontsize=8)
    path.parent.mkdir(parents=True, exist_ok=True)
    if ext == ".svg":
        fig.savefig(path, format="svg", metadata={"Date": None})
    else:
        fig.savefig(path, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
