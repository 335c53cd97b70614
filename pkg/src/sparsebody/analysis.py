"""Introspection of the partition graph weights and of per-layer branch magnitudes."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import dataio
from . import skeleton as sk
from .model import SparsePoseNet

STAT_KINDS = ("pos_mean", "neg_mean", "mean", "abs_mean")
MAGNITUDE_COLUMNS = ("layer", "partition", "H", "dyn", "static")


@dataclass
class TopoStats:
    pos_mean: np.ndarray
    neg_mean: np.ndarray
    mean: np.ndarray
    abs_mean: np.ndarray
    pos_count: np.ndarray
    neg_count: np.ndarray
    layer: str = "all"

    def matrices(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in STAT_KINDS}


def _stats(T: np.ndarray, layer: str) -> TopoStats:
    """Statistics along the last (feature) axis of a (P, P, E) array."""
    pos, neg = T > 0, T < 0
    pc, nc = pos.sum(-1), neg.sum(-1)
    psum = np.where(pos, T, 0.0).sum(-1)
    nsum = np.where(neg, T, 0.0).sum(-1)
    return TopoStats(
        pos_mean=np.divide(psum, pc, out=np.zeros_like(psum), where=pc > 0),
        neg_mean=np.divide(nsum, nc, out=np.zeros_like(nsum), where=nc > 0),
        mean=T.mean(-1),
        abs_mean=np.abs(T).mean(-1),
        pos_count=pc,
        neg_count=nc,
        layer=layer,
    )


def topo_stats(model: SparsePoseNet, per_layer: bool = False):
    """tanh of each block's partition graph, block-averaged unless ``per_layer``."""
    mats = np.stack([np.tanh(b.kinematic.w_topo.detach().double().numpy()) for b in model.blocks])
    if per_layer:
        return [_stats(m, f"layer{i + 1}") for i, m in enumerate(mats)]
    return _stats(mats.mean(0), "all")


def probe_batch(sequences, window: int, n: int = 32, seed: int = 0, sensors: str = "hmd"):
    """Fixed sparse-input windows for magnitude probes: ``(X, aux)``."""
    rng = np.random.default_rng(seed)
    mask = dataio.sparse_mask(sk.sensor_config(sensors))
    feats = [dataio.build_features(s) for s in sequences]
    wins = []
    for _ in range(n):
        X = feats[int(rng.integers(len(feats)))]
        end = int(rng.integers(window, X.shape[0] + 1))
        wins.append(X[end - window:end])
    X = dataio.apply_mask(torch.stack(wins), mask)
    return dataio.normalize(X)


@torch.no_grad()
def branch_magnitudes(model: SparsePoseNet, X, aux) -> list[dict]:
    """Mean feature-axis L2 norms of the fusion inputs in every block.

    One row per (layer, partition) plus an ``overall`` row per layer.
    """
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    records: list[dict] = []
    model(torch.as_tensor(X).to(dtype), torch.as_tensor(aux).to(dtype), records=records)
    model.train(was_training)
    rows = []
    for i, rec in enumerate(records, start=1):
        norms = {k: rec[k].double().norm(dim=-1) for k in ("H", "dyn", "static")}  # (B, T, P)
        for p, name in enumerate(sk.PART_NAMES):
            rows.append({"layer": i, "partition": name, **{k: float(v[..., p].mean()) for k, v in norms.items()}})
        rows.append({"layer": i, "partition": "overall", **{k: float(v.mean()) for k, v in norms.items()}})
    return rows


def write_magnitudes_csv(rows, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MAGNITUDE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path


def export_heatmaps(stats: TopoStats, out_dir, render: bool = False) -> list[Path]:
    """One P x P CSV per statistic, named ``topo_<kind>_<layer>.csv``.

    With ``render`` a grayscale PNG is written next to each CSV (needs
    matplotlib).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for kind, mat in stats.matrices().items():
        path = out_dir / f"topo_{kind}_{stats.layer}.csv"
        np.savetxt(path, mat, delimiter=",", fmt="%.17g")
        paths.append(path)
        if render:
            paths.append(_render(mat, path.with_suffix(".png"), f"{kind} ({stats.layer})"))
    return paths


def read_heatmap(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def _render(mat: np.ndarray, path: Path, title: str) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(3.2, 3.0), dpi=100)
    lim = max(float(np.abs(mat).max()), 1e-12)
    ax.imshow(mat, cmap="gray", vmin=-lim, vmax=lim)
    ax.set_xticks(range(len(sk.PART_NAMES)), [n.replace("_", "\n") for n in sk.PART_NAMES], fontsize=6)
    ax.set_yticks(range(len(sk.PART_NAMES)), sk.PART_NAMES, fontsize=6)
    ax.set_title(title, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path
