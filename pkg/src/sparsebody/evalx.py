"""Pose metrics, sliding-window inference and the evaluation harness."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import torch

from . import dataio
from . import skeleton as sk
from .errors import ShapeMismatch
from .model import PoseEstimate, SparsePoseNet
from .rotmath import as_tensor, geodesic_angle, matrix_to_rot6d, rot6d_to_matrix

MODES = ("standard", "handtracking")
REPORT_COLUMNS = ("config", "mode", "MPJRE", "MPJPE", "MPJVE", "Jitter")


def _check_pair(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def mpjre(pred_rot, gt_rot) -> float:
    """Mean geodesic angle in degrees between (..., 3, 3) rotation stacks."""
    pred_rot, gt_rot = _check_pair(pred_rot, gt_rot)
    return math.degrees(float(geodesic_angle(pred_rot, gt_rot).mean()))


def mpjpe(pred_pos, gt_pos) -> float:
    """Mean joint distance in cm for positions given in meters."""
    pred_pos, gt_pos = _check_pair(pred_pos, gt_pos)
    return float((pred_pos - gt_pos).norm(dim=-1).mean()) * 100.0


def mpjve(pred_pos, gt_pos, fps: float) -> float:
    """Mean velocity error in cm/s from forward differences along the frame axis."""
    pred_pos, gt_pos = _check_pair(pred_pos, gt_pos)
    if pred_pos.shape[-3] < 2:
        raise ShapeMismatch("need at least two frames")
    dv = (pred_pos - gt_pos).diff(dim=-3) * fps
    return float(dv.norm(dim=-1).mean()) * 100.0


def jitter(pred_pos, fps: float) -> float:
    """Mean jerk magnitude in units of 10^2 m/s^3 (third forward difference)."""
    pred_pos = as_tensor(pred_pos)
    if pred_pos.ndim < 3 or pred_pos.shape[-3] < 4:
        raise ShapeMismatch("need (..., T>=4, J, 3)")
    jerk = pred_pos.diff(n=3, dim=-3) * fps**3
    return float(jerk.norm(dim=-1).mean()) / 100.0


@dataclass
class MetricReport:
    config: str
    mode: str
    mpjre: float
    mpjpe: float
    mpjve: float
    jitter: float

    def row(self) -> dict:
        return dict(zip(REPORT_COLUMNS, (self.config, self.mode, self.mpjre, self.mpjpe, self.mpjve, self.jitter)))


def sliding_windows(X, window: int) -> torch.Tensor:
    """(N, ...) stream -> (N, window, ...) windows ending at each frame.

    Frames before the start repeat the first frame.
    """
    X = as_tensor(X)
    N = X.shape[0]
    idx = torch.arange(N)[:, None] + torch.arange(-window + 1, 1)[None, :]
    return X[idx.clamp_min(0)]


@torch.no_grad()
def sliding_window_infer(model: SparsePoseNet, X, window: int | None = None, chunk: int = 128) -> PoseEstimate:
    """Per-frame poses from a raw (unnormalized, zero-padded) feature stream.

    Each frame's pose is the last frame of the network's prediction for the
    window ending at that frame.
    """
    window = window or model.config.window
    dtype = next(model.parameters()).dtype
    wins = sliding_windows(X, window)
    rot, beta = [], []
    was_training = model.training
    model.eval()
    for lo in range(0, wins.shape[0], chunk):
        Xw, aux = dataio.normalize(wins[lo:lo + chunk])
        est = model(Xw.to(dtype), aux.to(dtype))
        rot.append(est.rot6d[:, -1])
        beta.append(est.beta[:, -1])
    model.train(was_training)
    return PoseEstimate(torch.cat(rot).double(), torch.cat(beta).double())


def reconstruct_positions(est: PoseEstimate, head_pos, topo=None, basis=None, anchor: bool = True) -> torch.Tensor:
    """FK of a per-frame estimate; optionally anchored to the observed head."""
    if topo is None or basis is None:
        topo, basis = sk.default_skeleton()
    R = rot6d_to_matrix(est.rot6d, check=False)
    zero = torch.zeros(3, dtype=R.dtype)
    pos, _ = sk.forward_kinematics_matrices(topo, basis, R, zero, est.beta)
    return sk.anchor_to_head(pos, head_pos) if anchor else pos


class GroundTruthPoser:
    """Predicts the ground truth itself; used to sanity-check the harness."""

    def infer(self, seq: dataio.MotionSequence, X) -> PoseEstimate:
        gt = dataio.ground_truth(seq)
        T = seq.n_frames
        return PoseEstimate(matrix_to_rot6d(gt["local_rot"]), torch.as_tensor(seq.beta).expand(T, -1))


def sparse_features(seq: dataio.MotionSequence, mode: str = "standard", sensors: str = "hmd",
                    topo=None, basis=None, fov_degrees: float = 120.0) -> torch.Tensor:
    """Inference-time input stream for a sequence under a tracking mode."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    X = dataio.build_features(seq, topo, basis)
    if mode == "handtracking":
        X = dataio.apply_fov(X, fov_degrees)
    return dataio.apply_mask(X, dataio.sparse_mask(sk.sensor_config(sensors)))


def predict_sequence(model, seq, X) -> PoseEstimate:
    if isinstance(model, SparsePoseNet):
        return sliding_window_infer(model, X)
    return model.infer(seq, X)


def evaluate(model, sequences, mode: str = "standard", sensors: str = "hmd", topo=None, basis=None,
             fov_degrees: float = 120.0, return_details: bool = False):
    """Aggregate metrics over ``sequences``.

    Errors are pooled over every frame and joint of every sequence, visited
    in list order, before averaging.
    """
    if not sequences:
        raise ValueError("dataset is empty")
    if topo is None or basis is None:
        topo, basis = sk.default_skeleton()
    geo, dist, vel, jerk = [], [], [], []
    details = []
    for seq in sequences:
        X = sparse_features(seq, mode, sensors, topo, basis, fov_degrees)
        est = predict_sequence(model, seq, X)
        gt = dataio.ground_truth(seq, topo, basis)
        pos = reconstruct_positions(est, gt["positions"][:, sk.HEAD], topo, basis)
        R = rot6d_to_matrix(est.rot6d, check=False)
        geo.append(geodesic_angle(R, gt["local_rot"]).flatten())
        dist.append((pos - gt["positions"]).norm(dim=-1).flatten())
        vel.append(((pos - gt["positions"]).diff(dim=0) * seq.fps).norm(dim=-1).flatten())
        jerk.append((pos.diff(n=3, dim=0) * seq.fps**3).norm(dim=-1).flatten())
        if return_details:
            details.append({"estimate": est, "positions": pos, "features": X})
    report = MetricReport(
        config=sk.sensor_config(sensors).label,
        mode=mode,
        mpjre=math.degrees(float(torch.cat(geo).mean())),
        mpjpe=float(torch.cat(dist).mean()) * 100.0,
        mpjve=float(torch.cat(vel).mean()) * 100.0,
        jitter=float(torch.cat(jerk).mean()) / 100.0,
    )
    return (report, details) if return_details else report


def write_report_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.row().items()})


def format_table(reports) -> str:
    lines = [f"{'config':<8}{'mode':<14}{'MPJRE':>9}{'MPJPE':>9}{'MPJVE':>9}{'Jitter':>9}"]
    for r in reports:
        lines.append(f"{r.config:<8}{r.mode:<14}{r.mpjre:9.3f}{r.mpjpe:9.3f}{r.mpjve:9.3f}{r.jitter:9.3f}")
    return "\n".join(lines)
