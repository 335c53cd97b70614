"""Losses, the masked-curriculum training loop and a finite-difference gradient check."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import dataio
from . import skeleton as sk
from .errors import NonFiniteError, ShapeMismatch
from .model import ModelConfig, PoseEstimate, SparsePoseNet, init_params
from .rotmath import matrix_to_rot6d, rot6d_to_matrix

log = logging.getLogger(__name__)

LOSS_NAMES = ("L_ori", "L_rot", "L_pos", "L_vel", "L_acc", "L_reg", "L_consist")
LOG_COLUMNS = ("step",) + LOSS_NAMES + ("total", "masked_fraction")


@dataclass
class LossWeights:
    ori: float = 1.0
    rot: float = 1.0
    pos: float = 1.0
    vel: float = 0.5
    acc: float = 0.5
    reg: float = 1e-4
    consist: float = 0.1

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {k} must be finite and nonnegative")

    def as_vector(self) -> tuple[float, ...]:
        return (self.ori, self.rot, self.pos, self.vel, self.acc, self.reg, self.consist)


@dataclass
class TrainConfig:
    batch_size: int = 256
    steps: int = 1000
    lr: float = 1e-4
    weight_decay: float = 1e-2
    lr_schedule: str = "cosine"
    curriculum: str = "decaying"
    curriculum_steps: int = dataio.CURRICULUM_STEPS
    fk_frames: int = 30
    sensors: str = "hmd"
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.curriculum not in dataio.CURRICULUM_MODES:
            raise ValueError(f"curriculum must be one of {dataio.CURRICULUM_MODES}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError("lr_schedule must be 'cosine' or 'constant'")
        sk.sensor_config(self.sensors)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# losses


def loss_rotations(pred6d: torch.Tensor, gt6d: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean L1 over the root's 6D channels and over the other joints' channels."""
    if pred6d.shape != gt6d.shape:
        raise ShapeMismatch(f"{tuple(pred6d.shape)} vs {tuple(gt6d.shape)}")
    diff = (pred6d - gt6d).abs()
    return diff[..., 0, :].mean(), diff[..., 1:, :].mean()


def loss_positions(pred_pos: torch.Tensor, gt_pos: torch.Tensor):
    """L1 on positions and on their first and second frame differences.

    Both inputs are (..., T, J, 3) already restricted to the FK frames.
    """
    if pred_pos.shape != gt_pos.shape:
        raise ShapeMismatch(f"{tuple(pred_pos.shape)} vs {tuple(gt_pos.shape)}")
    d = pred_pos - gt_pos
    l_pos = d.abs().mean()
    dv = d.diff(dim=-3)
    l_vel = dv.abs().mean() if dv.numel() else d.new_zeros(())
    da = dv.diff(dim=-3)
    l_acc = da.abs().mean() if da.numel() else d.new_zeros(())
    return l_pos, l_vel, l_acc


def loss_shape(beta: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Squared-magnitude regularizer and per-window consistency of (..., T, 16) shapes.

    The consistency term is the frame-average L1 distance to the window mean,
    averaged over any leading batch dimensions.
    """
    l_reg = (beta**2).mean()
    mean = beta.mean(dim=-2, keepdim=True)
    l_consist = (beta - mean).abs().sum(-1).mean()
    return l_reg, l_consist


def total_loss(components, weights: LossWeights | None = None) -> torch.Tensor:
    """Weighted sum of the seven components (dict keyed by name or a sequence)."""
    weights = weights or LossWeights()
    if isinstance(components, dict):
        components = [components[k] for k in LOSS_NAMES]
    comps = [torch.as_tensor(c) for c in components]
    for name, c in zip(LOSS_NAMES, comps):
        if not bool(torch.isfinite(c).all()):
            raise NonFiniteError(f"{name} is not finite ({c.detach().tolist()})")
    return sum(w * c for w, c in zip(weights.as_vector(), comps))


def fk_frame_slice(T: int, fk_frames: int = 30) -> slice:
    """Trailing contiguous frames that receive the FK-based losses."""
    return slice(T - min(fk_frames, T), T)


def predicted_positions(est: PoseEstimate, topo, basis, head_pos: torch.Tensor) -> torch.Tensor:
    """FK of predicted rotations/shape, rigidly anchored at the observed head."""
    R = rot6d_to_matrix(est.rot6d, check=False)
    zero = torch.zeros(3, dtype=R.dtype)
    pos, _ = sk.forward_kinematics_matrices(topo, basis, R, zero, est.beta)
    return sk.anchor_to_head(pos, head_pos)


def compute_losses(model: SparsePoseNet, batch: dict, topo, basis, fk_frames: int = 30) -> dict:
    est = model(batch["X"], batch["aux"])
    T = est.rot6d.shape[-3]
    l_ori, l_rot = loss_rotations(est.rot6d, batch["gt_rot6d"])
    sub = fk_frame_slice(T, fk_frames)
    sub_est = PoseEstimate(est.rot6d[:, sub], est.beta[:, sub])
    pred_pos = predicted_positions(sub_est, topo, basis, batch["gt_pos"][:, sub, sk.HEAD])
    l_pos, l_vel, l_acc = loss_positions(pred_pos, batch["gt_pos"][:, sub])
    l_reg, l_consist = loss_shape(est.beta)
    return dict(zip(LOSS_NAMES, (l_ori, l_rot, l_pos, l_vel, l_acc, l_reg, l_consist)))


# ---------------------------------------------------------------------------
# batches


class WindowSampler:
    """Draws training windows with curriculum masks from a list of sequences."""

    def __init__(self, sequences, window: int, topo=None, basis=None, dtype=torch.float32):
        if not sequences:
            raise ValueError("dataset is empty")
        if topo is None or basis is None:
            topo, basis = sk.default_skeleton()
        self.window = window
        self.dtype = dtype
        self.features, self.gt_rot6d, self.gt_pos = [], [], []
        for seq in sequences:
            if seq.n_frames < window:
                raise ValueError(f"sequence with {seq.n_frames} frames is shorter than the window")
            gt = dataio.ground_truth(seq, topo, basis)
            self.features.append(dataio.build_features(seq, topo, basis))
            self.gt_rot6d.append(matrix_to_rot6d(gt["local_rot"], check=False))
            self.gt_pos.append(gt["positions"])

    def sample(self, rng: np.random.Generator, batch_size: int, config: sk.SensorConfig,
               curriculum: dataio.CurriculumState) -> dict:
        Xs, masks, rots, poss = [], [], [], []
        for _ in range(batch_size):
            i = int(rng.integers(len(self.features)))
            n = self.features[i].shape[0]
            # any frame may close the window; early windows repeat frame 0,
            # matching sliding-window inference at the start of a stream
            end = int(rng.integers(1, n + 1))
            win = torch.arange(end - self.window, end).clamp_min(0)
            Xs.append(self.features[i][win])
            rots.append(self.gt_rot6d[i][win])
            poss.append(self.gt_pos[i][win])
            masks.append(dataio.sample_mask(rng, config, curriculum))
        return make_batch(torch.stack(Xs), np.stack(masks), torch.stack(rots), torch.stack(poss), self.dtype)


def make_batch(X_full, masks, gt_rot6d, gt_pos, dtype=torch.float32) -> dict:
    mask = torch.as_tensor(masks)
    X = dataio.apply_mask(X_full, mask, anchors=())
    X, aux = dataio.normalize(X)
    return {
        "X": X.to(dtype),
        "aux": aux.to(dtype),
        "gt_rot6d": gt_rot6d.to(dtype),
        "gt_pos": gt_pos.to(dtype),
        "mask": mask,
    }


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    model: SparsePoseNet
    log: list[dict]


def _lr_lambda(cfg: TrainConfig):
    if cfg.lr_schedule == "constant" or cfg.steps == 0:
        return lambda step: 1.0
    return lambda step: 0.5 * (1.0 + math.cos(math.pi * min(step, cfg.steps) / cfg.steps))


def train(sequences, model_cfg: ModelConfig, train_cfg: TrainConfig, model: SparsePoseNet | None = None,
          topo=None, basis=None, progress=None) -> TrainResult:
    """Fit a network on ground-truth sequences.

    Every step samples windows, masks them per the curriculum, normalizes,
    runs the network and applies one AdamW update. Deterministic for a
    fixed ``train_cfg.seed``.
    """
    if topo is None or basis is None:
        topo, basis = sk.default_skeleton()
    if model is None:
        model = init_params(model_cfg, seed=train_cfg.seed)
    dtype = next(model.parameters()).dtype
    sampler = WindowSampler(sequences, model_cfg.window, topo, basis, dtype)
    sensors = sk.sensor_config(train_cfg.sensors)
    rng = np.random.default_rng(train_cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, _lr_lambda(train_cfg))
    rows: list[dict] = []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(train_cfg.seed)
        model.train()
        for step in range(train_cfg.steps):
            cur = dataio.CurriculumState(step, train_cfg.curriculum, train_cfg.curriculum_steps)
            batch = sampler.sample(rng, train_cfg.batch_size, sensors, cur)
            comps = compute_losses(model, batch, topo, basis, train_cfg.fk_frames)
            try:
                loss = total_loss(comps, train_cfg.weights)
            except NonFiniteError as exc:
                raise NonFiniteError(f"step {step}: {exc}; components={_floats(comps)}") from exc
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            row = {"step": step, **_floats(comps), "total": loss.item(), "masked_fraction": cur.masked_fraction}
            rows.append(row)
            if progress is not None:
                progress(row)
    model.eval()
    return TrainResult(model, rows)


def _floats(comps: dict) -> dict:
    return {k: v.item() for k, v in comps.items()}


def write_loss_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in LOG_COLUMNS})


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(seed: int = 0, embed_dim: int = 8, window: int = 4, n_heads: int = 2, n_blocks: int = 2,
               h: float = 1e-5, max_entries: int | None = 12) -> dict[str, float]:
    """Relative error between autograd and central differences per parameter group.

    Runs in float64 on a one-window batch. For each parameter tensor up to
    ``max_entries`` randomly chosen entries are probed (all if ``None``);
    a group's error is ``|g_auto - g_fd| / max(|g_auto|, |g_fd|)`` over the
    probed entries, with Euclidean norms.
    """
    cfg = ModelConfig(n_blocks=n_blocks, embed_dim=embed_dim, n_heads=n_heads, window=window, dropout=0.0)
    model = init_params(cfg, seed=seed, dtype=torch.float64)
    model.eval()
    topo, basis = sk.default_skeleton()
    rng = np.random.default_rng(seed)
    seq = dataio.synth_sequence(rng, n_frames=window + 2)
    sampler = WindowSampler([seq], window, topo, basis, torch.float64)
    cur = dataio.CurriculumState(0, "continuous")
    batch = sampler.sample(rng, 1, sk.sensor_config("hmd"), cur)

    def loss_fn():
        return total_loss(compute_losses(model, batch, topo, basis, fk_frames=30))

    model.zero_grad()
    loss_fn().backward()
    params = dict(model.named_parameters())
    analytic = {k: p.grad.detach().clone() for k, p in params.items()}

    errors = {}
    with torch.no_grad():
        for group, names in model.parameter_groups().items():
            a_all, n_all = [], []
            for name in names:
                p = params[name]
                flat = p.view(-1)
                idx = np.arange(flat.numel())
                if max_entries is not None and idx.size > max_entries:
                    idx = rng.choice(idx, size=max_entries, replace=False)
                for i in idx:
                    old = flat[i].item()
                    flat[i] = old + h
                    up = loss_fn().item()
                    flat[i] = old - h
                    down = loss_fn().item()
                    flat[i] = old
                    n_all.append((up - down) / (2 * h))
                    a_all.append(analytic[name].view(-1)[i].item())
            a, n = np.array(a_all), np.array(n_all)
            scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
            errors[group] = float(np.linalg.norm(a - n) / scale)
    return errors
