import numpy as np
import pytest
import torch

from sparsebody import dataio
from sparsebody import skeleton as sk
from sparsebody import training as tr
from sparsebody.errors import NonFiniteError, ShapeMismatch
from sparsebody.model import ModelConfig, PoseEstimate, init_params
from sparsebody.rotmath import matrix_to_rot6d

TINY = ModelConfig(n_blocks=1, embed_dim=16, n_heads=2, window=8, dropout=0.0)


def test_consistency_worked_example():
    beta = torch.zeros(3, 16, dtype=torch.float64)
    beta[:, 0] = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
    _, l_consist = tr.loss_shape(beta)
    assert float(l_consist) == 2 / 3


def test_shape_regularizer():
    beta = torch.full((2, 5, 16), 0.5, dtype=torch.float64)
    l_reg, l_consist = tr.loss_shape(beta)
    assert float(l_reg) == 0.25
    assert float(l_consist) == 0.0


def test_constant_offset_has_no_velocity_or_acceleration_loss():
    gt = torch.randn(2, 30, 22, 3, dtype=torch.float64)
    pred = gt + torch.tensor([0.01, -0.02, 0.03], dtype=torch.float64)
    l_pos, l_vel, l_acc = tr.loss_positions(pred, gt)
    assert float(l_pos) == pytest.approx(0.02, abs=1e-12)
    assert float(l_vel) < 1e-15
    assert float(l_acc) < 1e-15


def test_position_losses_oracle():
    gt = torch.zeros(1, 4, 1, 3, dtype=torch.float64)
    pred = torch.zeros_like(gt)
    pred[0, :, 0, 0] = torch.tensor([0.0, 1.0, 4.0, 9.0])
    l_pos, l_vel, l_acc = tr.loss_positions(pred, gt)
    assert float(l_pos) == pytest.approx(14 / 12)
    assert float(l_vel) == pytest.approx(9 / 9)
    assert float(l_acc) == pytest.approx(4 / 6)


def test_rotation_loss_splits_root():
    gt = torch.zeros(2, 3, 22, 6)
    pred = gt.clone()
    pred[..., 0, :] = 1.0
    l_ori, l_rot = tr.loss_rotations(pred, gt)
    assert float(l_ori) == 1.0 and float(l_rot) == 0.0
    with pytest.raises(ShapeMismatch):
        tr.loss_rotations(pred[..., :5], gt)


def test_total_loss_weights_and_nan():
    comps = {k: torch.tensor(1.0) for k in tr.LOSS_NAMES}
    assert float(tr.total_loss(comps)) == pytest.approx(1 + 1 + 1 + 0.5 + 0.5 + 1e-4 + 0.1)
    comps["L_vel"] = torch.tensor(float("nan"))
    with pytest.raises(NonFiniteError):
        tr.total_loss(comps)


def test_weights_validation():
    with pytest.raises(ValueError):
        tr.LossWeights(pos=-1.0)
    with pytest.raises(ValueError):
        tr.TrainConfig(curriculum="sometimes")


def test_fk_frame_slice():
    assert tr.fk_frame_slice(40) == slice(10, 40)
    assert tr.fk_frame_slice(8) == slice(0, 8)


def test_ground_truth_prediction_reproduces_positions(small_dataset, skeleton):
    topo, basis = skeleton
    seq = small_dataset[0]
    gt = dataio.ground_truth(seq, topo, basis)
    est = PoseEstimate(matrix_to_rot6d(gt["local_rot"]), torch.as_tensor(seq.beta).expand(seq.n_frames, 16))
    pred = tr.predicted_positions(est, topo, basis, gt["positions"][:, sk.HEAD])
    assert (pred - gt["positions"]).abs().max() < 1e-12
    l_pos, l_vel, l_acc = tr.loss_positions(pred[None], gt["positions"][None])
    assert max(float(l_pos), float(l_vel), float(l_acc)) < 1e-12


def test_early_windows_repeat_first_frame(small_dataset):
    sampler = tr.WindowSampler(small_dataset[:1], 16)
    rng = np.random.default_rng(0)
    seen_padded = False
    for _ in range(20):
        batch = sampler.sample(rng, 4, sk.sensor_config("hmd"), dataio.CurriculumState(10**6))
        for b in range(4):
            pos = batch["gt_pos"][b]
            first = sampler.gt_pos[0][0].to(pos.dtype)
            n_pad = int((pos == first).all(-1).all(-1).sum())
            if n_pad > 1:
                seen_padded = True
                assert torch.equal(pos[:n_pad], first.expand(n_pad, 22, 3))
    assert seen_padded


def test_sampler_batch_layout(small_dataset):
    sampler = tr.WindowSampler(small_dataset, 16)
    batch = sampler.sample(np.random.default_rng(1), 4, sk.sensor_config("hmd"), dataio.CurriculumState(10**6))
    assert batch["X"].shape == (4, 16, 22, 18)
    assert batch["aux"].shape == (4, 16, 3)
    assert batch["gt_rot6d"].shape == (4, 16, 22, 6)
    absent = [j for j in range(22) if j not in sk.ANCHORS]
    assert float(batch["X"][:, :, absent].abs().max()) == 0.0
    with pytest.raises(ValueError):
        tr.WindowSampler(small_dataset, 1000)


def test_train_is_deterministic(small_dataset):
    cfg = tr.TrainConfig(batch_size=2, steps=3, lr=1e-3)
    a = tr.train(small_dataset, TINY, cfg)
    b = tr.train(small_dataset, TINY, cfg)
    assert a.log == b.log
    for va, vb in zip(a.model.state_dict().values(), b.model.state_dict().values()):
        assert torch.equal(va, vb)
    assert [r["step"] for r in a.log] == [0, 1, 2]


def test_train_leaves_global_rng_alone(small_dataset):
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    tr.train(small_dataset, TINY, tr.TrainConfig(batch_size=2, steps=1))
    assert torch.equal(torch.rand(3), expected)


def test_fixed_batch_loss_strictly_decreases():
    data = dataio.synth_dataset(0, 8, n_frames=200)
    cfg = ModelConfig(n_blocks=2, embed_dim=64, n_heads=4, window=40, dropout=0.0)
    model = init_params(cfg, seed=0)
    topo, basis = sk.default_skeleton()
    sampler = tr.WindowSampler(data, 40, topo, basis)
    batch = sampler.sample(np.random.default_rng(0), 16, sk.sensor_config("hmd"), dataio.CurriculumState())
    opt = torch.optim.AdamW(model.parameters(), lr=tr.TrainConfig().lr, weight_decay=tr.TrainConfig().weight_decay)
    losses = []
    for _ in range(51):
        loss = tr.total_loss(tr.compute_losses(model, batch, topo, basis))
        losses.append(loss.item())
        opt.zero_grad()
        loss.backward()
        opt.step()
    bad = [(i, a, b) for i, (a, b) in enumerate(zip(losses, losses[1:])) if not b < a]
    assert not bad, bad


def test_loss_log_round_trip(tmp_path, small_dataset):
    rows = tr.train(small_dataset, TINY, tr.TrainConfig(batch_size=2, steps=2)).log
    tr.write_loss_log(rows, tmp_path / "log.csv")
    assert tr.read_loss_log(tmp_path / "log.csv") == rows


def test_cosine_schedule_ends_at_zero():
    f = tr._lr_lambda(tr.TrainConfig(steps=10))
    assert f(0) == 1.0 and f(10) == pytest.approx(0.0) and f(5) == pytest.approx(0.5)


def test_grad_check_small():
    errors = tr.grad_check(seed=1, n_blocks=1, max_entries=4)
    assert {"w_topo", "gate_attn", "gate_topo"} <= set(errors)
    assert max(errors.values()) < 1e-4
