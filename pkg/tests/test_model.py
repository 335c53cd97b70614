import math

import numpy as np
import pytest
import torch

from sparsebody import dataio
from sparsebody import model as M
from sparsebody import skeleton as sk
from sparsebody.analysis import topo_stats
from sparsebody.errors import FileFormatError, ShapeMismatch

TINY = M.ModelConfig(n_blocks=2, embed_dim=16, n_heads=2, window=8, dropout=0.0)


def expected_param_count(E, L):
    attn = 4 * E * E + 4 * E
    block = 4 * attn + 25 * E + 2 * E + 2 * E + (8 * E * E + 5 * E) + 2 * E
    embed = sum(18 * n + 3 for n in (6, 4, 4, 4, 4)) * E + 5 * E
    modulation = (5 * E * 2 * E + 2 * E) + (2 * E * 10 * E + 10 * E)
    pose = sum(E * E + E + E * 6 * n + 6 * n for n in (6, 4, 4))
    shape = (5 * E * E + E) + (E * 16 + 16)
    return L * block + embed + modulation + pose + shape


def inputs(B=2, T=8, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(B, T, 22, 18, generator=g).to(dtype), torch.randn(B, T, 3, generator=g).to(dtype)


@pytest.mark.parametrize("E,L", [(16, 2), (64, 2), (256, 6)])
def test_parameter_count(E, L):
    cfg = M.ModelConfig(n_blocks=L, embed_dim=E, n_heads=8 if E >= 64 else 2)
    assert M.count_parameters(M.SparsePoseNet(cfg)) == expected_param_count(E, L)


def test_full_size_is_about_twelve_million():
    assert 12.0e6 < expected_param_count(256, 6) < 12.2e6


def test_output_shapes():
    net = M.init_params(TINY)
    X, aux = inputs()
    est = net(X, aux)
    assert est.rot6d.shape == (2, 8, 22, 6)
    assert est.beta.shape == (2, 8, 16)
    single = net(X[0], aux[0])
    assert single.rot6d.shape == (8, 22, 6)
    assert torch.allclose(single.rot6d, est.rot6d[0], atol=1e-5)


def test_bad_shapes():
    net = M.init_params(TINY)
    X, aux = inputs()
    with pytest.raises(ShapeMismatch):
        net(X[..., :17], aux)
    with pytest.raises(ShapeMismatch):
        net(X, aux[..., :2])


def test_config_validation():
    with pytest.raises(ValueError):
        M.ModelConfig(embed_dim=30, n_heads=4)
    with pytest.raises(ValueError):
        M.ModelConfig(n_blocks=0)


def test_init_deterministic():
    a, b = M.init_params(TINY, seed=3), M.init_params(TINY, seed=3)
    c = M.init_params(TINY, seed=4)
    for (k, va), vb, vc in zip(a.state_dict().items(), b.state_dict().values(), c.state_dict().values()):
        assert torch.equal(va, vb), k
    assert any(not torch.equal(va, vc) for va, vc in zip(a.state_dict().values(), c.state_dict().values()))


def test_init_ranges():
    net = M.init_params(TINY)
    for mod in net.modules():
        if isinstance(mod, torch.nn.Linear):
            bound = 1 / math.sqrt(mod.in_features)
            assert float(mod.weight.detach().abs().max()) <= bound
    lin_biases = [m.bias for m in net.modules() if isinstance(m, torch.nn.Linear)]
    heads_out = {id(h[-1].bias) for h in net.pose_heads}
    assert all(float(b.detach().abs().max()) == 0.0 for b in lin_biases if id(b) not in heads_out)
    ident = torch.tensor(M.IDENTITY_6D)
    for h, n in zip(net.pose_heads, (6, 4, 4)):
        assert torch.equal(h[-1].bias, ident.repeat(n))


def test_init_topology_closed_forms():
    stats = topo_stats(M.init_params(TINY))
    expected = np.zeros((5, 5))
    expected[range(5), range(5)] = math.tanh(1.0)
    expected[0, 1:] = expected[1:, 0] = math.tanh(0.1)
    assert np.abs(stats.mean - expected).max() < 1e-6
    net = M.init_params(TINY)
    for block in net.blocks:
        assert torch.allclose(torch.sigmoid(block.kinematic.gate_attn), torch.tensor(0.8807970779778823), atol=1e-6)
        assert torch.allclose(torch.sigmoid(block.kinematic.gate_topo), torch.tensor(0.11920292202211755), atol=1e-6)


def test_sharing_registry():
    net = M.init_params(M.ModelConfig(n_blocks=3, embed_dim=16, n_heads=2))
    for block in net.blocks:
        assert len(block.temporal) == 3
    assert len(net.pose_heads) == 3
    names = [n for n, _ in net.named_parameters()]
    temporal_sets = {n.split(".temporal.")[1].split(".")[0] for n in names if ".temporal." in n}
    assert temporal_sets == {"0", "1", "2"}
    assert {n.split(".")[1] for n in names if n.startswith("pose_heads.")} == {"0", "1", "2"}


def test_shared_partitions_identical_bitwise():
    net = M.init_params(TINY).eval()
    F = torch.randn(2, 8, 5, 16, generator=torch.Generator().manual_seed(1))
    F[:, :, 2] = F[:, :, 1]
    F[:, :, 4] = F[:, :, 3]
    with torch.no_grad():
        out = net.blocks[0].temporal_attention(F)
        assert torch.equal(out[:, :, 1], out[:, :, 2])
        assert torch.equal(out[:, :, 3], out[:, :, 4])
        rot = net.decode_pose(F)
    assert torch.equal(rot[..., list(sk.default_partition().joints[1]), :],
                       rot[..., list(sk.default_partition().joints[2]), :])


def test_attention_weights_and_equivariance():
    attn = M.MultiHeadSelfAttention(16, 4)
    x = torch.randn(3, 7, 16)
    out, w = attn(x, return_weights=True)
    assert w.shape == (3, 4, 7, 7)
    assert torch.allclose(w.sum(-1), torch.ones(3, 4, 7), atol=1e-6)
    perm = torch.randperm(7)
    assert torch.allclose(attn(x[:, perm]), out[:, perm], atol=1e-5)


def test_static_branch_matches_loop():
    ka = M.KinematicAttention(4, 2)
    with torch.no_grad():
        ka.w_topo.normal_()
    H = torch.randn(2, 3, 5, 4)
    W = torch.tanh(ka.w_topo)
    ref = torch.zeros_like(H)
    for p in range(5):
        for q in range(5):
            ref[..., p, :] += W[p, q] * H[..., q, :]
    assert torch.allclose(ka.static_branch(H), ref, atol=1e-6)


def test_sinusoidal_encoding():
    pe = M.sinusoidal_encoding(10, 8, torch.float64)
    assert pe.shape == (10, 8)
    assert torch.equal(pe[0, 0::2], torch.zeros(4, dtype=torch.float64))
    assert torch.equal(pe[0, 1::2], torch.ones(4, dtype=torch.float64))
    assert abs(float(pe[3, 2]) - math.sin(3 / 10000 ** (2 / 8))) < 1e-12


def test_window_length_independent():
    net = M.init_params(TINY).eval()
    X, aux = inputs(T=5)
    with torch.no_grad():
        assert net(X, aux).rot6d.shape[1] == 5


def test_checkpoint_round_trip(tmp_path):
    net = M.init_params(TINY, seed=5, dtype=torch.float64)
    M.save_checkpoint(tmp_path / "c.atmo", net, {"note": 1})
    back, meta = M.load_checkpoint(tmp_path / "c.atmo")
    assert meta == {"note": 1}
    assert back.config == net.config
    for k, v in net.state_dict().items():
        assert torch.equal(back.state_dict()[k], v)
    X, aux = inputs(dtype=torch.float64)
    net.eval(), back.eval()
    with torch.no_grad():
        assert torch.equal(net(X, aux).rot6d, back(X, aux).rot6d)


def test_checkpoint_wrong_kind(tmp_path):
    seq = dataio.synth_sequence(np.random.default_rng(0), 10)
    dataio.save_motion_file(seq, tmp_path / "m.atmo")
    with pytest.raises(FileFormatError):
        M.load_checkpoint(tmp_path / "m.atmo")


def test_parameter_groups_cover_everything():
    net = M.init_params(TINY)
    groups = net.parameter_groups()
    assert set(groups) == {"embed", "modulation", "temporal_attention", "spatial_attention", "w_topo",
                           "gate_attn", "gate_topo", "ffn", "layer_norm", "pose_heads", "shape_head"}
    flat = [n for names in groups.values() for n in names]
    assert sorted(flat) == sorted(n for n, _ in net.named_parameters())
