import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsebody import dataio
from sparsebody import skeleton as sk
from sparsebody.container import read_container, write_container
from sparsebody.errors import AnchorMasked, FileFormatError, MissingAnchor, ShapeMismatch
from sparsebody.rotmath import rot6d_to_matrix


@pytest.fixture(scope="module")
def seq():
    return dataio.synth_sequence(np.random.default_rng(11), n_frames=40)


def static_sequence(T=10, root=None, yaw=0.0):
    rot = np.zeros((T, 22, 3))
    rot[:, 0, 2] = yaw
    root = np.zeros((T, 3)) if root is None else root
    return dataio.MotionSequence(rot, root, np.zeros(16))


class TestFeatures:
    def test_shape_and_blocks(self, seq):
        X = dataio.build_features(seq)
        assert X.shape == (40, 22, 18)
        gt = dataio.ground_truth(seq)
        assert torch.equal(X[..., dataio.POS], gt["positions"])
        assert torch.allclose(X[1:, :, dataio.VEL], (gt["positions"][1:] - gt["positions"][:-1]) * 60)
        assert torch.equal(X[0, :, dataio.VEL], X[1, :, dataio.VEL])
        assert torch.allclose(rot6d_to_matrix(X[..., dataio.ROT]), gt["global_rot"], atol=1e-12)

    def test_angular_velocity_channel(self, seq):
        X = dataio.build_features(seq)
        R = rot6d_to_matrix(X[..., dataio.ROT])
        D = rot6d_to_matrix(X[..., dataio.ANGVEL])
        assert torch.allclose(R[:-1] @ D[1:], R[1:], atol=1e-10)
        assert torch.equal(X[0, :, dataio.ANGVEL], X[1, :, dataio.ANGVEL])

    def test_static_pose_has_zero_velocity(self):
        X = dataio.build_features(static_sequence())
        assert float(X[..., dataio.VEL].abs().max()) == 0.0
        ident = torch.tensor([1.0, 0, 0, 0, 1, 0], dtype=torch.float64)
        assert torch.allclose(X[..., dataio.ANGVEL], ident.expand(10, 22, 6))

    def test_sequence_validation(self):
        with pytest.raises(ShapeMismatch):
            dataio.MotionSequence(np.zeros((5, 21, 3)), np.zeros((5, 3)), np.zeros(16))
        with pytest.raises(ShapeMismatch):
            dataio.MotionSequence(np.zeros((5, 22, 3)), np.zeros((4, 3)), np.zeros(16))
        with pytest.raises(ValueError):
            dataio.MotionSequence(np.full((5, 22, 3), np.nan), np.zeros((5, 3)), np.zeros(16))


class TestNormalize:
    def test_head_relative(self, seq):
        X = dataio.build_features(seq)
        Xn, aux = dataio.normalize(X)
        assert float(Xn[:, sk.HEAD, 0:2].abs().max()) == 0.0
        assert torch.equal(Xn[:, sk.HEAD, 2], X[:, sk.HEAD, 2])
        assert torch.allclose(Xn[:, 0, 0:2], X[:, 0, 0:2] - X[:, sk.HEAD, 0:2])
        assert torch.equal(Xn[..., 3:], X[..., 3:])
        assert torch.allclose(aux, X[:, sk.HEAD, 0:3] - X[0, sk.HEAD, 0:3])
        assert float(aux[0].abs().max()) == 0.0

    def test_zero_rows_stay_zero(self, seq):
        X = dataio.apply_mask(dataio.build_features(seq), dataio.sparse_mask(sk.sensor_config("hmd")))
        Xn, _ = dataio.normalize(X)
        absent = [j for j in range(22) if j not in sk.ANCHORS]
        assert float(Xn[:, absent].abs().max()) == 0.0

    def test_translation_invariant(self, seq):
        X = dataio.build_features(seq)
        Y = X.clone()
        Y[..., dataio.POS] += torch.tensor([3.0, -2.0, 0.0], dtype=torch.float64)
        a, aux_a = dataio.normalize(X)
        b, aux_b = dataio.normalize(Y)
        assert torch.allclose(a, b, atol=1e-12)
        assert torch.allclose(aux_a, aux_b, atol=1e-12)

    def test_missing_head(self, seq):
        X = dataio.build_features(seq)
        X[:, sk.HEAD] = 0
        with pytest.raises(MissingAnchor):
            dataio.normalize(X)


class TestMasking:
    def test_apply_mask_zeroes_whole_rows(self, seq):
        X = dataio.build_features(seq)
        m = dataio.bernoulli_mask(np.random.default_rng(1))
        Xm = dataio.apply_mask(X, m)
        for j in range(22):
            if m[j]:
                assert torch.equal(Xm[:, j], X[:, j])
            else:
                assert float(Xm[:, j].abs().max()) == 0.0

    def test_anchor_masked(self, seq):
        m = np.ones(22, dtype=bool)
        m[sk.LEFT_WRIST] = False
        with pytest.raises(AnchorMasked):
            dataio.apply_mask(dataio.build_features(seq), m)

    def test_mask_statistics(self):
        rng = np.random.default_rng(2024)
        masks = np.stack([dataio.bernoulli_mask(rng) for _ in range(10_000)])
        assert masks[:, list(sk.ANCHORS)].all()
        others = [j for j in range(22) if j not in sk.ANCHORS]
        dropped = 1.0 - masks[:, others].mean()
        assert abs(dropped - 0.5) < 0.02

    def test_sensor_joints_are_anchors_in_masked_mode(self):
        rng = np.random.default_rng(5)
        cfg = sk.sensor_config("hmd3")
        cur = dataio.CurriculumState(0, "continuous")
        masks = np.stack([dataio.sample_mask(rng, cfg, cur) for _ in range(2000)])
        assert masks[:, list(cfg.observed_joints)].all()

    def test_curriculum_endpoints(self):
        assert dataio.masked_fraction(0) == 0.8
        assert dataio.masked_fraction(50_000) == 0.0
        assert dataio.masked_fraction(80_000) == 0.0
        assert dataio.masked_fraction(25_000) == pytest.approx(0.4)
        assert dataio.masked_fraction(10**6, mode="continuous") == 0.8
        with pytest.raises(ValueError):
            dataio.masked_fraction(0, mode="other")

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 60_000), st.integers(0, 60_000))
    def test_curriculum_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert dataio.masked_fraction(lo) >= dataio.masked_fraction(hi)

    def test_sparse_only_after_horizon(self):
        rng = np.random.default_rng(3)
        cfg = sk.sensor_config("hmd")
        cur = dataio.CurriculumState(50_000)
        for _ in range(200):
            assert np.array_equal(dataio.sample_mask(rng, cfg, cur), dataio.sparse_mask(cfg))


class TestFov:
    def features_with_hands(self, left, right, yaw=0.0):
        X = dataio.build_features(static_sequence(4, yaw=yaw))
        X[:, sk.LEFT_WRIST, dataio.POS] = X[:, sk.HEAD, dataio.POS] + torch.as_tensor(left, dtype=torch.float64)
        X[:, sk.RIGHT_WRIST, dataio.POS] = X[:, sk.HEAD, dataio.POS] + torch.as_tensor(right, dtype=torch.float64)
        return X

    def test_in_cone_unchanged(self):
        X = self.features_with_hands([0.2, 0.5, -0.2], [-0.2, 0.5, -0.2])
        assert torch.equal(dataio.apply_fov(X), X)

    def test_behind_head_dropped(self):
        X = self.features_with_hands([0.2, -0.5, -0.2], [-0.2, -0.5, -0.2])
        out = dataio.apply_fov(X)
        assert float(out[:, [sk.LEFT_WRIST, sk.RIGHT_WRIST]].abs().max()) == 0.0
        others = [j for j in range(22) if j not in (sk.LEFT_WRIST, sk.RIGHT_WRIST)]
        assert torch.equal(out[:, others], X[:, others])

    def test_cone_follows_head_yaw(self):
        # turned 180 degrees: the hands behind the original heading are now in view
        X = self.features_with_hands([0.2, -0.5, -0.2], [-0.2, -0.5, -0.2], yaw=math.pi)
        assert torch.equal(dataio.apply_fov(X), X)

    def test_boundary_counts_as_visible(self):
        a = math.radians(60)
        X = self.features_with_hands([math.sin(a), math.cos(a), 0.0], [math.sin(a + 1e-3), math.cos(a + 1e-3), 0.0])
        out = dataio.apply_fov(X)
        assert torch.equal(out[:, sk.LEFT_WRIST], X[:, sk.LEFT_WRIST])
        assert float(out[:, sk.RIGHT_WRIST].abs().max()) == 0.0


def test_partition_merge_round_trip(seq):
    X = dataio.build_features(seq)
    scheme = sk.default_partition()
    parts = dataio.partition(X, scheme)
    assert [p.shape[-2] for p in parts] == [6, 4, 4, 4, 4]
    assert torch.equal(dataio.merge(parts, scheme), X)


class TestSynthetic:
    def test_seeded(self):
        a = dataio.synth_dataset(3, 2, n_frames=30)
        b = dataio.synth_dataset(3, 2, n_frames=30)
        for x, y in zip(a, b):
            assert np.array_equal(x.rotations, y.rotations)
            assert np.array_equal(x.root_pos, y.root_pos)

    def test_plausible(self):
        for s in dataio.synth_dataset(0, 4, n_frames=120):
            pos = dataio.ground_truth(s)["positions"]
            assert float(pos[..., 2].min()) > -0.2
            assert 1.3 < float(pos[:, sk.HEAD, 2].mean()) < 1.9
            speed = (pos[1:] - pos[:-1]).norm(dim=-1) * s.fps
            assert float(speed.max()) < 5.0


class TestFiles:
    @pytest.mark.parametrize("fmt", ["atmo", "json"])
    def test_motion_round_trip(self, tmp_path, seq, fmt):
        path = tmp_path / f"m.{fmt}"
        dataio.save_motion_file(seq, path, format=fmt)
        back = dataio.load_motion_file(path)
        assert np.array_equal(back.rotations, seq.rotations)
        assert np.array_equal(back.root_pos, seq.root_pos)
        assert np.array_equal(back.beta, seq.beta)
        assert back.fps == seq.fps
        assert dataio.file_kind(path) == ("motion" if fmt == "atmo" else "json")

    def test_sparse_round_trip(self, tmp_path, seq):
        X = dataio.build_features(seq).float().double()
        observed = dataio.sparse_mask(sk.sensor_config("hmd1"))
        dataio.save_sparse_file(tmp_path / "s.atmo", X, observed, fps=30.0)
        feats, obs, fps = dataio.load_sparse_file(tmp_path / "s.atmo")
        assert torch.equal(feats, X)
        assert np.array_equal(obs, observed)
        assert fps == 30.0

    def test_wrong_kind(self, tmp_path, seq):
        dataio.save_motion_file(seq, tmp_path / "m.atmo")
        with pytest.raises(FileFormatError):
            dataio.load_sparse_file(tmp_path / "m.atmo")

    def test_truncated_and_bad_magic(self, tmp_path, seq):
        path = tmp_path / "m.atmo"
        dataio.save_motion_file(seq, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(FileFormatError):
            dataio.load_motion_file(path)
        path.write_bytes(b"NOPE" + raw[4:])
        with pytest.raises(FileFormatError):
            dataio.load_motion_file(path)

    def test_container_round_trip(self, tmp_path):
        arrays = {"a": np.arange(6, dtype="<f8").reshape(2, 3), "b": np.array([1, 0, 1], dtype="u1")}
        write_container(tmp_path / "c.atmo", {"kind": "misc", "note": "x"}, arrays)
        header, back = read_container(tmp_path / "c.atmo", kind="misc")
        assert header["note"] == "x"
        for k in arrays:
            assert np.array_equal(back[k], arrays[k]) and back[k].dtype == arrays[k].dtype
