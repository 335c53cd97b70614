"""scikit-learn style front end: a featurizer and a trainable pose regressor."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import dataio, evalx
from . import skeleton as sk
from .dataio import FEATURE_DIM, MotionSequence
from .errors import ShapeMismatch
from .model import ModelConfig, PoseEstimate, init_params, load_checkpoint, save_checkpoint
from .training import LossWeights, TrainConfig, train


def check_sequences(X) -> list[MotionSequence]:
    """Validate a non-empty collection of :class:`MotionSequence`."""
    if isinstance(X, MotionSequence):
        X = [X]
    X = list(X)
    if not X:
        raise ValueError("expected at least one motion sequence")
    bad = [type(x).__name__ for x in X if not isinstance(x, MotionSequence)]
    if bad:
        raise TypeError(f"expected MotionSequence items, got {bad[0]}")
    return X


def check_feature_stream(X) -> torch.Tensor:
    """Validate one (T, 22, 18) raw tracking stream and return it as float64."""
    X = torch.as_tensor(np.asarray(X, dtype=np.float64)) if not isinstance(X, torch.Tensor) else X.double()
    if X.ndim != 3 or X.shape[1:] != (sk.N_JOINTS, FEATURE_DIM):
        raise ShapeMismatch(f"expected (T, 22, 18) features, got {tuple(X.shape)}")
    if not bool(torch.isfinite(X).all()):
        raise ValueError("features contain NaN or inf")
    return X


class MotionFeaturizer(TransformerMixin, BaseEstimator):
    """Turns ground-truth sequences into the zero-padded tracking streams seen at inference.

    Parameters
    ----------
    mode : {"standard", "handtracking"}
        Hand-tracking mode drops hand signals outside the headset's view cone.
    sensors : {"hmd", "hmd1", "hmd2", "hmd3"}
        Which joints carry a tracker.
    fov_degrees : float
        Full opening angle of the view cone.
    """

    def __init__(self, mode="standard", sensors="hmd", fov_degrees=120.0):
        self.mode = mode
        self.sensors = sensors
        self.fov_degrees = fov_degrees

    def fit(self, X, y=None):
        check_sequences(X)
        if self.mode not in evalx.MODES:
            raise ValueError(f"mode must be one of {evalx.MODES}")
        self.observed_joints_ = sk.sensor_config(self.sensors).observed_joints
        return self

    def transform(self, X):
        check_is_fitted(self, "observed_joints_")
        return [evalx.sparse_features(s, self.mode, self.sensors, fov_degrees=self.fov_degrees)
                for s in check_sequences(X)]


class SparsePoseRegressor(BaseEstimator):
    """Full-body pose regressor trained on ground-truth motion.

    ``fit`` takes a list of :class:`MotionSequence`. ``predict`` accepts
    sequences (their tracking signals are derived with ``sensors``) or raw
    ``(T, 22, 18)`` feature streams, and returns one :class:`PoseEstimate`
    per input with head-anchored joint positions.

    The defaults mirror the full-size setting; see the README for the
    desk-scale configuration used in tests.
    """

    def __init__(self, n_blocks=6, embed_dim=256, n_heads=8, window=40, dropout=0.1, ffn_mult=4,
                 steps=1000, batch_size=256, lr=1e-4, weight_decay=1e-2, lr_schedule="cosine",
                 curriculum="decaying", curriculum_steps=dataio.CURRICULUM_STEPS, fk_frames=30,
                 sensors="hmd", loss_weights=None, random_state=0):
        self.n_blocks = n_blocks
        self.embed_dim = embed_dim
        self.n_heads = n_heads
        self.window = window
        self.dropout = dropout
        self.ffn_mult = ffn_mult
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.lr_schedule = lr_schedule
        self.curriculum = curriculum
        self.curriculum_steps = curriculum_steps
        self.fk_frames = fk_frames
        self.sensors = sensors
        self.loss_weights = loss_weights
        self.random_state = random_state

    def model_config(self) -> ModelConfig:
        return ModelConfig(n_blocks=self.n_blocks, embed_dim=self.embed_dim, n_heads=self.n_heads,
                           window=self.window, dropout=self.dropout, ffn_mult=self.ffn_mult)

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, steps=self.steps, lr=self.lr,
                           weight_decay=self.weight_decay, lr_schedule=self.lr_schedule,
                           curriculum=self.curriculum, curriculum_steps=self.curriculum_steps,
                           fk_frames=self.fk_frames, sensors=self.sensors, seed=self._seed(),
                           weights=LossWeights(**(self.loss_weights or {})))

    def _seed(self) -> int:
        rs = self.random_state
        if rs is None:
            return int(np.random.default_rng().integers(2**31))
        if isinstance(rs, np.random.RandomState):
            return int(rs.randint(2**31))
        return int(rs)

    def fit(self, X, y=None, progress=None):
        seqs = check_sequences(X)
        mcfg, tcfg = self.model_config(), self.train_config()
        model = init_params(mcfg, seed=tcfg.seed)
        result = train(seqs, mcfg, tcfg, model=model, progress=progress)
        self.model_ = result.model
        self.loss_log_ = result.log
        self.n_features_in_ = FEATURE_DIM
        return self

    def _streams(self, X):
        if isinstance(X, MotionSequence):
            X = [X]
        out = []
        for item in X:
            if isinstance(item, MotionSequence):
                out.append(evalx.sparse_features(item, "standard", self.sensors))
            else:
                out.append(check_feature_stream(item))
        return out

    def predict(self, X, anchor=True) -> list[PoseEstimate]:
        check_is_fitted(self, "model_")
        topo, basis = sk.default_skeleton()
        out = []
        for stream in self._streams(X):
            est = evalx.sliding_window_infer(self.model_, stream)
            est.positions = evalx.reconstruct_positions(est, stream[:, sk.HEAD, dataio.POS], topo, basis, anchor)
            out.append(est)
        return out

    def evaluate(self, X, mode="standard", sensors=None) -> evalx.MetricReport:
        check_is_fitted(self, "model_")
        return evalx.evaluate(self.model_, check_sequences(X), mode, sensors or self.sensors)

    def score(self, X, y=None) -> float:
        """Negative MPJPE in cm (higher is better)."""
        return -self.evaluate(X).mpjpe

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, {"estimator_params": self.get_params(), "train": self.train_config().to_dict()})

    @classmethod
    def load(cls, path) -> "SparsePoseRegressor":
        model, meta = load_checkpoint(path)
        params = {k: v for k, v in meta.get("estimator_params", {}).items() if k in cls._get_param_names()}
        arch = {k: v for k, v in model.config.to_dict().items() if k != "part_sizes"}
        est = cls(**(params | arch))
        est.model_ = model
        est.loss_log_ = []
        est.n_features_in_ = FEATURE_DIM
        return est
