"""scikit-learn style wrappers around pre-training and distillation.

``X`` is a sequence of ``(T, n_mels)`` log-Mel matrices, ``y`` the speaker
label of each. Both estimators expose ``transform`` (embeddings),
``predict_proba`` (margin-free posteriors) and ``predict``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .distill import TrainConfig, TrainingSet, pretrain, run_distillation
from .features import FeatureMatrix, LogMelExtractor
from .losses import LossWeights
from .network import ModelConfig, SpeakerNet, embed_batch
from .selector import LaughterLikeSelector, WindowSelection
from .validation import check_feature_list

__all__ = ["SpeakerEmbedder", "TeacherStudentDistiller", "LogMelExtractor", "LaughterLikeSelector"]


def _training_set(X, y, classes):
    index = {c: i for i, c in enumerate(classes)}
    feats, labels = {}, {}
    for i, (f, lab) in enumerate(zip(X, y)):
        if lab not in index:
            raise ValueError(f"label {lab!r} not among the fitted classes")
        feats[str(i)] = FeatureMatrix(f, str(i))
        labels[str(i)] = index[lab]
    return TrainingSet(feats, labels, [str(c) for c in classes])


class _EmbeddingMixin:
    def _embed(self, model: SpeakerNet, X) -> np.ndarray:
        mats = check_feature_list(X, model.cfg.n_mels)
        return np.vstack([embed_batch(model, m) for m in mats])

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self._embed(self.model_, X)

    def predict_proba(self, X) -> np.ndarray:
        import torch

        check_is_fitted(self, "model_")
        emb = torch.as_tensor(self.transform(X), dtype=torch.float32)
        with torch.no_grad():
            return self.model_.posteriors(emb).double().numpy()

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.predict_proba(X).argmax(axis=1)]


class SpeakerEmbedder(_EmbeddingMixin, TransformerMixin, BaseEstimator):
    """Speaker network trained from scratch with the ArcFace loss."""

    def __init__(self, block_widths=(8, 16, 32, 64), blocks_per_stage=(1, 1, 1, 1), embedding_dim=256,
                 arcface_margin=0.2, arcface_scale=32.0, n_mels=80, lr_init=0.1, lr_final=1e-3,
                 milestones=(0.6, 0.85), weight_decay=1e-4, batch_size=16, epochs=1, max_steps=None,
                 crop_s=2.0, seed=0):
        self.block_widths = block_widths
        self.blocks_per_stage = blocks_per_stage
        self.embedding_dim = embedding_dim
        self.arcface_margin = arcface_margin
        self.arcface_scale = arcface_scale
        self.n_mels = n_mels
        self.lr_init = lr_init
        self.lr_final = lr_final
        self.milestones = milestones
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.crop_s = crop_s
        self.seed = seed

    def fit(self, X, y):
        X = check_feature_list(X, self.n_mels)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} items but y has {len(y)}")
        self.classes_ = np.unique(y)
        mcfg = ModelConfig(self.block_widths, self.blocks_per_stage, self.embedding_dim, len(self.classes_),
                           self.arcface_margin, self.arcface_scale, self.n_mels)
        tcfg = TrainConfig(lr_init=self.lr_init, lr_final=self.lr_final, milestones=self.milestones,
                           weight_decay=self.weight_decay, batch_size=self.batch_size, epochs=self.epochs,
                           max_steps=self.max_steps, crop_s=self.crop_s, seed=self.seed)
        self.model_, self.history_ = pretrain(_training_set(X, y, self.classes_), mcfg, tcfg)
        return self

    @classmethod
    def from_model(cls, model: SpeakerNet, classes=None) -> "SpeakerEmbedder":
        """Wrap an already trained network, e.g. one read from a checkpoint."""
        c = model.cfg
        est = cls(c.block_widths, c.blocks_per_stage, c.embedding_dim, c.arcface_margin, c.arcface_scale, c.n_mels)
        est.model_ = model
        if classes is None:
            classes = model.extra.get("speakers") or range(c.num_speakers)
        est.classes_ = np.asarray(list(classes))
        est.history_ = []
        return est


class TeacherStudentDistiller(_EmbeddingMixin, TransformerMixin, BaseEstimator):
    """Fine-tune a copy of a fitted ``SpeakerEmbedder`` on short selected windows.

    ``fit(X, y, selections)`` takes one ``WindowSelection`` (or a start frame)
    per item of ``X``; ``None`` entries are skipped.
    """

    def __init__(self, teacher=None, weights=(1.0, 2.0, 2.0), lr_init=1e-3, lr_final=1e-6,
                 milestones=(0.5, 0.75, 0.9), weight_decay=0.0, batch_size=16, epochs=1, max_steps=None,
                 student_len_s=2.0, teacher_len_s=5.0, teacher_crop="head", freeze_bn=True, seed=0):
        self.teacher = teacher
        self.weights = weights
        self.lr_init = lr_init
        self.lr_final = lr_final
        self.milestones = milestones
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.student_len_s = student_len_s
        self.teacher_len_s = teacher_len_s
        self.teacher_crop = teacher_crop
        self.freeze_bn = freeze_bn
        self.seed = seed

    def fit(self, X, y, selections):
        if self.teacher is None:
            raise ValueError("teacher is required")
        base = self.teacher
        if isinstance(base, SpeakerNet):
            base = SpeakerEmbedder.from_model(base)
        check_is_fitted(base, "model_")
        X = check_feature_list(X, base.model_.cfg.n_mels)
        y = np.asarray(y)
        if not len(X) == len(y) == len(selections):
            raise ValueError("X, y and selections must have the same length")
        width = int(round(self.student_len_s * 100))
        sels = []
        for i, s in enumerate(selections):
            if s is None:
                continue
            if not isinstance(s, WindowSelection):
                s = WindowSelection(str(i), int(s), int(s) + width, float("nan"))
            sels.append(WindowSelection(str(i), s.start_frame, s.end_frame, s.mean_prob))
        w = self.weights
        tcfg = TrainConfig(lr_init=self.lr_init, lr_final=self.lr_final, milestones=self.milestones,
                           weight_decay=self.weight_decay, batch_size=self.batch_size, epochs=self.epochs,
                           max_steps=self.max_steps, seed=self.seed,
                           weights=LossWeights.parse(w) if isinstance(w, str) else LossWeights(*w),
                           student_len_s=self.student_len_s, teacher_len_s=self.teacher_len_s,
                           teacher_crop=self.teacher_crop, freeze_bn=self.freeze_bn)
        self.classes_ = base.classes_
        data = _training_set(X, y, self.classes_)
        self.model_, self.history_ = run_distillation(base.model_, sels, data, tcfg)
        return self
