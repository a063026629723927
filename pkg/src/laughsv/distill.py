"""Speaker-classification pre-training and teacher-student distillation.

The teacher is a frozen copy of the pre-trained network. The student starts
from the same weights and learns from three terms: ArcFace on its own
head, cosine distance to the teacher embedding, and cross-entropy against
the teacher posterior.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import torch

from .errors import InsufficientSpeakers, NoTrainingData
from .features import FeatureMatrix, LogMelConfig, logmel, truncate, target_frames
from .losses import LossWeights, arcface_loss, emb_loss, kld_loss, total_loss
from .network import ModelConfig, SpeakerNet, build_model, check_compatible, embed_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 1e-3
    lr_final: float = 1e-6
    momentum: float = 0.9
    weight_decay: float = 0.0
    milestones: tuple = (0.5, 0.75, 0.9)   # fractions of the total step budget
    batch_size: int = 16
    epochs: int = 1
    max_steps: int | None = None           # overrides epochs when set
    seed: int = 0
    weights: LossWeights = LossWeights()
    student_len_s: float = 2.0
    teacher_len_s: float = 5.0
    crop_s: float = 2.0                    # pre-training crop length
    teacher_crop: str = "head"
    freeze_bn: bool = True                 # keep BatchNorm statistics fixed while distilling
    grad_clip: float | None = None         # max global gradient norm per step

    def __post_init__(self):
        if not self.lr_final <= self.lr_init:
            raise ValueError("lr_final must not exceed lr_init")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        object.__setattr__(self, "milestones", tuple(float(m) for m in self.milestones))

    @classmethod
    def pretrain_defaults(cls, **kw) -> "TrainConfig":
        base = dict(lr_init=0.1, lr_final=1e-3, milestones=(0.6, 0.85), weight_decay=1e-4)
        base.update(kw)
        return cls(**base)

    def total_steps(self, n_items: int) -> int:
        if self.max_steps is not None:
            return int(self.max_steps)
        return self.epochs * math.ceil(n_items / self.batch_size)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["weights"] = list(self.weights.as_tuple())
        d["milestones"] = list(self.milestones)
        return d


@dataclass
class TrainingSet:
    """Utterance-level feature matrices with integer speaker labels."""

    features: dict                      # utt_id -> FeatureMatrix
    labels: dict                        # utt_id -> int
    speakers: list = field(default_factory=list)

    @classmethod
    def from_manifest(cls, manifest, audio_fn=None, feature_cfg: LogMelConfig = LogMelConfig(),
                      speakers: Sequence[str] | None = None) -> "TrainingSet":
        from .corpus import load_segment_audio

        audio_fn = audio_fn or load_segment_audio
        speakers = list(speakers) if speakers is not None else manifest.speakers()
        index = {s: i for i, s in enumerate(speakers)}
        feats, labels = {}, {}
        for r in manifest.records:
            feats[r.utt_id] = logmel(audio_fn(r), feature_cfg, r.utt_id)
            labels[r.utt_id] = index[r.speaker_id]
        return cls(feats, labels, speakers)

    @property
    def utt_ids(self) -> list[str]:
        return sorted(self.features)


def make_optimizer(params, cfg: TrainConfig, total_steps: int):
    opt = torch.optim.SGD(params, lr=cfg.lr_init, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    n = len(cfg.milestones)
    gamma = (cfg.lr_final / cfg.lr_init) ** (1.0 / n) if n else 1.0
    steps = sorted({max(1, int(round(f * total_steps))) for f in cfg.milestones})
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=steps, gamma=gamma)
    return opt, sched


def _batches(n: int, batch_size: int, total_steps: int, rng: np.random.Generator):
    """Yield index batches over shuffled epochs until ``total_steps``."""
    step = 0
    while step < total_steps:
        order = rng.permutation(n)
        for a in range(0, n, batch_size):
            if step >= total_steps:
                return
            yield order[a:a + batch_size]
            step += 1


def _stack(mats) -> torch.Tensor:
    return torch.as_tensor(np.stack([m.frames if isinstance(m, FeatureMatrix) else m for m in mats]),
                           dtype=torch.float32)


def pretrain(data: TrainingSet, model_cfg: ModelConfig | None = None, cfg: TrainConfig | None = None,
             on_step=None) -> tuple[SpeakerNet, list[dict]]:
    """Train backbone and ArcFace head on random crops with the speaker loss only."""
    cfg = cfg or TrainConfig.pretrain_defaults()
    n_spk = len(set(data.labels.values()))
    if n_spk < 2:
        raise InsufficientSpeakers(f"pre-training needs >= 2 speakers, got {n_spk}")
    model_cfg = model_cfg or ModelConfig(num_speakers=len(data.speakers) or n_spk)
    model = build_model(model_cfg, cfg.seed, extra={"speakers": list(data.speakers)})
    utts = data.utt_ids
    total = cfg.total_steps(len(utts))
    opt, sched = make_optimizer(model.parameters(), cfg, total)
    rng = np.random.default_rng(cfg.seed)
    history = []
    model.train()
    for step, idx in enumerate(_batches(len(utts), cfg.batch_size, total, rng), 1):
        ids = [utts[i] for i in idx]
        x = _stack([truncate(data.features[u], cfg.crop_s, "random", rng) for u in ids])
        y = torch.tensor([data.labels[u] for u in ids])
        loss = arcface_loss(model(x), y, model.head.weight, model_cfg.arcface_margin, model_cfg.arcface_scale)
        opt.zero_grad()
        loss.backward()
        lr = opt.param_groups[0]["lr"]
        opt.step()
        sched.step()
        rec = {"step": step, "lr": lr, "loss": loss.detach().item()}
        history.append(rec)
        if on_step:
            on_step(rec)
    model.eval()
    return model, history


@dataclass
class ParallelBatch:
    """Student and teacher inputs cut from the same source utterances."""

    student_feats: torch.Tensor          # (B, T_s, F)
    teacher_feats: torch.Tensor | None   # (B, T_t, F); None when teacher outputs are cached
    labels: torch.Tensor                 # (B,)

    def __post_init__(self):
        n = self.student_feats.shape[0]
        if self.labels.shape != (n,) or (self.teacher_feats is not None and self.teacher_feats.shape[0] != n):
            raise ValueError("student, teacher and label batches must have equal length")


def teacher_outputs(teacher: SpeakerNet, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Frozen-teacher embeddings and margin-free posteriors (no gradient)."""
    teacher.eval()
    with torch.no_grad():
        emb = teacher(feats)
        return emb, teacher.posteriors(emb)


def _student_mode(student: SpeakerNet, freeze_bn: bool) -> None:
    student.train()
    if freeze_bn:
        for m in student.modules():
            if isinstance(m, torch.nn.modules.batchnorm._BatchNorm):
                m.eval()


def distill_losses(batch: ParallelBatch, teacher: SpeakerNet, student: SpeakerNet,
                   weights: LossWeights, cached: tuple | None = None):
    """Return ``(total, l_cla, l_emb, l_kld)`` as graph-connected tensors."""
    if cached is None:
        t_emb, t_post = teacher_outputs(teacher, batch.teacher_feats)
    else:
        t_emb, t_post = cached
    s_emb = student(batch.student_feats)
    cfg = student.cfg
    l_cla = arcface_loss(s_emb, batch.labels, student.head.weight, cfg.arcface_margin, cfg.arcface_scale)
    l_emb = emb_loss(s_emb, t_emb)
    l_kld = kld_loss(t_post, student.posteriors(s_emb))
    return total_loss(l_cla, l_emb, l_kld, weights), l_cla, l_emb, l_kld


def distill_step(batch: ParallelBatch, teacher: SpeakerNet, student: SpeakerNet, optimizer,
                 weights: LossWeights = LossWeights(), cached: tuple | None = None,
                 freeze_bn: bool = True, grad_clip: float | None = None) -> tuple[float, float, float, float]:
    """One optimizer update of the student (backbone + head); the teacher is untouched."""
    check_compatible(teacher, student)
    _student_mode(student, freeze_bn)
    parts = distill_losses(batch, teacher, student, weights, cached)
    optimizer.zero_grad()
    parts[0].backward()
    if grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(student.parameters(), grad_clip)
    optimizer.step()
    return tuple(p.detach().item() for p in parts)


@dataclass
class DistillItem:
    utt_id: str
    student: np.ndarray
    teacher: np.ndarray
    label: int


def build_items(selections, data: TrainingSet, cfg: TrainConfig, rng=None) -> list[DistillItem]:
    """Pair each selected window with a teacher crop of the same utterance."""
    items = []
    n_student = target_frames(cfg.student_len_s)
    for sel in selections:
        feat = data.features.get(sel.utt_id)
        if feat is None:
            continue
        seg = feat.with_frames(feat.frames[sel.start_frame:min(sel.end_frame, feat.num_frames)])
        if seg.num_frames == 0:
            continue
        if seg.num_frames != n_student:
            seg = truncate(seg, cfg.student_len_s, "head")
        teacher = truncate(feat, cfg.teacher_len_s, cfg.teacher_crop,
                           rng if cfg.teacher_crop == "random" else None)
        items.append(DistillItem(sel.utt_id, seg.frames, teacher.frames, data.labels[sel.utt_id]))
    return items


def run_distillation(pretrained: SpeakerNet, selections, data: TrainingSet, cfg: TrainConfig | None = None,
                     on_step=None) -> tuple[SpeakerNet, list[dict]]:
    """Teacher-student fine-tuning; returns the student and the per-step log."""
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    items = build_items(list(selections), data, cfg, rng)
    if not items:
        raise NoTrainingData("no usable selections for distillation")
    teacher = pretrained.clone().eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    student = pretrained.clone()
    check_compatible(teacher, student)
    total = cfg.total_steps(len(items))
    opt, sched = make_optimizer(student.parameters(), cfg, total)

    cache = None
    if cfg.teacher_crop == "head":
        # frozen teacher on fixed crops: outputs can be computed once
        embs, posts = [], []
        for a in range(0, len(items), 64):
            e, p = teacher_outputs(teacher, _stack([it.teacher for it in items[a:a + 64]]))
            embs.append(e)
            posts.append(p)
        cache = (torch.cat(embs), torch.cat(posts))

    history = []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for step, idx in enumerate(_batches(len(items), cfg.batch_size, total, rng), 1):
            sel = [items[i] for i in idx]
            batch = ParallelBatch(_stack([it.student for it in sel]),
                                  None if cache is not None else _stack([it.teacher for it in sel]),
                                  torch.tensor([it.label for it in sel]))
            cached = None if cache is None else (cache[0][idx], cache[1][idx])
            lr = opt.param_groups[0]["lr"]
            tot, l_cla, l_emb, l_kld = distill_step(batch, teacher, student, opt, cfg.weights, cached, cfg.freeze_bn,
                                                       cfg.grad_clip)
            sched.step()
            rec = {"step": step, "lr": lr, "total": tot, "l_cla": l_cla, "l_emb": l_emb, "l_kld": l_kld}
            history.append(rec)
            if on_step:
                on_step(rec)
    student.eval()
    return student, history


def mean_teacher_distance(student: SpeakerNet, teacher: SpeakerNet, items: Sequence[DistillItem]) -> float:
    """Mean ``1 - cos`` between student(student input) and teacher(teacher input)."""
    s = embed_batch(student, np.stack([it.student for it in items]))
    t = embed_batch(teacher, np.stack([it.teacher for it in items]))
    return float(emb_loss(s, t))


def write_log(history, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")
