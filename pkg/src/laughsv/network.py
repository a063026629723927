"""Speaker-embedding network: 2-D residual backbone, statistics pooling,
affine embedding layer and a scaled-cosine (ArcFace) classification head.

Checkpoints are stored in a small self-describing container::

    8 bytes   magic b"LSVCKPT\\0"
    u32 LE    container version
    u32 LE    header length in bytes
    header    UTF-8 JSON: {"config": {...}, "extra": {...},
                           "tensors": [{"name", "shape", "dtype", "offset", "nbytes"}]}
    payload   concatenated little-endian float32 tensors

Integer buffers (BatchNorm step counters) are stored as float32 and cast
back on load.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointIncompatible, DegenerateEmbedding, FrameTooShort

CHECKPOINT_MAGIC = b"LSVCKPT\0"
CHECKPOINT_VERSION = 1
STATS_EPS = 1e-8
MIN_FRAMES = 8


@dataclass(frozen=True)
class ModelConfig:
    block_widths: tuple = (8, 16, 32, 64)
    blocks_per_stage: tuple = (1, 1, 1, 1)
    embedding_dim: int = 256
    num_speakers: int = 2
    arcface_margin: float = 0.2
    arcface_scale: float = 32.0
    n_mels: int = 80

    def __post_init__(self):
        object.__setattr__(self, "block_widths", tuple(int(w) for w in self.block_widths))
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        if len(self.block_widths) != 4 or len(self.blocks_per_stage) != 4:
            raise ValueError("block_widths and blocks_per_stage need 4 entries")
        if min(self.block_widths) <= 0 or min(self.blocks_per_stage) <= 0:
            raise ValueError("widths and block counts must be positive")
        if self.embedding_dim <= 0 or self.num_speakers <= 0:
            raise ValueError("embedding_dim and num_speakers must be positive")
        if not 0 <= self.arcface_margin < math.pi / 2:
            raise ValueError("arcface_margin must lie in [0, pi/2)")
        if self.arcface_scale <= 0:
            raise ValueError("arcface_scale must be positive")

    @classmethod
    def full_scale(cls, num_speakers: int, **overrides) -> "ModelConfig":
        """ResNet34 widths and depths."""
        kw = dict(block_widths=(64, 128, 256, 512), blocks_per_stage=(3, 4, 6, 3),
                  num_speakers=num_speakers)
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["block_widths"] = list(self.block_widths)
        d["blocks_per_stage"] = list(self.blocks_per_stage)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class SpeakerEmbedding:
    vector: np.ndarray
    utt_id: str = ""
    model_id: str = ""

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(self.vector)):
            raise DegenerateEmbedding(f"non-finite embedding for {self.utt_id!r}")
        if not np.linalg.norm(self.vector) > 0:
            raise DegenerateEmbedding(f"zero-norm embedding for {self.utt_id!r}")

    def normalized(self) -> np.ndarray:
        return self.vector / np.linalg.norm(self.vector)


def _conv3x3(cin, cout, stride=1):
    # replicate padding keeps a time-constant input time-constant
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False,
                     padding_mode="replicate")


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = _conv3x3(cin, cout, stride)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = _conv3x3(cout, cout)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                nn.BatchNorm2d(cout),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


def reduce_frequency(x: torch.Tensor) -> torch.Tensor:
    """(B, C, F, T) -> (B, C, T) by averaging the frequency axis."""
    return x.mean(dim=2)


def statistics_pooling(x: torch.Tensor, eps: float = STATS_EPS) -> torch.Tensor:
    """Concatenate per-channel temporal mean and standard deviation.

    ``x`` is (B, C, T); returns (B, 2C). The variance is the biased
    estimate and ``eps`` sits inside the square root.
    """
    mean = x.mean(dim=-1)
    var = ((x - mean.unsqueeze(-1)) ** 2).mean(dim=-1)
    return torch.cat([mean, torch.sqrt(var + eps)], dim=-1)


class ResNetEmbedder(nn.Module):
    """Feature matrix batch (B, T, n_mels) -> embedding batch (B, D)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.block_widths
        self.stem = nn.Sequential(_conv3x3(1, w[0]), nn.BatchNorm2d(w[0]), nn.ReLU())
        stages = []
        cin = w[0]
        for i, (cout, n) in enumerate(zip(w, cfg.blocks_per_stage)):
            stride = 1 if i == 0 else 2
            blocks = [BasicBlock(cin, cout, stride)]
            blocks += [BasicBlock(cout, cout) for _ in range(n - 1)]
            stages.append(nn.Sequential(*blocks))
            cin = cout
        self.stages = nn.Sequential(*stages)
        self.embedding = nn.Linear(2 * w[-1], cfg.embedding_dim)

    def pooled(self, feats: torch.Tensor) -> torch.Tensor:
        x = feats.transpose(1, 2).unsqueeze(1)  # (B, 1, F, T)
        x = self.stages(self.stem(x))
        return statistics_pooling(reduce_frequency(x))

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return self.embedding(self.pooled(feats))


class ArcFaceHead(nn.Module):
    """Class weight matrix of the scaled-cosine classifier."""

    def __init__(self, embedding_dim: int, num_speakers: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_speakers, embedding_dim))
        nn.init.xavier_uniform_(self.weight)

    def cosine(self, emb: torch.Tensor) -> torch.Tensor:
        return F.linear(F.normalize(emb, dim=-1), F.normalize(self.weight, dim=-1))


class SpeakerNet(nn.Module):
    """Embedder plus classification head; the unit that gets checkpointed."""

    def __init__(self, cfg: ModelConfig, extra: dict | None = None):
        super().__init__()
        self.cfg = cfg
        self.extra = dict(extra or {})
        self.embedder = ResNetEmbedder(cfg)
        self.head = ArcFaceHead(cfg.embedding_dim, cfg.num_speakers)

    def forward(self, feats):
        return self.embedder(feats)

    def posteriors(self, emb: torch.Tensor) -> torch.Tensor:
        return posteriors_from_cosine(self.head.cosine(emb), self.cfg.arcface_scale)

    def clone(self) -> "SpeakerNet":
        return copy.deepcopy(self)

    @property
    def model_id(self) -> str:
        return model_hash(self)


def posteriors_from_cosine(cosine: torch.Tensor, scale: float) -> torch.Tensor:
    # margin-free: the angular margin only perturbs the training loss
    return torch.softmax(scale * cosine, dim=-1)


def build_model(cfg: ModelConfig, seed: int = 0, extra: dict | None = None) -> SpeakerNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SpeakerNet(cfg, extra)


def _as_batch(feats) -> torch.Tensor:
    from .features import FeatureMatrix

    if isinstance(feats, FeatureMatrix):
        feats = feats.frames
    x = torch.as_tensor(np.asarray(feats), dtype=torch.float32)
    if x.ndim == 2:
        x = x.unsqueeze(0)
    if x.shape[1] < MIN_FRAMES:
        raise FrameTooShort(f"need at least {MIN_FRAMES} frames, got {x.shape[1]}")
    return x


def embed_batch(model: SpeakerNet, feats) -> np.ndarray:
    """Inference-mode embeddings for a (B, T, F) array or a single matrix."""
    x = _as_batch(feats).to(next(model.parameters()).dtype)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return model(x).double().numpy()
    finally:
        model.train(was_training)


def forward_embed(feat, model: SpeakerNet, utt_id: str | None = None) -> SpeakerEmbedding:
    """Embed one feature matrix with the model in inference mode."""
    from .features import FeatureMatrix

    if utt_id is None:
        utt_id = feat.utt_id if isinstance(feat, FeatureMatrix) else ""
    vec = embed_batch(model, feat)[0]
    return SpeakerEmbedding(vec, utt_id=utt_id, model_id=model.model_id)


def forward_posteriors(embedding, model: SpeakerNet) -> np.ndarray:
    """Softmax over s*cos(theta_j) for every class, without margin."""
    vec = embedding.vector if isinstance(embedding, SpeakerEmbedding) else np.asarray(embedding)
    if not np.linalg.norm(vec) > 0:
        raise DegenerateEmbedding("cannot compute posteriors of a zero-norm embedding")
    with torch.no_grad():
        w = model.head.weight.detach().double()
        cos = F.linear(F.normalize(torch.as_tensor(vec, dtype=torch.float64), dim=-1),
                       F.normalize(w, dim=-1))
        return posteriors_from_cosine(cos, model.cfg.arcface_scale).numpy()


# -- checkpoints ---------------------------------------------------------

def _serialize(model: SpeakerNet) -> tuple[dict, bytes]:
    tensors, chunks, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy()
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": str(t.dtype).replace("torch.", ""),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"config": model.cfg.to_dict(), "extra": model.extra, "tensors": tensors}
    return header, b"".join(chunks)


def model_hash(model: SpeakerNet) -> str:
    header, payload = _serialize(model)
    h = hashlib.sha256(json.dumps(header, sort_keys=True).encode())
    h.update(payload)
    return h.hexdigest()[:16]


def save_checkpoint(model: SpeakerNet, path) -> str:
    """Write ``model`` to ``path``; returns the model id."""
    header, payload = _serialize(model)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)
    return model_hash(model)


def load_checkpoint(path, expected: ModelConfig | None = None) -> SpeakerNet:
    """Load a checkpoint; ``expected`` enforces a matching configuration."""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointIncompatible(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointIncompatible(f"{path}: container version {version} unsupported")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    payload = memoryview(data)[16 + hlen:]
    cfg = ModelConfig.from_dict(header["config"])
    if expected is not None and cfg != expected:
        diff = {k: (v, getattr(expected, k)) for k, v in cfg.to_dict().items()
                if v != expected.to_dict()[k]}
        raise CheckpointIncompatible(f"{path}: config mismatch {diff}")
    model = SpeakerNet(cfg, header.get("extra"))
    state = {}
    for t in header["tensors"]:
        arr = np.frombuffer(payload[t["offset"]:t["offset"] + t["nbytes"]], dtype="<f4")
        state[t["name"]] = torch.from_numpy(arr.reshape(t["shape"]).copy()).to(getattr(torch, t["dtype"]))
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointIncompatible(str(exc)) from exc
    return model


def check_compatible(a: SpeakerNet, b: SpeakerNet) -> None:
    if a.cfg != b.cfg:
        raise CheckpointIncompatible("teacher and student architectures differ")


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()
