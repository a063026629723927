"""Log-Mel filterbank frontend and duration truncation."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import FrameTooShort

CACHE_MAGIC = 0x4C4D454C  # "LMEL"


@dataclass(frozen=True)
class LogMelConfig:
    sample_rate: int = 16000
    frame_len_ms: int = 25
    hop_ms: int = 10
    n_fft: int = 512
    n_mels: int = 80
    f_min: float = 20.0
    f_max: float = 7600.0
    eps: float = 1e-6
    preemphasis: float = 0.0
    mean_norm: bool = False

    @property
    def frame_len(self) -> int:
        return self.sample_rate * self.frame_len_ms // 1000

    @property
    def hop(self) -> int:
        return self.sample_rate * self.hop_ms // 1000


@dataclass
class FeatureMatrix:
    frames: np.ndarray
    utt_id: str = ""
    frame_len_ms: int = 25
    hop_ms: int = 10
    sample_rate: int = 16000

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def __len__(self):
        return self.num_frames

    def with_frames(self, frames: np.ndarray) -> "FeatureMatrix":
        return FeatureMatrix(frames, self.utt_id, self.frame_len_ms, self.hop_ms, self.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: LogMelConfig = LogMelConfig()) -> np.ndarray:
    """(n_mels, n_fft//2 + 1) triangular filters, HTK mel scale, peak 1."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    bins = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins - lo) / (mid - lo)
    down = (hi - bins) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def mel_centers(cfg: LogMelConfig = LogMelConfig()) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))[1:-1]


def num_frames(n_samples: int, cfg: LogMelConfig = LogMelConfig()) -> int:
    if n_samples < cfg.frame_len:
        return 0
    return 1 + (n_samples - cfg.frame_len) // cfg.hop


def logmel(waveform, cfg: LogMelConfig = LogMelConfig(), utt_id: str = "") -> FeatureMatrix:
    """Natural-log Mel filterbank energies of a mono waveform.

    Hann-windowed frames, power spectrum from an ``n_fft``-point real FFT,
    triangular Mel filters, then ``log(energy + eps)``.
    """
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("waveform must be one-dimensional")
    if x.shape[0] < cfg.frame_len:
        raise FrameTooShort(f"{x.shape[0]} samples is shorter than one {cfg.frame_len}-sample frame")
    if cfg.preemphasis:
        x = np.append(x[0], x[1:] - cfg.preemphasis * x[:-1])
    frames = sliding_window_view(x, cfg.frame_len)[:: cfg.hop]
    window = np.hanning(cfg.frame_len + 1)[:-1]  # periodic Hann
    power = np.abs(np.fft.rfft(frames * window, n=cfg.n_fft, axis=-1)) ** 2
    feats = np.log(power @ mel_filterbank(cfg).T + cfg.eps)
    if cfg.mean_norm:
        feats = feats - feats.mean(axis=0, keepdims=True)
    return FeatureMatrix(feats, utt_id, cfg.frame_len_ms, cfg.hop_ms, cfg.sample_rate)


def target_frames(target_s: float, hop_ms: int = 10) -> int:
    return int(round(target_s * 1000.0 / hop_ms))


def truncate(feat: FeatureMatrix, target_s: float, mode: str = "head", seed=None) -> FeatureMatrix:
    """Cut ``feat`` to ``target_s`` seconds.

    Longer inputs yield a contiguous slice starting at frame 0 (``head``) or at a
    seeded uniform offset (``random``); shorter inputs are wrapped by repetition.
    """
    n = target_frames(target_s, feat.hop_ms)
    t = feat.num_frames
    if t >= n:
        if mode == "head":
            start = 0
        elif mode == "random":
            rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
            start = int(rng.integers(0, t - n + 1))
        else:
            raise ValueError(f"unknown truncation mode {mode!r}")
        return feat.with_frames(feat.frames[start:start + n])
    return feat.with_frames(feat.frames[np.arange(n) % t])


def add_white_noise(waveform, snr_db: float, seed=None) -> np.ndarray:
    """Additive white Gaussian noise at a fixed signal-to-noise ratio."""
    x = np.asarray(waveform, dtype=np.float64)
    rng = np.random.default_rng(seed)
    p_signal = np.mean(x ** 2)
    noise = rng.standard_normal(x.shape)
    if p_signal == 0:
        return x.copy()
    noise *= np.sqrt(p_signal / (10.0 ** (snr_db / 10.0)))
    return x + noise


def write_feature_cache(feat: FeatureMatrix, path) -> None:
    frames = np.ascontiguousarray(feat.frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<5i", CACHE_MAGIC, frames.shape[0], frames.shape[1],
                             feat.hop_ms, feat.frame_len_ms))
        fh.write(frames.tobytes())


def read_feature_cache(path, utt_id: str = "") -> FeatureMatrix:
    data = Path(path).read_bytes()
    magic, t, d, hop_ms, frame_len_ms = struct.unpack("<5i", data[:20])
    if magic != CACHE_MAGIC:
        raise ValueError(f"{path}: bad feature cache magic")
    frames = np.frombuffer(data[20:], dtype="<f4").reshape(t, d).astype(np.float64)
    return FeatureMatrix(frames, utt_id or Path(path).stem, frame_len_ms, hop_ms)


class LogMelExtractor(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping waveforms to log-Mel matrices.

    ``transform`` accepts a single 1-D waveform or a sequence of them and
    returns a list of ``(T, n_mels)`` arrays (lengths differ per input).
    """

    def __init__(self, sample_rate=16000, frame_len_ms=25, hop_ms=10, n_fft=512, n_mels=80,
                 f_min=20.0, f_max=7600.0, eps=1e-6, preemphasis=0.0, mean_norm=False):
        self.sample_rate = sample_rate
        self.frame_len_ms = frame_len_ms
        self.hop_ms = hop_ms
        self.n_fft = n_fft
        self.n_mels = n_mels
        self.f_min = f_min
        self.f_max = f_max
        self.eps = eps
        self.preemphasis = preemphasis
        self.mean_norm = mean_norm

    def _config(self) -> LogMelConfig:
        return LogMelConfig(**self.get_params())

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        from .validation import check_waveforms

        cfg = self._config()
        return [logmel(w, cfg).frames for w in check_waveforms(X)]

    def __sklearn_is_fitted__(self):
        return True
