"""Laughter-like window mining over frame-level laugh probabilities."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import SegmentTooShort
from .validation import check_probabilities


@dataclass
class FrameLogitTrack:
    probs: np.ndarray
    hop_ms: int = 10
    utt_id: str = ""

    def __post_init__(self):
        self.probs = check_probabilities(self.probs)

    def __len__(self):
        return self.probs.shape[0]


@dataclass(frozen=True)
class WindowSelection:
    utt_id: str
    start_frame: int
    end_frame: int
    mean_prob: float

    def span_s(self, hop_ms: int = 10) -> tuple[float, float]:
        return self.start_frame * hop_ms / 1000.0, self.end_frame * hop_ms / 1000.0


def window_frames(window_s: float, hop_ms: int = 10) -> int:
    return int(round(window_s * 1000.0 / hop_ms))


def window_means(probs, width: int) -> np.ndarray:
    """Mean over every length-``width`` window via prefix sums."""
    csum = np.concatenate([[0.0], np.cumsum(np.asarray(probs, dtype=np.float64))])
    return (csum[width:] - csum[:-width]) / width


def select_laughter_like(track: FrameLogitTrack, window_s: float = 2.0) -> WindowSelection:
    """Window with the highest mean laugh probability, earliest on ties."""
    w = window_frames(window_s, track.hop_ms)
    if len(track) < w or w < 1:
        raise SegmentTooShort(f"{track.utt_id!r}: {len(track)} frames < window of {w}")
    means = window_means(track.probs, w)
    best = means.max()
    # prefix sums carry rounding noise; settle near-ties with exact sums
    near = np.flatnonzero(means >= best - 1e-9)
    if near.size > 1:
        exact = [math.fsum(track.probs[k:k + w]) for k in near]
        top = max(exact)
        k = int(near[exact.index(top)])
        mean = top / w
    else:
        k = int(near[0])
        mean = float(means[k])
    return WindowSelection(track.utt_id, k, k + w, float(min(max(mean, 0.0), 1.0)))


def select_random(track_len_frames: int, window_s: float = 2.0, seed=None,
                  track: FrameLogitTrack | None = None, hop_ms: int = 10,
                  utt_id: str = "") -> WindowSelection:
    """Uniformly seeded window start; ``mean_prob`` is -1 without a track."""
    w = window_frames(window_s, hop_ms)
    if track_len_frames < w:
        raise SegmentTooShort(f"{utt_id!r}: {track_len_frames} frames < window of {w}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = int(rng.integers(0, track_len_frames - w + 1))
    mean = float(np.mean(track.probs[k:k + w])) if track is not None else -1.0
    if track is not None and not utt_id:
        utt_id = track.utt_id
    return WindowSelection(utt_id, k, k + w, mean)


def save_selections(selections, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in selections:
            fh.write(json.dumps(asdict(s)) + "\n")


def load_selections(path) -> list[WindowSelection]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(WindowSelection(d["utt_id"], int(d["start_frame"]),
                                           int(d["end_frame"]), float(d["mean_prob"])))
    return out


def read_logit_track(path, utt_id: str | None = None) -> FrameLogitTrack:
    """Read the text format: a ``hop_ms=<int>`` header then one float per line."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("hop_ms="):
            raise ValueError(f"{path}: missing hop_ms header")
        hop_ms = int(header.split("=", 1)[1])
        probs = [float(line) for line in fh if line.strip()]
    return FrameLogitTrack(np.array(probs, dtype=np.float64), hop_ms, utt_id or path.stem)


def write_logit_track(track: FrameLogitTrack, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"hop_ms={track.hop_ms}\n")
        for p in track.probs:
            fh.write(f"{float(p)!r}\n")


class LaughterLikeSelector(TransformerMixin, BaseEstimator):
    """Pick one window per logit track.

    ``mode="laughter_like"`` takes the max-mean window, ``mode="random"``
    draws a seeded uniform start. Tracks shorter than the window are
    skipped and counted in ``n_skipped_`` after ``transform``.
    """

    def __init__(self, window_s=2.0, mode="laughter_like", seed=0):
        self.window_s = window_s
        self.mode = mode
        self.seed = seed

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        if self.mode not in ("laughter_like", "random"):
            raise ValueError(f"unknown selection mode {self.mode!r}")
        rng = np.random.default_rng(self.seed)
        out, self.n_skipped_ = [], 0
        for track in X:
            if not isinstance(track, FrameLogitTrack):
                track = FrameLogitTrack(track)
            try:
                if self.mode == "laughter_like":
                    out.append(select_laughter_like(track, self.window_s))
                else:
                    out.append(select_random(len(track), self.window_s, rng, track, track.hop_ms))
            except SegmentTooShort:
                self.n_skipped_ += 1
        return out

    def __sklearn_is_fitted__(self):
        return True
