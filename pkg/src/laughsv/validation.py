"""Input validation helpers for the estimator wrappers."""
from __future__ import annotations

import numpy as np

from .features import FeatureMatrix


def check_waveforms(X) -> list[np.ndarray]:
    if isinstance(X, np.ndarray) and X.ndim == 1:
        X = [X]
    out = []
    for i, w in enumerate(X):
        w = np.asarray(w, dtype=np.float64)
        if w.ndim != 1:
            raise ValueError(f"waveform {i} must be 1-D, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError(f"waveform {i} contains non-finite samples")
        out.append(w)
    return out


def check_feature_list(X, n_mels: int = 80) -> list[np.ndarray]:
    """Accept one (T, n_mels) matrix, a (B, T, n_mels) array, or a sequence
    of matrices / FeatureMatrix objects; return a list of float arrays."""
    if isinstance(X, FeatureMatrix):
        X = [X]
    elif isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    out = []
    for i, f in enumerate(X):
        f = f.frames if isinstance(f, FeatureMatrix) else f
        f = np.asarray(f, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != n_mels:
            raise ValueError(f"feature matrix {i} must be (T, {n_mels}), got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError(f"feature matrix {i} contains non-finite values")
        out.append(f)
    if not out:
        raise ValueError("empty feature list")
    return out


def check_probabilities(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("probability track must be 1-D")
    if p.size and (np.any(~np.isfinite(p)) or p.min() < 0 or p.max() > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    return p
