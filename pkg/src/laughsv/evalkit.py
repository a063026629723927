"""Trial construction, cosine scoring, detection metrics and 2-D projection."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateTrials, InsufficientPoints, MissingEmbedding, MissingMetadata
from .network import SpeakerEmbedding

PROTOCOL_VERSION = "v1"


@dataclass(frozen=True)
class TrialPair:
    enroll_utt_id: str
    test_utt_id: str
    label: str  # "target" | "nontarget"

    @property
    def is_target(self) -> bool:
        return self.label == "target"


@dataclass(frozen=True)
class ScoreRecord:
    trial: TrialPair
    score: float

    @property
    def is_target(self) -> bool:
        return self.trial.is_target


@dataclass(frozen=True)
class DcfConfig:
    p_target: float = 0.05
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0 < self.p_target < 1:
            raise ValueError("p_target must lie in (0, 1)")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError("costs must be positive")


# -- trials --------------------------------------------------------------

def build_trials(manifest, mode: str = "open", n_pos: int = 5, n_neg: int = 5, seed: int = 0,
                 test_kind: str = "laughter", report: dict | None = None) -> list[TrialPair]:
    """Speech-enrollment trials for every ``test_kind`` segment.

    Targets are ``n_pos`` speech segments of the test speaker; nontargets are
    one speech segment from each of ``n_neg`` distinct other speakers
    (restricted to the test speaker's gender in ``hard`` mode).
    """
    if mode not in ("open", "hard"):
        raise ValueError(f"unknown trial mode {mode!r}")
    records = list(manifest.records if hasattr(manifest, "records") else manifest)
    tests = sorted((r for r in records if r.kind == test_kind), key=lambda r: r.utt_id)
    speech: dict[str, list] = {}
    gender_of = {}
    for r in sorted(records, key=lambda r: r.utt_id):
        gender_of.setdefault(r.speaker_id, r.gender)
        if r.kind == "speech":
            speech.setdefault(r.speaker_id, []).append(r)
    if mode == "hard":
        missing = sorted({r.speaker_id for r in records if r.gender == "unknown"})
        if missing:
            raise MissingMetadata(f"hard mode needs gender for speakers {missing[:5]}")

    rng = np.random.default_rng(seed)
    trials, shortfalls, skipped = [], [], []
    for t in tests:
        own = [r for r in speech.get(t.speaker_id, []) if r.utt_id != t.utt_id]
        others = [s for s in sorted(speech) if s != t.speaker_id
                  and (mode == "open" or gender_of[s] == gender_of[t.speaker_id])]
        if not others or not own:
            skipped.append(t.utt_id)
            shortfalls.append({"test": t.utt_id, "pos": len(own), "neg": len(others)})
            continue
        pos = [own[i] for i in sorted(rng.choice(len(own), size=min(n_pos, len(own)), replace=False))]
        neg_spk = [others[i] for i in sorted(rng.choice(len(others), size=min(n_neg, len(others)), replace=False))]
        neg = []
        for s in neg_spk:
            cands = [r for r in speech[s] if r.utt_id != t.utt_id]
            neg.append(cands[int(rng.integers(len(cands)))])
        if len(pos) < n_pos or len(neg) < n_neg:
            shortfalls.append({"test": t.utt_id, "pos": len(pos), "neg": len(neg)})
        trials.extend(TrialPair(r.utt_id, t.utt_id, "target") for r in pos)
        trials.extend(TrialPair(r.utt_id, t.utt_id, "nontarget") for r in neg)
    if report is not None:
        report["trial_shortfalls"] = shortfalls
        report["skipped_tests"] = skipped
    return trials


def write_trials(trials, path, mode: str = "open", seed: int | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# protocol={PROTOCOL_VERSION} mode={mode} seed={seed}\n")
        for t in trials:
            fh.write(f"{t.enroll_utt_id} {t.test_utt_id} {t.label}\n")


def read_trials(path) -> list[TrialPair]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[2] not in ("target", "nontarget"):
                raise ValueError(f"bad trial label {parts[2]!r}")
            out.append(TrialPair(parts[0], parts[1], parts[2]))
    return out


def write_scores(scores, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scores:
            t = s.trial
            fh.write(f"{t.enroll_utt_id} {t.test_utt_id} {t.label} {s.score:.8f}\n")


def read_scores(path) -> list[ScoreRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            out.append(ScoreRecord(TrialPair(parts[0], parts[1], parts[2]), float(parts[3])))
    return out


# -- scoring -------------------------------------------------------------

def cosine_score(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.clip(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)), -1.0, 1.0))


def score_trials(trials, embeddings: Mapping) -> list[ScoreRecord]:
    def vec(utt):
        try:
            e = embeddings[utt]
        except KeyError:
            raise MissingEmbedding(f"no embedding for {utt!r}") from None
        return e.vector if isinstance(e, SpeakerEmbedding) else e

    return [ScoreRecord(t, cosine_score(vec(t.enroll_utt_id), vec(t.test_utt_id))) for t in trials]


# -- metrics -------------------------------------------------------------

def _split(scores, labels=None):
    if labels is None:
        s = np.array([r.score for r in scores], dtype=np.float64)
        y = np.array([r.is_target for r in scores], dtype=bool)
    else:
        s = np.asarray(scores, dtype=np.float64)
        y = np.asarray(labels, dtype=bool)
    if not y.any() or y.all():
        raise DegenerateTrials("need at least one target and one nontarget trial")
    return s, y


def operating_points(scores, labels=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Miss and false-alarm rates at every distinct threshold.

    A trial is accepted when its score is >= the threshold. Thresholds are
    -inf (accept all), each distinct score, and +inf (reject all); returns
    ``(thresholds, p_miss, p_fa)`` with p_miss non-decreasing.
    """
    s, y = _split(scores, labels)
    uniq, inv = np.unique(s, return_inverse=True)
    n_tar = np.bincount(inv, weights=y, minlength=uniq.size)
    n_non = np.bincount(inv, weights=~y, minlength=uniq.size)
    # rates for thresholds -inf, uniq[0], ..., uniq[-1], +inf
    below_tar = np.concatenate([[0.0, 0.0], np.cumsum(n_tar)])
    below_non = np.concatenate([[0.0, 0.0], np.cumsum(n_non)])
    p_miss = below_tar / y.sum()
    p_fa = 1.0 - below_non / (~y).sum()
    thr = np.concatenate([[-np.inf], uniq, [np.inf]])
    return thr, p_miss, p_fa


def eer(scores, labels=None) -> float:
    """Equal error rate, linearly interpolated between operating points."""
    _, p_miss, p_fa = operating_points(scores, labels)
    diff = p_miss - p_fa
    k = int(np.flatnonzero(diff >= 0)[0])
    if k == 0 or diff[k] == 0:
        return float(p_miss[k])
    alpha = -diff[k - 1] / (diff[k] - diff[k - 1])
    return float(p_miss[k - 1] + alpha * (p_miss[k] - p_miss[k - 1]))


def min_dcf(scores, cfg: DcfConfig = DcfConfig(), labels=None) -> float:
    """Minimum normalized detection cost over all operating points."""
    _, p_miss, p_fa = operating_points(scores, labels)
    cost = cfg.c_miss * cfg.p_target * p_miss + cfg.c_fa * (1 - cfg.p_target) * p_fa
    return float(cost.min() / min(cfg.c_miss * cfg.p_target, cfg.c_fa * (1 - cfg.p_target)))


def evaluate_scores(scores, cfg: DcfConfig = DcfConfig()) -> dict:
    n_tar = sum(r.is_target for r in scores)
    return {"eer": eer(scores), "min_dcf": min_dcf(scores, cfg), "p_target": cfg.p_target,
            "n_target": n_tar, "n_nontarget": len(scores) - n_tar}


# -- projection ----------------------------------------------------------

def _matrix(embeddings) -> tuple[list[str], np.ndarray]:
    ids, rows = [], []
    for i, e in enumerate(embeddings):
        if isinstance(e, SpeakerEmbedding):
            ids.append(e.utt_id)
            rows.append(e.vector)
        else:
            ids.append(str(i))
            rows.append(np.asarray(e, dtype=np.float64))
    return ids, np.vstack(rows)


def pca_2d(x: np.ndarray) -> np.ndarray:
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:2]
    # fix the sign so the largest-magnitude loading is positive
    signs = np.sign(comps[np.arange(comps.shape[0]), np.abs(comps).argmax(axis=1)])
    comps = comps * signs[:, None]
    out = xc @ comps.T
    if out.shape[1] < 2:
        out = np.hstack([out, np.zeros((out.shape[0], 2 - out.shape[1]))])
    return out


def tsne_2d(x: np.ndarray, perplexity: float = 5.0, seed: int = 0, iters: int = 1000) -> np.ndarray:
    from sklearn.manifold import TSNE

    return TSNE(n_components=2, perplexity=perplexity, method="exact", random_state=seed,
                max_iter=iters, init="pca").fit_transform(x)


def project_2d(embeddings: Sequence, method: str = "pca", perplexity: float = 5.0, seed: int = 0,
               iters: int = 1000) -> list[tuple[str, float, float]]:
    ids, x = _matrix(embeddings)
    if len(ids) < 3:
        raise InsufficientPoints(f"need at least 3 embeddings, got {len(ids)}")
    if method == "pca":
        xy = pca_2d(x)
    elif method == "tsne":
        if not perplexity < (len(ids) - 1) / 3:
            raise InsufficientPoints(f"perplexity {perplexity} too large for {len(ids)} points")
        xy = tsne_2d(x, perplexity, seed, iters)
    else:
        raise ValueError(f"unknown projection method {method!r}")
    return [(u, float(a), float(b)) for u, (a, b) in zip(ids, xy)]


def write_projection_csv(rows, manifest, path) -> None:
    by_id = manifest.by_id() if manifest is not None else {}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["utt_id", "speaker_id", "kind", "x", "y"])
        for utt, x, y in rows:
            r = by_id.get(utt)
            w.writerow([utt, r.speaker_id if r else "", r.kind if r else "", f"{x:.6f}", f"{y:.6f}"])


def plot_projection(rows, manifest, path) -> None:
    """Scatter grouped by (speaker, kind): circles for speech, crosses for laughter."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_id = manifest.by_id()
    groups: dict = {}
    for utt, x, y in rows:
        r = by_id[utt]
        groups.setdefault((r.speaker_id, r.kind), []).append((x, y))
    speakers = sorted({k[0] for k in groups})
    cmap = plt.get_cmap("tab20")
    fig, ax = plt.subplots(figsize=(6, 6))
    for (spk, kind), pts in sorted(groups.items()):
        pts = np.array(pts)
        ax.scatter(pts[:, 0], pts[:, 1], color=cmap(speakers.index(spk) % 20),
                   marker="x" if kind == "laughter" else "o", s=18,
                   label=f"{'L' if kind == 'laughter' else 'S'}-{spk}")
    ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
