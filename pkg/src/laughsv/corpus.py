"""Segment records, manifests, and the laughter/guest-speech ingestion pipeline.

The laugh detector and the host/guest diarizer are pluggable: anything
with ``logits(path, waveform)`` / ``timestamps(path, waveform)`` methods
works. File-backed and synthetic implementations live here.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np
from scipy.io import wavfile

from . import __version__
from .errors import ManifestError
from .selector import FrameLogitTrack, read_logit_track

log = logging.getLogger(__name__)

GENDERS = ("male", "female", "unknown")
KINDS = ("speech", "laughter")
ROLES = ("host", "guest", "unknown")
MIN_LAUGH_LEN_S = 1.5


@dataclass(frozen=True)
class SegmentRecord:
    utt_id: str
    speaker_id: str
    gender: str = "unknown"
    kind: str = "speech"
    role: str = "unknown"
    source_path: str = ""
    start_s: float = 0.0
    end_s: float = 0.0
    sample_rate: int = 16000

    def __post_init__(self):
        if self.gender not in GENDERS:
            raise ManifestError(f"{self.utt_id}: gender {self.gender!r} not in {GENDERS}")
        if self.kind not in KINDS:
            raise ManifestError(f"{self.utt_id}: kind {self.kind!r} not in {KINDS}")
        if self.role not in ROLES:
            raise ManifestError(f"{self.utt_id}: role {self.role!r} not in {ROLES}")
        if not self.end_s > self.start_s:
            raise ManifestError(f"{self.utt_id}: end_s must exceed start_s")

    @property
    def duration(self) -> float:
        return self.end_s - self.start_s

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SegmentRecord":
        return cls(**{f.name: d[f.name] for f in dataclasses.fields(cls) if f.name in d})


@dataclass
class Manifest:
    records: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.records = list(self.records)
        self.metadata = {"tool_version": __version__, **self.metadata}
        self.validate()

    def validate(self, min_laugh_len: float | None = None) -> None:
        if min_laugh_len is None:
            min_laugh_len = self.metadata.get("min_laugh_len", MIN_LAUGH_LEN_S)
        seen = set()
        for r in self.records:
            if r.utt_id in seen:
                raise ManifestError(f"duplicate utt_id {r.utt_id!r}")
            seen.add(r.utt_id)
            if r.kind == "laughter" and r.duration < min_laugh_len - 1e-9:
                raise ManifestError(f"{r.utt_id}: laughter shorter than {min_laugh_len} s")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_id(self) -> dict:
        return {r.utt_id: r for r in self.records}

    def filter(self, **attrs) -> list:
        return [r for r in self.records if all(getattr(r, k) == v for k, v in attrs.items())]

    def speakers(self) -> list[str]:
        return sorted({r.speaker_id for r in self.records})


def save_manifest(manifest: Manifest, path) -> None:
    """JSON Lines: a ``{"#manifest": metadata}`` header, then one record per line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"#manifest": manifest.metadata}, sort_keys=True) + "\n")
        for r in manifest.records:
            fh.write(json.dumps(r.to_dict()) + "\n")


def load_manifest(path) -> Manifest:
    records, metadata = [], {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            d = json.loads(line)
            if "#manifest" in d:
                metadata = d["#manifest"]
                continue
            try:
                records.append(SegmentRecord.from_dict(d))
            except TypeError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
    return Manifest(records, metadata)


# -- diarization ---------------------------------------------------------

@dataclass
class DiarizationTrack:
    source_path: str
    intervals: list = field(default_factory=list)

    def __post_init__(self):
        self.intervals = [(float(s), float(e), str(r)) for s, e, r in self.intervals]
        for s, e, r in self.intervals:
            if not e > s:
                raise ManifestError(f"{self.source_path}: interval [{s}, {e}) is empty")
            if r not in ("host", "guest"):
                raise ManifestError(f"{self.source_path}: role {r!r} must be host or guest")

    def merged(self, role: str) -> list[tuple[float, float]]:
        spans = sorted((s, e) for s, e, r in self.intervals if r == role)
        out: list[list[float]] = []
        for s, e in spans:
            if out and s <= out[-1][1]:
                out[-1][1] = max(out[-1][1], e)
            else:
                out.append([s, e])
        return [(s, e) for s, e in out]


def save_diarization(tracks: Iterable[DiarizationTrack], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tracks:
            fh.write(json.dumps({"source_path": t.source_path,
                                 "intervals": [list(i) for i in t.intervals]}) + "\n")


def load_diarization(path) -> dict[str, DiarizationTrack]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out[d["source_path"]] = DiarizationTrack(d["source_path"], d["intervals"])
    return out


# -- pipeline operations -------------------------------------------------

def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return list(zip(edges[::2].tolist(), edges[1::2].tolist()))


def detect_laughs(track: FrameLogitTrack, frame_threshold: float = 0.5, min_len_s: float = MIN_LAUGH_LEN_S,
                  source_path: str = "", speaker_id: str = "", gender: str = "unknown",
                  sample_rate: int = 16000) -> list[SegmentRecord]:
    """Maximal runs of frames with probability >= threshold lasting at least ``min_len_s``."""
    if min_len_s <= 0:
        raise ValueError("min_len_s must be positive")
    if len(track) == 0:
        return []
    hop = track.hop_ms / 1000.0
    stem = Path(source_path).stem if source_path else (track.utt_id or "utt")
    out = []
    for a, b in _runs(track.probs >= frame_threshold):
        if (b - a) * track.hop_ms < min_len_s * 1000.0 - 1e-9:
            continue
        start_ms = a * track.hop_ms
        out.append(SegmentRecord(
            utt_id=f"{stem}-laugh-{start_ms:08d}", speaker_id=speaker_id, gender=gender,
            kind="laughter", role="unknown", source_path=source_path,
            start_s=a * hop, end_s=b * hop, sample_rate=sample_rate))
    return out


def host_overlap(start: float, end: float, host_spans) -> float:
    return sum(max(0.0, min(end, e) - max(start, s)) for s, e in host_spans)


def purge_host_laughs(laughs, diar: DiarizationTrack | None, overlap_frac: float = 0.5) -> list[SegmentRecord]:
    """Drop laughs whose host overlap exceeds ``overlap_frac`` of their duration.

    Survivors are marked ``role="guest"``.
    """
    host = diar.merged("host") if diar is not None else []
    out = []
    for r in laughs:
        if host_overlap(r.start_s, r.end_s, host) > overlap_frac * r.duration:
            continue
        out.append(dataclasses.replace(r, role="guest"))
    return out


def filter_guest_speech(guest_segments, min_s: float = 5.0, max_s: float = 20.0, per_speaker: int = 15,
                        seed: int = 0, report: dict | None = None) -> list[SegmentRecord]:
    """Keep segments within ``[min_s, max_s]`` and sample ``per_speaker`` per speaker.

    Speakers short of ``per_speaker`` eligible segments keep all of them and
    are listed under ``report["speech_shortfall"]``.
    """
    eligible: dict[str, list[SegmentRecord]] = {}
    for r in guest_segments:
        if min_s <= r.duration <= max_s:
            eligible.setdefault(r.speaker_id, []).append(r)
    rng = np.random.default_rng(seed)
    keep, shortfall = set(), {}
    for spk in sorted(eligible):
        segs = sorted(eligible[spk], key=lambda r: r.utt_id)
        if len(segs) <= per_speaker:
            if len(segs) < per_speaker:
                shortfall[spk] = len(segs)
            keep.update(r.utt_id for r in segs)
        else:
            idx = rng.choice(len(segs), size=per_speaker, replace=False)
            keep.update(segs[i].utt_id for i in idx)
    if report is not None:
        report.setdefault("speech_shortfall", {}).update(shortfall)
    return [r for r in guest_segments if r.utt_id in keep]


def read_wav(path) -> tuple[int, np.ndarray]:
    """Mono float waveform in [-1, 1) plus sample rate."""
    sr, data = wavfile.read(path)
    if data.ndim > 1:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        return sr, data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        return sr, data.astype(np.float64) / 2147483648.0
    return sr, data.astype(np.float64)


def write_wav(path, waveform, sample_rate: int = 16000) -> None:
    x = np.asarray(waveform)
    if x.dtype != np.int16:
        x = np.clip(np.round(np.asarray(x, dtype=np.float64) * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, sample_rate, x)


def crop_and_export(manifest: Manifest, out_dir, report: dict | None = None) -> Manifest:
    """Write one 16-bit PCM WAV per record and re-point the records at them."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    errors, records, cache = [], [], {}
    for r in manifest.records:
        try:
            if r.source_path not in cache:
                sr, data = wavfile.read(r.source_path)
                if data.ndim != 1:
                    raise ValueError("source audio is not mono")
                cache = {r.source_path: (sr, data)}
            sr, data = cache[r.source_path]
            a, b = int(round(r.start_s * sr)), int(round(r.end_s * sr))
            if a < 0 or b > data.shape[0]:
                raise ValueError(f"span [{r.start_s}, {r.end_s}) exceeds {data.shape[0] / sr:.3f} s source")
            dest = out_dir / f"{r.utt_id}.wav"
            write_wav(dest, data[a:b], sr)
        except (OSError, ValueError) as exc:
            errors.append({"utt_id": r.utt_id, "error": str(exc)})
            log.warning("dropping %s: %s", r.utt_id, exc)
            continue
        records.append(dataclasses.replace(r, source_path=str(dest), start_s=0.0,
                                           end_s=(b - a) / sr, sample_rate=sr))
    if report is not None:
        report.setdefault("crop_errors", []).extend(errors)
    return Manifest(records, dict(manifest.metadata))


def load_segment_audio(record: SegmentRecord) -> np.ndarray:
    sr, data = read_wav(record.source_path)
    a, b = int(round(record.start_s * sr)), int(round(record.end_s * sr))
    return data[a:b]


# -- providers -----------------------------------------------------------

class FrameLogitProvider(Protocol):
    def logits(self, source_path: str, waveform: np.ndarray | None = None) -> FrameLogitTrack: ...


class TimestampProvider(Protocol):
    def timestamps(self, source_path: str, waveform: np.ndarray | None = None) -> DiarizationTrack: ...


class FileLogitProvider:
    """Reads ``<directory>/<source stem>.logits`` tracks."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def logits(self, source_path, waveform=None):
        return read_logit_track(self.directory / f"{Path(source_path).stem}.logits", Path(source_path).stem)


class FileTimestampProvider:
    """Serves tracks from a diarization JSONL file keyed by source path."""

    def __init__(self, path):
        self.tracks = load_diarization(path)

    def timestamps(self, source_path, waveform=None):
        track = self.tracks.get(str(source_path))
        if track is None:
            track = self.tracks.get(Path(source_path).name, DiarizationTrack(str(source_path), []))
        return track


def _frame_energy(waveform, frame_len=400, hop=160):
    from numpy.lib.stride_tricks import sliding_window_view

    x = np.asarray(waveform, dtype=np.float64)
    if x.shape[0] < frame_len:
        return np.zeros(0)
    return (sliding_window_view(x, frame_len)[::hop] ** 2).mean(axis=1)


class EnergyEnvelopeLogitProvider:
    """Synthetic laugh detector scoring rhythmic energy modulation.

    Laughter is a train of short bursts, so within a ``context_s`` window the
    frame log-energy of a laugh swings far more than in steady voicing. The
    local standard deviation of log-energy is squashed through a logistic
    centred at ``center_db``.
    """

    def __init__(self, context_s=0.4, center_db=6.0, slope=1.0, hop_ms=10):
        self.context_s = context_s
        self.center_db = center_db
        self.slope = slope
        self.hop_ms = hop_ms

    def track_from_waveform(self, waveform, utt_id=""):
        e = 10.0 * np.log10(_frame_energy(waveform) + 1e-10)
        if e.size == 0:
            return FrameLogitTrack(np.zeros(0), self.hop_ms, utt_id)
        k = max(1, int(round(self.context_s * 1000 / self.hop_ms)))
        pad = np.pad(e, (k // 2, k - 1 - k // 2), mode="edge")
        from numpy.lib.stride_tricks import sliding_window_view

        spread = sliding_window_view(pad, k).std(axis=1)
        probs = 1.0 / (1.0 + np.exp(-self.slope * (spread - self.center_db)))
        return FrameLogitTrack(probs, self.hop_ms, utt_id)

    def logits(self, source_path, waveform=None):
        if waveform is None:
            _, waveform = read_wav(source_path)
        return self.track_from_waveform(waveform, Path(source_path).stem)


class TemplateTimestampProvider:
    """Synthetic diarizer: active blocks whose mean log-Mel profile correlates
    with the host template above ``threshold`` are attributed to the host.
    Profiles are centred across Mel bins first, so the comparison sees
    spectral shape rather than overall level.

    The template plays the role of a host enrollment embedding computed from
    a few labelled host snippets.
    """

    def __init__(self, host_templates: dict, threshold=0.6, block_s=0.5, energy_floor_db=-50.0):
        self.host_templates = {k: np.asarray(v, dtype=np.float64) for k, v in host_templates.items()}
        self.threshold = threshold
        self.block_s = block_s
        self.energy_floor_db = energy_floor_db

    def timestamps(self, source_path, waveform=None, host_key=None):
        from .features import logmel

        if waveform is None:
            _, waveform = read_wav(source_path)
        template = self.host_templates[host_key if host_key is not None else next(iter(self.host_templates))]
        template = template - template.mean()
        feats = logmel(waveform).frames
        energy = 10.0 * np.log10(_frame_energy(waveform) + 1e-10)
        block = max(1, int(round(self.block_s * 100)))
        intervals = []
        for a in range(0, feats.shape[0], block):
            b = min(a + block, feats.shape[0])
            if energy[a:b].mean() < self.energy_floor_db:
                continue
            prof = feats[a:b].mean(axis=0)
            prof = prof - prof.mean()
            cos = prof @ template / (np.linalg.norm(prof) * np.linalg.norm(template))
            role = "host" if cos > self.threshold else "guest"
            if intervals and intervals[-1][2] == role and abs(intervals[-1][1] - a / 100) < 1e-9:
                intervals[-1] = (intervals[-1][0], b / 100, role)
            else:
                intervals.append((a / 100, b / 100, role))
        return DiarizationTrack(str(source_path), intervals)


# -- end-to-end ingestion ------------------------------------------------

@dataclass(frozen=True)
class SourceEpisode:
    """One interview recording; one guest per episode is assumed."""

    source_path: str
    guest_speaker_id: str
    guest_gender: str = "unknown"
    host_id: str = ""


def ingest(episodes, logit_provider, timestamp_provider, out_dir, *, frame_threshold=0.5,
           min_laugh_s=MIN_LAUGH_LEN_S, overlap_frac=0.5, min_speech_s=5.0, max_speech_s=20.0,
           per_speaker=15, seed=0, report: dict | None = None) -> Manifest:
    """Laugh detection, host purge, guest speech filtering and cropping."""
    report = {} if report is None else report
    laughs, speech = [], []
    for ep in episodes:
        track = logit_provider.logits(ep.source_path)
        diar = timestamp_provider.timestamps(ep.source_path)
        found = detect_laughs(track, frame_threshold, min_laugh_s, ep.source_path,
                              ep.guest_speaker_id, ep.guest_gender)
        kept = purge_host_laughs(found, diar, overlap_frac)
        report.setdefault("laughs_detected", {})[ep.source_path] = len(found)
        report.setdefault("laughs_purged", {})[ep.source_path] = len(found) - len(kept)
        laughs.extend(kept)
        stem = Path(ep.source_path).stem
        for s, e in diar.merged("guest"):
            speech.append(SegmentRecord(f"{stem}-speech-{int(round(s * 1000)):08d}", ep.guest_speaker_id,
                                        ep.guest_gender, "speech", "guest", ep.source_path, s, e))
    speech = filter_guest_speech(speech, min_speech_s, max_speech_s, per_speaker, seed, report)
    meta = {"seed": seed, "min_laugh_len": min_laugh_s, "assumption": "one guest per episode"}
    return crop_and_export(Manifest(laughs + speech, meta), out_dir, report)


def load_episodes(path) -> list[SourceEpisode]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(SourceEpisode(**d))
    return out
