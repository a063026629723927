"""Synthetic speakers for desk-scale experiments.

Each speaker is a harmonic source (fundamental ``f0``) shaped by a
three-resonance spectral envelope. "Speech" is the steady source plus
noise; "laughter" is the same envelope excited at a raised pitch and gated
into rhythmic bursts with a breathy noise component.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Manifest, SegmentRecord, write_wav
from .selector import FrameLogitTrack, write_logit_track

SR = 16000


@dataclass(frozen=True)
class SpeakerSignature:
    speaker_id: str
    gender: str
    f0: float
    formants: tuple
    bandwidths: tuple
    tilt: float

    def envelope(self, freqs) -> np.ndarray:
        f = np.asarray(freqs, dtype=np.float64)
        amp = np.zeros_like(f)
        for fc, bw in zip(self.formants, self.bandwidths):
            amp += 1.0 / (1.0 + ((f - fc) / bw) ** 2)
        return (amp + 0.02) * np.exp(-self.tilt * f / 1000.0)


def random_signature(speaker_id: str, gender: str, rng: np.random.Generator) -> SpeakerSignature:
    lo, hi = (90.0, 150.0) if gender == "male" else (170.0, 260.0)
    scale = 1.0 if gender == "male" else 1.15
    formants = (rng.uniform(450, 850) * scale, rng.uniform(1000, 2200) * scale, rng.uniform(2300, 3400) * scale)
    bandwidths = tuple(rng.uniform(60, 160, size=3))
    return SpeakerSignature(speaker_id, gender, float(rng.uniform(lo, hi)),
                            tuple(float(f) for f in formants), tuple(float(b) for b in bandwidths),
                            float(rng.uniform(0.1, 0.4)))


def _harmonic(sig: SpeakerSignature, n: int, f0_scale: float, rng: np.random.Generator,
              jitter: float = 0.01) -> np.ndarray:
    t = np.arange(n) / SR
    rate = rng.uniform(3.0, 6.0)
    f0 = sig.f0 * f0_scale * (1.0 + jitter * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / SR
    n_harm = int(7600 // (sig.f0 * f0_scale * (1 + jitter)))
    amps = sig.envelope(np.arange(1, n_harm + 1) * sig.f0 * f0_scale)
    offsets = rng.uniform(0, 2 * np.pi, size=n_harm)
    # k-th harmonic as Im(c_k z^k), z = exp(i*phase); powers by repeated multiplication
    z = np.exp(1j * phase)
    zk = z.copy()
    coef = amps * np.exp(1j * offsets)
    out = np.zeros(n)
    for k in range(n_harm):
        out += (coef[k] * zk).imag
        zk *= z
    return out


def _normalize(x: np.ndarray, rms: float = 0.1) -> np.ndarray:
    return x * (rms / (np.sqrt(np.mean(x ** 2)) + 1e-12))


def speech(sig: SpeakerSignature, dur_s: float, rng: np.random.Generator, snr_db: float = 20.0) -> np.ndarray:
    n = int(round(dur_s * SR))
    x = _normalize(_harmonic(sig, n, 1.0, rng))
    noise = rng.standard_normal(n) * 0.1 * 10 ** (-snr_db / 20)
    return x + noise


def laughter(sig: SpeakerSignature, dur_s: float, rng: np.random.Generator, pitch: float = 1.5,
             rate_hz: float | None = None, breath: float = 0.3) -> np.ndarray:
    """Amplitude-modulated "ha" bursts at a raised pitch."""
    n = int(round(dur_s * SR))
    t = np.arange(n) / SR
    rate = rate_hz or rng.uniform(4.0, 5.5)
    gate = np.clip(np.sin(2 * np.pi * rate * t), 0, None) ** 2
    voiced = _normalize(_harmonic(sig, n, pitch * rng.uniform(0.95, 1.05), rng, jitter=0.04))
    spec = np.fft.rfft(rng.standard_normal(n))
    spec *= sig.envelope(np.fft.rfftfreq(n, 1 / SR))
    breathy = _normalize(np.fft.irfft(spec, n))
    x = _normalize(gate * ((1 - breath) * voiced + breath * breathy), 0.12)
    return x + rng.standard_normal(n) * 1e-3


@dataclass
class SyntheticCorpus:
    signatures: list
    waveforms: dict = field(default_factory=dict)        # source_path -> samples
    train: Manifest = None                                # speech utterances with a hidden burst
    heldout: Manifest = None                              # same kind and speakers, unseen by training
    eval: Manifest = None                                 # laughter + speech records for trials
    bursts: dict = field(default_factory=dict)            # source_path -> (start_s, end_s)

    def burst_track(self, source_path: str, hop_ms: int = 10, n_frames: int | None = None) -> FrameLogitTrack:
        """Oracle logit track: high inside the burst, low elsewhere."""
        n = len(self.waveforms[source_path])
        if n_frames is None:
            n_frames = 1 + (n - 400) // 160
        probs = np.full(n_frames, 0.05)
        if source_path in self.bursts:
            s, e = self.bursts[source_path]
            probs[int(round(s * 1000 / hop_ms)):int(round(e * 1000 / hop_ms))] = 0.95
        return FrameLogitTrack(probs, hop_ms, Path(source_path).stem)

    def audio(self, record: SegmentRecord) -> np.ndarray:
        x = self.waveforms[record.source_path]
        return x[int(round(record.start_s * SR)):int(round(record.end_s * SR))]

    def write(self, out_dir) -> dict:
        """Dump WAVs, manifests and oracle logit tracks under ``out_dir``."""
        from .corpus import save_manifest

        out_dir = Path(out_dir)
        (out_dir / "wav").mkdir(parents=True, exist_ok=True)
        (out_dir / "logits").mkdir(exist_ok=True)
        rename = {p: str(out_dir / "wav" / Path(p).name) for p in self.waveforms}
        for p, x in self.waveforms.items():
            write_wav(rename[p], x)
            if p in self.bursts:
                write_logit_track(self.burst_track(p), out_dir / "logits" / f"{Path(p).stem}.logits")
        paths = {}
        for name in ("train", "heldout", "eval"):
            m = getattr(self, name)
            recs = [SegmentRecord(**{**r.to_dict(), "source_path": rename[r.source_path]}) for r in m.records]
            paths[name] = out_dir / f"{name}.jsonl"
            save_manifest(Manifest(recs, m.metadata), paths[name])
        return paths


def make_corpus(n_speakers: int = 16, n_eval_speakers: int = 16, n_train: int = 12, n_heldout: int = 2,
                n_eval_laughs: int = 6, n_eval_speech: int = 6, utt_s: float = 8.0, burst_s: float = 2.0,
                seed: int = 0) -> SyntheticCorpus:
    """Build the in-memory synthetic corpus.

    ``n_speakers`` training speakers and a disjoint set of ``n_eval_speakers``
    evaluation speakers, half of each male. Train and held-out utterances are
    ``utt_s`` of speech with one ``burst_s`` laugh burst at a random offset;
    held-out utterances belong to the training speakers but are kept out of
    ``train``. Eval laughter records point at the burst inside such an
    utterance; eval speech records are plain ``utt_s`` speech.
    """
    rng = np.random.default_rng(seed)

    def group(prefix, n):
        return [random_signature(f"{prefix}{i:02d}", "male" if i < n // 2 else "female", rng) for i in range(n)]

    train_sigs, eval_sigs = group("spk", n_speakers), group("evs", n_eval_speakers)
    corpus = SyntheticCorpus(train_sigs + eval_sigs)

    def with_burst(sig, name):
        x = speech(sig, utt_s, rng)
        start = float(np.round(rng.uniform(0.3, utt_s - burst_s - 0.3), 2))
        a = int(round(start * SR))
        x[a:a + int(round(burst_s * SR))] = laughter(sig, burst_s, rng)
        path = f"{name}.wav"
        corpus.waveforms[path] = x
        corpus.bursts[path] = (start, start + burst_s)
        return path

    def utterance(sig, name):
        p = with_burst(sig, name)
        return SegmentRecord(Path(p).stem, sig.speaker_id, sig.gender, "speech", "guest", p, 0.0, utt_s)

    train, held, ev = [], [], []
    for sig in train_sigs:
        train += [utterance(sig, f"{sig.speaker_id}-train{k:02d}") for k in range(n_train)]
        held += [utterance(sig, f"{sig.speaker_id}-held{k:02d}") for k in range(n_heldout)]
    for sig in eval_sigs:
        for k in range(n_eval_laughs):
            p = with_burst(sig, f"{sig.speaker_id}-evlaugh{k:02d}")
            s, e = corpus.bursts[p]
            ev.append(SegmentRecord(f"{Path(p).stem}-laugh", sig.speaker_id, sig.gender, "laughter", "guest", p, s, e))
        for k in range(n_eval_speech):
            p = f"{sig.speaker_id}-evspeech{k:02d}.wav"
            corpus.waveforms[p] = speech(sig, utt_s, rng)
            ev.append(SegmentRecord(Path(p).stem, sig.speaker_id, sig.gender, "speech", "guest", p, 0.0, utt_s))
    meta = {"seed": seed, "synthetic": True}
    corpus.train, corpus.heldout, corpus.eval = Manifest(train, meta), Manifest(held, meta), Manifest(ev, meta)
    return corpus


def trial_manifest(n_male: int = 12, n_female: int = 8, n_laughs: int = 3, n_speech: int = 15) -> Manifest:
    """Audio-free manifest with fixed laugh/speech counts per speaker."""
    recs = []
    for i in range(n_male + n_female):
        spk, g = f"spk{i:02d}", "male" if i < n_male else "female"
        recs += [SegmentRecord(f"{spk}-laugh{k}", spk, g, "laughter", "guest", f"{spk}.wav", 10.0 * k, 10.0 * k + 2.0)
                 for k in range(n_laughs)]
        recs += [SegmentRecord(f"{spk}-speech{k:02d}", spk, g, "speech", "guest", f"{spk}.wav", 100.0 + 20 * k, 110.0 + 20 * k)
                 for k in range(n_speech)]
    return Manifest(recs)
