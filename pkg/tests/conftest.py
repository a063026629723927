import numpy as np
import pytest
import torch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


TINY_YAML = """\
synth: {speakers: 4, eval_speakers: 6, train_utts: 3, heldout_utts: 1, eval_laughs: 2, eval_speech: 5, utt_s: 6.0}
pretrain: {max_steps: 4, batch_size: 4}
distill: {max_steps: 3, batch_size: 4}
projection: {perplexity: 3.0, iters: 250}
"""


def make_episode(out_dir):
    """One host/guest episode on disk: WAV, oracle-free logits, diarization, episode list."""
    import json

    from laughsv.corpus import EnergyEnvelopeLogitProvider, TemplateTimestampProvider, save_diarization, write_wav
    from laughsv.features import logmel
    from laughsv.selector import write_logit_track
    from laughsv.synthetic import laughter, random_signature, speech

    r = np.random.default_rng(5)
    host = random_signature("host", "female", r)
    guest = random_signature("guest", "male", r)
    x = np.concatenate([speech(host, 4.0, r), speech(guest, 8.0, r), laughter(guest, 2.0, r),
                        speech(guest, 7.0, r), laughter(host, 2.0, r), speech(host, 3.0, r)])
    src = out_dir / "ep1.wav"
    write_wav(src, x)
    (out_dir / "logits").mkdir()
    write_logit_track(EnergyEnvelopeLogitProvider().track_from_waveform(x, "ep1"), out_dir / "logits" / "ep1.logits")
    template = logmel(speech(host, 1.0, r)).frames.mean(axis=0)
    save_diarization([TemplateTimestampProvider({"host": template}).timestamps(str(src), x)], out_dir / "diar.jsonl")
    with open(out_dir / "episodes.jsonl", "w") as fh:
        fh.write(json.dumps({"source_path": str(src), "guest_speaker_id": "guest", "guest_gender": "male"}) + "\n")
    return src


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    from laughsv.cli import main

    d = tmp_path_factory.mktemp("tiny")
    (d / "tiny.yaml").write_text(TINY_YAML)
    assert main(["synth", "--config", str(d / "tiny.yaml"), "--out", str(d / "corpus")]) == 0
    return d


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
