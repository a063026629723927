import json

import pytest

from laughsv.cli import DEFAULTS, build_parser, main, read_embeddings, resolve_config, write_embeddings
from laughsv.corpus import Manifest, SegmentRecord, load_manifest, save_manifest

from conftest import make_episode


def _cfg(argv):
    return resolve_config(build_parser().parse_args(argv))


def test_defaults_when_nothing_given():
    cfg = _cfg(["evaluate", "--scores", "s", "--out", "o"])
    assert cfg["distill"]["weights"] == [1.0, 2.0, 2.0]
    assert cfg["distill"]["lr_init"] == 1e-3 and cfg["distill"]["lr_final"] == 1e-6
    assert cfg == DEFAULTS


def test_precedence_flags_over_file_over_defaults(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("seed: 7\ndistill: {weights: [1, 0, 2], batch_size: 8}\ntrials: {mode: hard}\n")
    cfg = _cfg(["distill", "--config", str(f), "--checkpoint", "c", "--manifest", "m", "--selections", "s",
                "--out", "o", "--weights", "1,2,0", "--set", "distill.batch_size=4"])
    assert cfg["seed"] == 7                       # file
    assert cfg["distill"]["weights"] == "1,2,0"   # flag beats file
    assert cfg["distill"]["batch_size"] == 4      # --set beats file
    assert cfg["trials"]["mode"] == "hard"
    assert cfg["distill"]["lr_init"] == 1e-3      # default survives a partial section
    cfg = _cfg(["build-trials", "--config", str(f), "--manifest", "m", "--out", "o", "--mode", "open", "--seed", "3"])
    assert cfg["trials"]["mode"] == "open" and cfg["seed"] == 3


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main([]) == 2
    assert main(["no-such-command"]) == 2
    assert main(["evaluate", "--scores", str(tmp_path / "missing.txt"), "--out", str(tmp_path / "m.json")]) == 2
    assert "not found" in capsys.readouterr().err
    assert main(["evaluate", "--scores", "x", "--out", "y", "--set", "novalue"]) == 2


def test_domain_error_exits_1(tmp_path, capsys):
    import numpy as np

    from laughsv.corpus import write_wav

    write_wav(tmp_path / "x.wav", np.random.default_rng(0).standard_normal(16000 * 9) * 0.1)
    wav = str(tmp_path / "x.wav")
    m = Manifest([SegmentRecord(f"u{i}", "only", "male", "speech", "guest", wav, 0.0, 8.0) for i in range(3)])
    save_manifest(m, tmp_path / "one.jsonl")
    assert main(["pretrain", "--manifest", str(tmp_path / "one.jsonl"), "--out", str(tmp_path / "p.ckpt")]) == 1
    assert "InsufficientSpeakers" in capsys.readouterr().err


def test_missing_audio_is_usage_error(tmp_path):
    m = Manifest([SegmentRecord(f"u{i}", f"s{i}", "male", "speech", "guest", str(tmp_path / "gone.wav"), 0.0, 8.0)
                  for i in range(2)])
    save_manifest(m, tmp_path / "m.jsonl")
    assert main(["pretrain", "--manifest", str(tmp_path / "m.jsonl"), "--out", str(tmp_path / "p.ckpt")]) == 2


def test_embeddings_roundtrip(tmp_path):
    import numpy as np

    e = {"b": np.array([1.0, -2.5e-7, 3.0]), "a": np.array([0.125, 0.0, 1e10])}
    write_embeddings(e, tmp_path / "e.txt", "abc")
    back = read_embeddings(tmp_path / "e.txt")
    assert list(back) == ["a", "b"]
    for k in e:
        np.testing.assert_allclose(back[k], e[k], rtol=1e-8)


def test_ingest_command(tmp_path):
    make_episode(tmp_path)
    out = tmp_path / "out"
    rc = main(["ingest", "--episodes", str(tmp_path / "episodes.jsonl"), "--logits-dir", str(tmp_path / "logits"),
               "--diarization", str(tmp_path / "diar.jsonl"), "--out", str(out)])
    assert rc == 0
    m = load_manifest(out / "manifest.jsonl")
    assert len(m.filter(kind="laughter")) == 1
    rep = json.loads((out / "manifest.jsonl.report.json").read_text())
    assert rep["results"]["laughs_purged"][str(tmp_path / "ep1.wav")] == 1
    assert rep["inputs"]["episodes"]["sha256"]


def test_pipeline_reports(tiny_corpus, tmp_path):
    d, cfg = tiny_corpus, str(tiny_corpus / "tiny.yaml")
    c = d / "corpus"
    run = lambda *a: main(list(a) + ["--config", cfg])
    assert run("select-segments", "--manifest", str(c / "train.jsonl"), "--logits-dir", str(c / "logits"),
               "--out", str(tmp_path / "sel.jsonl")) == 0
    assert run("pretrain", "--manifest", str(c / "train.jsonl"), "--out", str(tmp_path / "pre.ckpt")) == 0
    assert run("distill", "--checkpoint", str(tmp_path / "pre.ckpt"), "--manifest", str(c / "train.jsonl"),
               "--selections", str(tmp_path / "sel.jsonl"), "--weights", "1,0,2",
               "--out", str(tmp_path / "st.ckpt")) == 0
    rep = json.loads((tmp_path / "st.ckpt.report.json").read_text())
    assert rep["results"]["weights"] == [1.0, 0.0, 2.0]
    assert rep["seed"] == 0 and "created" in rep["meta"]
    assert set(rep["inputs"]) == {"checkpoint", "manifest", "selections"}
    log = [json.loads(l) for l in (tmp_path / "st.ckpt.log.jsonl").read_text().splitlines()]
    assert len(log) == 3 and set(log[0]) == {"step", "lr", "total", "l_cla", "l_emb", "l_kld"}
    # a manifest whose speakers the checkpoint never saw is a usage error
    assert run("distill", "--checkpoint", str(tmp_path / "pre.ckpt"), "--manifest", str(c / "eval.jsonl"),
               "--selections", str(tmp_path / "sel.jsonl"), "--out", str(tmp_path / "bad.ckpt")) == 2


def test_project_rejects_too_few_points(tmp_path):
    import numpy as np

    write_embeddings({"a": np.ones(3), "b": np.arange(3.0)}, tmp_path / "e.txt")
    assert main(["project", "--embeddings", str(tmp_path / "e.txt"), "--out", str(tmp_path / "p.csv")]) == 1
