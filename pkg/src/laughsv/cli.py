"""Command-line interface.

Every subcommand reads a YAML config (``--config``), applies ``--set key=value``
overrides and subcommand flags (flags > file > defaults), writes its primary
outputs, and writes a JSON run report next to them. Exit codes: 0 success,
1 domain error, 2 usage error.
"""
from __future__ import annotations

import argparse
import copy
import datetime as _dt
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import LaughSVError

log = logging.getLogger("laughsv")

DEFAULTS = {
    "seed": 0,
    "features": {"sample_rate": 16000, "frame_len_ms": 25, "hop_ms": 10, "n_fft": 512, "n_mels": 80,
                 "f_min": 20.0, "f_max": 7600.0, "eps": 1e-6, "preemphasis": 0.0, "mean_norm": False},
    "model": {"block_widths": [8, 16, 32, 64], "blocks_per_stage": [1, 1, 1, 1], "embedding_dim": 256,
              "arcface_margin": 0.2, "arcface_scale": 32.0},
    "pretrain": {"lr_init": 0.1, "lr_final": 1e-3, "milestones": [0.6, 0.85], "momentum": 0.9,
                 "weight_decay": 1e-4, "batch_size": 16, "epochs": 1, "max_steps": 500, "crop_s": 2.0},
    "distill": {"lr_init": 1e-3, "lr_final": 1e-6, "milestones": [0.5, 0.75, 0.9], "momentum": 0.9,
                "weight_decay": 0.0, "batch_size": 16, "epochs": 1, "max_steps": 300,
                "weights": [1.0, 2.0, 2.0], "student_len_s": 2.0, "teacher_len_s": 5.0,
                "teacher_crop": "head", "freeze_bn": True, "grad_clip": None},
    "selection": {"window_s": 2.0, "mode": "laughter_like", "provider": "file"},
    "ingest": {"frame_threshold": 0.5, "min_laugh_s": 1.5, "overlap_frac": 0.5, "min_speech_s": 5.0,
               "max_speech_s": 20.0, "per_speaker": 15},
    "trials": {"mode": "open", "n_pos": 5, "n_neg": 5, "test_kind": "laughter"},
    "dcf": {"p_target": 0.05, "c_miss": 1.0, "c_fa": 1.0},
    "projection": {"method": "pca", "perplexity": 5.0, "iters": 1000, "png": False},
    "synth": {"speakers": 16, "eval_speakers": 16, "train_utts": 12, "heldout_utts": 2,
              "eval_laughs": 6, "eval_speech": 6, "utt_s": 8.0},
}


class UsageError(Exception):
    pass


# -- config --------------------------------------------------------------

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            cfg = _merge(cfg, yaml.safe_load(fh) or {})
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _set_path(cfg, k, yaml.safe_load(v))
    for dest, key in FLAG_KEYS.items():
        v = getattr(args, dest, None)
        if v is not None:
            _set_path(cfg, key, v)
    return cfg


FLAG_KEYS = {
    "seed": "seed",
    "weights": "distill.weights",
    "trial_mode": "trials.mode",
    "test_kind": "trials.test_kind",
    "method": "projection.method",
    "selection_mode": "selection.mode",
    "provider": "selection.provider",
    "pretrain_steps": "pretrain.max_steps",
    "distill_steps": "distill.max_steps",
}


def _feature_cfg(cfg):
    from .features import LogMelConfig

    return LogMelConfig(**cfg["features"])


def _model_cfg(cfg, num_speakers):
    from .network import ModelConfig

    return ModelConfig(num_speakers=num_speakers, n_mels=cfg["features"]["n_mels"], **cfg["model"])


def _train_cfg(section: dict, seed: int):
    from .distill import TrainConfig
    from .losses import LossWeights

    d = dict(section)
    if "weights" in d:
        w = d.pop("weights")
        d["weights"] = LossWeights.parse(w) if isinstance(w, str) else LossWeights(*w)
    return TrainConfig(seed=seed, **d)


# -- io helpers ----------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def write_embeddings(embs: dict, path, model_id: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# model_id={model_id}\n")
        for utt in sorted(embs):
            v = embs[utt]
            fh.write(utt + " " + " ".join(f"{x:.9g}" for x in v) + "\n")


def read_embeddings(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split()
            out[parts[0]] = np.array([float(x) for x in parts[1:]])
    return out


def _write_report(path, command, cfg, inputs: dict, outputs: dict, results: dict | None = None) -> dict:
    report = {
        "command": command,
        "seed": cfg["seed"],
        "config": cfg,
        "inputs": {k: {"path": str(p), "sha256": sha256_file(p) if Path(p).is_file() else None}
                   for k, p in inputs.items()},
        "outputs": {k: {"path": str(p), "sha256": sha256_file(p) if Path(p).is_file() else None}
                    for k, p in outputs.items()},
        "results": results or {},
        "meta": {"created": _dt.datetime.now(_dt.timezone.utc).isoformat(), "tool_version": __version__},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return report


def _report_path(args, primary) -> Path:
    return Path(args.report) if args.report else Path(str(primary) + ".report.json")


# -- subcommands ---------------------------------------------------------

def cmd_synth(args, cfg):
    from .synthetic import make_corpus

    s = cfg["synth"]
    corpus = make_corpus(n_speakers=s["speakers"], n_eval_speakers=s["eval_speakers"], n_train=s["train_utts"],
                         n_heldout=s["heldout_utts"], n_eval_laughs=s["eval_laughs"],
                         n_eval_speech=s["eval_speech"], utt_s=s["utt_s"], seed=cfg["seed"])
    paths = corpus.write(args.out)
    _write_report(_report_path(args, Path(args.out) / "synth"), "synth", cfg, {}, paths,
                  {"n_train": len(corpus.train), "n_heldout": len(corpus.heldout), "n_eval": len(corpus.eval)})


def cmd_ingest(args, cfg):
    from .corpus import FileLogitProvider, FileTimestampProvider, ingest, load_episodes, save_manifest

    episodes = load_episodes(_need(args.episodes, "episode list"))
    ig = cfg["ingest"]
    report = {}
    manifest = ingest(episodes, FileLogitProvider(_need(args.logits_dir, "logit directory")),
                      FileTimestampProvider(_need(args.diarization, "diarization file")),
                      Path(args.out) / "wav", frame_threshold=ig["frame_threshold"],
                      min_laugh_s=ig["min_laugh_s"], overlap_frac=ig["overlap_frac"],
                      min_speech_s=ig["min_speech_s"], max_speech_s=ig["max_speech_s"],
                      per_speaker=ig["per_speaker"], seed=cfg["seed"], report=report)
    out = Path(args.out) / "manifest.jsonl"
    save_manifest(manifest, out)
    report["n_laughter"] = len(manifest.filter(kind="laughter"))
    report["n_speech"] = len(manifest.filter(kind="speech"))
    _write_report(_report_path(args, out), "ingest", cfg,
                  {"episodes": args.episodes, "diarization": args.diarization}, {"manifest": out}, report)


def cmd_select(args, cfg):
    from .corpus import EnergyEnvelopeLogitProvider, FileLogitProvider, load_manifest, read_wav
    from .errors import SegmentTooShort
    from .selector import FrameLogitTrack, save_selections, select_laughter_like, select_random

    manifest = load_manifest(_need(args.manifest, "manifest"))
    sc = cfg["selection"]
    if sc["provider"] == "file":
        if not args.logits_dir:
            raise UsageError("--logits-dir is required with the file provider")
        provider = FileLogitProvider(_need(args.logits_dir, "logit directory"))
    elif sc["provider"] == "energy":
        provider = EnergyEnvelopeLogitProvider()
    else:
        raise UsageError(f"unknown provider {sc['provider']!r}")
    rng = np.random.default_rng(cfg["seed"])
    selections, skipped = [], []
    for r in manifest.records:
        track = provider.logits(r.source_path)
        a = int(round(r.start_s * 1000 / track.hop_ms))
        b = int(round(r.end_s * 1000 / track.hop_ms))
        track = FrameLogitTrack(track.probs[a:b], track.hop_ms, r.utt_id)
        try:
            if sc["mode"] == "laughter_like":
                selections.append(select_laughter_like(track, sc["window_s"]))
            elif sc["mode"] == "random":
                selections.append(select_random(len(track), sc["window_s"], rng, track, track.hop_ms, r.utt_id))
            else:
                raise UsageError(f"unknown selection mode {sc['mode']!r}")
        except SegmentTooShort:
            skipped.append(r.utt_id)
    save_selections(selections, args.out)
    _write_report(_report_path(args, args.out), "select-segments", cfg, {"manifest": args.manifest},
                  {"selections": args.out}, {"n_selected": len(selections), "n_skipped": len(skipped),
                                             "skipped": skipped})


def _training_set(manifest, cfg, speakers=None):
    from .distill import TrainingSet

    return TrainingSet.from_manifest(manifest, feature_cfg=_feature_cfg(cfg), speakers=speakers)


def cmd_pretrain(args, cfg):
    from .corpus import load_manifest
    from .distill import pretrain, write_log
    from .network import save_checkpoint

    manifest = load_manifest(_need(args.manifest, "manifest"))
    data = _training_set(manifest, cfg)
    model, history = pretrain(data, _model_cfg(cfg, len(data.speakers)), _train_cfg(cfg["pretrain"], cfg["seed"]))
    model_id = save_checkpoint(model, args.out)
    log_path = Path(str(args.out) + ".log.jsonl")
    write_log(history, log_path)
    results = {"model_id": model_id, "steps": len(history),
               "initial_loss": history[0]["loss"] if history else None,
               "final_loss": history[-1]["loss"] if history else None}
    _write_report(_report_path(args, args.out), "pretrain", cfg, {"manifest": args.manifest},
                  {"checkpoint": args.out, "log": log_path}, results)


def cmd_distill(args, cfg):
    from .corpus import load_manifest
    from .distill import run_distillation, write_log
    from .network import load_checkpoint, save_checkpoint
    from .selector import load_selections

    teacher = load_checkpoint(_need(args.checkpoint, "checkpoint"))
    manifest = load_manifest(_need(args.manifest, "manifest"))
    speakers = teacher.extra.get("speakers")
    unknown = sorted(set(manifest.speakers()) - set(speakers or []))
    if unknown:
        raise UsageError(f"manifest speakers missing from checkpoint: {unknown[:5]}")
    data = _training_set(manifest, cfg, speakers)
    selections = load_selections(_need(args.selections, "selections"))
    tcfg = _train_cfg(cfg["distill"], cfg["seed"])
    student, history = run_distillation(teacher, selections, data, tcfg)
    model_id = save_checkpoint(student, args.out)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.jsonl")
    write_log(history, log_path)
    _write_report(_report_path(args, args.out), "distill", cfg,
                  {"checkpoint": args.checkpoint, "manifest": args.manifest, "selections": args.selections},
                  {"checkpoint": args.out, "log": log_path},
                  {"model_id": model_id, "steps": len(history), "weights": list(tcfg.weights.as_tuple()),
                   "final": history[-1] if history else None})


def cmd_extract(args, cfg):
    from .corpus import load_manifest, load_segment_audio
    from .features import logmel
    from .network import embed_batch, load_checkpoint

    model = load_checkpoint(_need(args.checkpoint, "checkpoint"))
    manifest = load_manifest(_need(args.manifest, "manifest"))
    fcfg = _feature_cfg(cfg)
    embs = {r.utt_id: embed_batch(model, logmel(load_segment_audio(r), fcfg).frames)[0] for r in manifest.records}
    write_embeddings(embs, args.out, model.model_id)
    _write_report(_report_path(args, args.out), "extract", cfg,
                  {"checkpoint": args.checkpoint, "manifest": args.manifest}, {"embeddings": args.out},
                  {"n_embeddings": len(embs), "model_id": model.model_id})


def cmd_build_trials(args, cfg):
    from .corpus import load_manifest
    from .evalkit import build_trials, write_trials

    manifest = load_manifest(_need(args.manifest, "manifest"))
    tc = cfg["trials"]
    report = {}
    trials = build_trials(manifest, tc["mode"], tc["n_pos"], tc["n_neg"], cfg["seed"], tc["test_kind"], report)
    write_trials(trials, args.out, tc["mode"], cfg["seed"])
    report.update({"n_trials": len(trials), "n_target": sum(t.is_target for t in trials)})
    _write_report(_report_path(args, args.out), "build-trials", cfg, {"manifest": args.manifest},
                  {"trials": args.out}, report)


def cmd_score(args, cfg):
    from .evalkit import read_trials, score_trials, write_scores

    trials = read_trials(_need(args.trials, "trial file"))
    scores = score_trials(trials, read_embeddings(_need(args.embeddings, "embedding file")))
    write_scores(scores, args.out)
    _write_report(_report_path(args, args.out), "score", cfg,
                  {"trials": args.trials, "embeddings": args.embeddings}, {"scores": args.out},
                  {"n_scores": len(scores)})


def cmd_evaluate(args, cfg):
    from .evalkit import DcfConfig, evaluate_scores, read_scores

    scores = read_scores(_need(args.scores, "score file"))
    metrics = evaluate_scores(scores, DcfConfig(**cfg["dcf"]))
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_report(_report_path(args, args.out), "evaluate", cfg, {"scores": args.scores}, {"metrics": args.out},
                  metrics)
    print(json.dumps(metrics, sort_keys=True))


def cmd_project(args, cfg):
    from .corpus import load_manifest
    from .evalkit import plot_projection, project_2d, write_projection_csv
    from .network import SpeakerEmbedding

    embs = read_embeddings(_need(args.embeddings, "embedding file"))
    manifest = load_manifest(_need(args.manifest, "manifest")) if args.manifest else None
    pc = cfg["projection"]
    rows = project_2d([SpeakerEmbedding(v, u) for u, v in sorted(embs.items())], pc["method"],
                      pc["perplexity"], cfg["seed"], pc["iters"])
    write_projection_csv(rows, manifest, args.out)
    outputs = {"projection": args.out}
    if (args.png or pc["png"]) and manifest is not None:
        png = Path(args.png) if args.png else Path(args.out).with_suffix(".png")
        plot_projection(rows, manifest, png)
        outputs["png"] = png
    _write_report(_report_path(args, args.out), "project", cfg, {"embeddings": args.embeddings}, outputs,
                  {"n_points": len(rows), "method": pc["method"]})


# -- parser --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted path)")
    common.add_argument("--seed", type=int)
    common.add_argument("--report", help="run report path (default: <output>.report.json)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="laughsv", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", parents=[common], help="laugh detection, host purge, speech filtering, cropping")
    s.add_argument("--episodes", required=True, help="JSONL of {source_path, guest_speaker_id, guest_gender}")
    s.add_argument("--logits-dir", required=True)
    s.add_argument("--diarization", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("select-segments", parents=[common], help="mine one laughter-like window per utterance")
    s.add_argument("--manifest", required=True)
    s.add_argument("--logits-dir")
    s.add_argument("--provider", choices=["file", "energy"])
    s.add_argument("--mode", dest="selection_mode", choices=["laughter_like", "random"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("pretrain", parents=[common], help="train the speaker network with the ArcFace loss")
    s.add_argument("--manifest", required=True)
    s.add_argument("--steps", dest="pretrain_steps", type=int)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("distill", parents=[common], help="teacher-student fine-tuning")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--selections", required=True)
    s.add_argument("--weights", help="cla,emb,kld (default 1,2,2)")
    s.add_argument("--steps", dest="distill_steps", type=int)
    s.add_argument("--log", help="metrics JSONL path")
    s.add_argument("--out", required=True, help="student checkpoint path")
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("extract", parents=[common], help="embed every record of a manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("build-trials", parents=[common], help="speech-enroll trial list")
    s.add_argument("--manifest", required=True)
    s.add_argument("--mode", dest="trial_mode", choices=["open", "hard"])
    s.add_argument("--test-kind", choices=["laughter", "speech"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_trials)

    s = sub.add_parser("score", parents=[common], help="cosine-score a trial list")
    s.add_argument("--trials", required=True)
    s.add_argument("--embeddings", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("evaluate", parents=[common], help="EER and minDCF of a score file")
    s.add_argument("--scores", required=True)
    s.add_argument("--out", required=True, help="metrics JSON path")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("project", parents=[common], help="2-D projection of embeddings")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--manifest")
    s.add_argument("--method", choices=["pca", "tsne"])
    s.add_argument("--png", help="also render a scatter plot")
    s.add_argument("--out", required=True, help="CSV path")
    s.set_defaults(func=cmd_project)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        args.func(args, cfg)
    except UsageError as exc:
        print(f"laughsv {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except LaughSVError as exc:
        print(f"laughsv {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (yaml.YAMLError, TypeError, ValueError) as exc:
        print(f"laughsv {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"laughsv {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    return 0


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
