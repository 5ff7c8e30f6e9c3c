"""Command-line entry point.

Every command prints one JSON document on stdout; logs go to stderr.
Exit codes: 0 success, 1 usage, 2 input I/O, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import corpus, dsp, training
from .archive import atomic_write_text, dumps_json, load_archive, save_archive
from .errors import ConfigError, InputError, ParameterError, ParseError, SpeechInsertError
from .model import ModelConfig

log = logging.getLogger("speechinsert")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2, 3
CHECKPOINT_ENV = "SPEECHINSERT_CHECKPOINT_DIR"


class UsageError(Exception):
    pass


class InputIOError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- config --------------------------------------------------------------------

def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputIOError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise UsageError(f"config {path} must be a JSON object")
    return obj


def _setting(args, cfg: dict, name: str, default=None, required=False):
    """Flag value, else config-file value, else default."""
    value = getattr(args, name, None)
    if value is None:
        value = cfg.get(name, default)
    if value is None and required:
        raise UsageError(f"--{name.replace('_', '-')} is required (flag or config file)")
    return value


def _existing(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise InputIOError(f"{what} {path} does not exist")
    return path


def _checkpoint_path(args, cfg: dict) -> Path:
    path = _setting(args, cfg, "checkpoint") or os.environ.get(CHECKPOINT_ENV)
    if not path:
        raise UsageError(f"--checkpoint is required (or set {CHECKPOINT_ENV})")
    path = Path(path)
    if not (path / "manifest.json").exists() and (path / "best" / "manifest.json").exists():
        path = path / "best"
    return _existing(path / "manifest.json", "checkpoint").parent


def _model_config(cfg: dict) -> ModelConfig:
    overrides = cfg.get("model", {})
    try:
        if cfg.get("tiny"):
            return ModelConfig.tiny(**overrides)
        return ModelConfig.from_dict(overrides)
    except (TypeError, ParameterError) as exc:
        raise UsageError(f"bad model config: {exc}") from exc


def _load_alignment(path):
    try:
        return corpus.parse_alignment(_existing(path, "alignment"))
    except ParseError as exc:
        raise InputIOError(str(exc)) from exc


def _read_wav(path) -> dsp.AudioClip:
    try:
        return dsp.read_wav(_existing(path, "audio"))
    except InputError as exc:
        raise InputIOError(str(exc)) from exc


def save_mel(path, frames: np.ndarray, **meta):
    meta = {"kind": "mel", "n_frames": int(frames.shape[0]), "n_mels": int(frames.shape[1]),
            "hop_seconds": dsp.HOP_SECONDS, "win_seconds": dsp.WIN_SECONDS, **meta}
    save_archive(path, {"mel": frames}, meta)


# -- commands --------------------------------------------------------------------

def cmd_mel(args, cfg):
    clip = _read_wav(args.wav_in)
    mel = dsp.wav_to_mel(clip)
    save_mel(args.mel_out, mel.frames, source=str(args.wav_in))
    return {"command": "mel", "output": str(args.mel_out), "n_frames": mel.n_frames, "n_mels": mel.n_mels}


def cmd_vocode(args, cfg):
    seed = _setting(args, cfg, "seed", required=True)
    iters = _setting(args, cfg, "iters", dsp.GL_ITERS)
    try:
        arrays, meta = load_archive(_existing(args.mel_in, "mel archive"))
        frames = arrays["mel"].astype(np.float64)
        clip = dsp.vocode(frames, n_iter=int(iters), seed=int(seed))
    except (ParseError, KeyError, InputError) as exc:
        raise InputIOError(f"cannot use mel archive {args.mel_in}: {exc}") from exc
    dsp.write_wav(args.wav_out, clip)
    return {"command": "vocode", "output": str(args.wav_out), "n_frames": int(frames.shape[0]),
            "samples": len(clip), "seed": int(seed), "iterations": int(iters)}


def cmd_train(args, cfg):
    manifest = _existing(_setting(args, cfg, "manifest", required=True), "manifest")
    out_dir = _setting(args, cfg, "checkpoint_dir") or os.environ.get(CHECKPOINT_ENV)
    if not out_dir:
        raise UsageError(f"--checkpoint-dir is required (or set {CHECKPOINT_ENV})")
    seed = int(_setting(args, cfg, "seed", required=True))
    epochs = int(_setting(args, cfg, "epochs", 100))
    batch = int(_setting(args, cfg, "batch_size", 32))
    lr = float(_setting(args, cfg, "lr", 1e-3))
    max_steps = _setting(args, cfg, "max_steps")
    if args.tiny:
        cfg = {**cfg, "tiny": True}
    model_cfg = _model_config(cfg)
    try:
        data = corpus.load_corpus(manifest)
    except (ParseError, InputError) as exc:
        raise InputIOError(str(exc)) from exc
    t0 = time.perf_counter()
    result = training.train(data, model_cfg, epochs=epochs, seed=seed, batch_size=batch, lr=lr,
                            out_dir=out_dir, max_steps=None if max_steps is None else int(max_steps))
    return {"command": "train", "checkpoint_dir": str(out_dir), "steps": result.steps,
            "epochs": len(result.val_history), "final_loss": result.history[-1].total if result.history else None,
            "best_val_loss": min(result.val_history) if result.val_history else None,
            "loss_csv": str(Path(out_dir) / "loss.csv"), "seconds": round(time.perf_counter() - t0, 3)}


def cmd_edit(args, cfg):
    phonemes = args.phonemes.split() if args.phonemes is not None else None
    if not phonemes:
        raise UsageError("--phonemes must list at least one phoneme to insert")
    seed = int(_setting(args, cfg, "seed", required=True))
    out_dir = Path(_setting(args, cfg, "out_dir", required=True))
    ckpt_path = _checkpoint_path(args, cfg)
    clip = _read_wav(args.audio)
    rec = _load_alignment(args.alignment)
    try:
        training.insertion_point(rec, args.insert_after_word)
    except InputError as exc:
        raise UsageError(str(exc)) from exc
    result = training.infer_edit(training.load_checkpoint(ckpt_path), clip, rec, args.insert_after_word,
                                 phonemes, args.word or "", seed=seed,
                                 n_iter=int(_setting(args, cfg, "iters", dsp.GL_ITERS)))
    dsp.write_wav(out_dir / "edited.wav", result.audio)
    save_mel(out_dir / "mel", result.mel, command="edit")
    span = result.script.phoneme_span
    durations = {"phonemes": [corpus.INVENTORY[i] for i in result.phonemes.ids],
                 "frames": result.durations.frames.tolist(), "inserted_span": list(span),
                 "inserted_frames": result.script.n_frames, "frame_offset": result.script.frame_offset}
    atomic_write_text(out_dir / "durations.json", dumps_json(durations))
    return {"command": "edit", "output": str(out_dir / "edited.wav"), "checkpoint": str(ckpt_path),
            "samples": len(result.audio), "original_samples": len(clip),
            "inserted_frames": result.script.n_frames, "frame_offset": result.script.frame_offset,
            "predicted_durations": result.durations.frames[span[0]:span[1]].tolist(), "seed": seed}


def cmd_resynth(args, cfg):
    seed = int(_setting(args, cfg, "seed", required=True))
    out_dir = Path(_setting(args, cfg, "out_dir", required=True))
    ckpt_path = _checkpoint_path(args, cfg)
    clip = _read_wav(args.audio)
    rec = _load_alignment(args.alignment)
    result = training.resynth_all(training.load_checkpoint(ckpt_path), clip, rec, seed=seed,
                                  n_iter=int(_setting(args, cfg, "iters", dsp.GL_ITERS)))
    dsp.write_wav(out_dir / "resynth.wav", result.audio)
    save_mel(out_dir / "mel", result.mel, command="resynth")
    atomic_write_text(out_dir / "provenance.json", dumps_json(result.provenance))
    return {"command": "resynth", "output": str(out_dir / "resynth.wav"), "n_frames": int(result.mel.shape[0]),
            "words": result.provenance, "seed": seed}


def cmd_eval_dur(args, cfg):
    seed = int(_setting(args, cfg, "seed", required=True))
    manifest = _existing(_setting(args, cfg, "manifest", required=True), "manifest")
    ckpt_path = _checkpoint_path(args, cfg)
    try:
        data = corpus.load_corpus(manifest)
    except (ParseError, InputError) as exc:
        raise InputIOError(str(exc)) from exc
    report = training.eval_duration(training.load_checkpoint(ckpt_path), data, seed=seed)
    out = {"command": "eval-dur", "checkpoint": str(ckpt_path), "seed": seed, **report.to_dict()}
    if args.out:
        atomic_write_text(args.out, dumps_json(report.to_dict()))
    return out


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="speechinsert", description="Text-based speech insertion toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=True, checkpoint=False):
        p.add_argument("--config", help="JSON config file (flags take precedence)")
        if seed:
            p.add_argument("--seed", type=int)
        if checkpoint:
            p.add_argument("--checkpoint", help=f"checkpoint directory (default ${CHECKPOINT_ENV})")
        return p

    p = common(sub.add_parser("mel", help="WAV -> log-mel archive"), seed=False)
    p.add_argument("wav_in")
    p.add_argument("mel_out")
    p.set_defaults(func=cmd_mel)

    p = common(sub.add_parser("vocode", help="log-mel archive -> WAV (Griffin-Lim)"))
    p.add_argument("mel_in")
    p.add_argument("wav_out")
    p.add_argument("--iters", type=int)
    p.set_defaults(func=cmd_vocode)

    p = common(sub.add_parser("train", help="train on a dataset manifest"))
    p.add_argument("--manifest")
    p.add_argument("--checkpoint-dir", dest="checkpoint_dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--tiny", action="store_true", help="desk-scale model dimensions")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("edit", help="insert a word into a recording"), checkpoint=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--alignment", required=True)
    p.add_argument("--insert-after-word", dest="insert_after_word", type=int, required=True,
                   help="word index to insert after (-1 for the start)")
    p.add_argument("--phonemes", required=True, help="space-separated ARPAbet phonemes")
    p.add_argument("--word", help="text of the inserted word")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--iters", type=int)
    p.set_defaults(func=cmd_edit)

    p = common(sub.add_parser("resynth", help="re-synthesize every word from its context"), checkpoint=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--alignment", required=True)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--iters", type=int)
    p.set_defaults(func=cmd_resynth)

    p = common(sub.add_parser("eval-dur", help="duration error on held-out masked words"), checkpoint=True)
    p.add_argument("--manifest")
    p.add_argument("--out", help="also write the report JSON here")
    p.set_defaults(func=cmd_eval_dur)
    return parser


def _fail(code: int, command, message: str) -> int:
    log.error(message)
    print(json.dumps({"command": command, "ok": False, "exit_code": code, "error": message}))
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else EXIT_USAGE
        if code != EXIT_OK:
            print(json.dumps({"ok": False, "exit_code": EXIT_USAGE, "error": "usage"}))
            return EXIT_USAGE
        return EXIT_OK
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)
    logging.captureWarnings(True)
    warnings.simplefilter("default")
    try:
        cfg = _load_config(args.config)
        with threadpool_limits(limits=1):
            summary = args.func(args, cfg)
    except UsageError as exc:
        return _fail(EXIT_USAGE, args.command, str(exc))
    except ConfigError as exc:
        return _fail(EXIT_USAGE, args.command, f"configuration error: {exc}")
    except InputIOError as exc:
        return _fail(EXIT_INPUT, args.command, str(exc))
    except (SpeechInsertError, OSError, ValueError, KeyError) as exc:
        return _fail(EXIT_RUNTIME, args.command, f"{type(exc).__name__}: {exc}")
    print(json.dumps({"ok": True, **summary}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
