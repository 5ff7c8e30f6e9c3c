import json
import subprocess
import sys

import numpy as np
import pytest

from speechinsert import cli, dsp, synthetic, training
from speechinsert.archive import load_archive


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, json.loads(out)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    utts = synthetic.make_corpus(4, seed=21)
    manifest = synthetic.write_corpus(root / "data", utts)
    first = utts[0]
    (root / "utt.json").write_text(json.dumps(first.record.to_dict()))
    return root, manifest, first


@pytest.fixture(scope="module")
def checkpoint_dir(workspace):
    root, manifest, _ = workspace
    code = cli.main(["train", "--manifest", str(manifest), "--checkpoint-dir", str(root / "ckpt"),
                     "--epochs", "1", "--seed", "7", "--tiny", "--batch-size", "2"])
    assert code == 0
    return root / "ckpt"


def test_mel_command(capsys, tmp_path):
    t = np.arange(24000) / 24000
    dsp.write_wav(tmp_path / "tone.wav", dsp.AudioClip(0.3 * np.sin(2 * np.pi * 440 * t)))
    code, out = run(capsys, "mel", tmp_path / "tone.wav", tmp_path / "tone_mel")
    assert code == 0 and out["n_frames"] == 81
    arrays, meta = load_archive(tmp_path / "tone_mel")
    assert meta["n_frames"] == 81 and arrays["mel"].shape == (81, 80)


def test_mel_missing_file(capsys, tmp_path):
    code, out = run(capsys, "mel", tmp_path / "nope.wav", tmp_path / "m")
    assert code == 2 and out["ok"] is False


def test_bad_flags_exit_one(capsys):
    code, out = run(capsys, "train", "--epochs", "many")
    assert code == 1 and out["ok"] is False
    code, _ = run(capsys, "frobnicate")
    assert code == 1


def test_vocode_requires_seed(capsys, tmp_path):
    cli.save_mel(tmp_path / "m", np.full((5, 80), np.log(1e-5)))
    capsys.readouterr()
    code, _ = run(capsys, "vocode", tmp_path / "m", tmp_path / "o.wav")
    assert code == 1
    code, out = run(capsys, "vocode", tmp_path / "m", tmp_path / "o.wav", "--seed", "0", "--iters", "3")
    assert code == 0 and out["samples"] == 4 * dsp.HOP


def test_train_is_deterministic(capsys, workspace, tmp_path):
    _, manifest, _ = workspace
    csvs = []
    for name in ("a", "b"):
        code, out = run(capsys, "train", "--manifest", manifest, "--checkpoint-dir", tmp_path / name,
                        "--epochs", "2", "--seed", "7", "--tiny", "--batch-size", "2")
        assert code == 0 and out["steps"] == 4
        csvs.append((tmp_path / name / "loss.csv").read_text())
    assert csvs[0] == csvs[1] and csvs[0].startswith("step,l2_mel,l1_duration,total\n")


def test_config_file_and_flag_precedence(capsys, workspace, tmp_path):
    _, manifest, _ = workspace
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"manifest": str(manifest), "checkpoint_dir": str(tmp_path / "c"),
                               "seed": 1, "epochs": 5, "batch_size": 4, "tiny": True,
                               "model": {"hidden_dim": 16, "heads": 2}}))
    code, out = run(capsys, "train", "--config", cfg, "--epochs", "1")
    assert code == 0 and out["epochs"] == 1 and out["steps"] == 1
    assert training.load_checkpoint(tmp_path / "c" / "last").config.hidden_dim == 16


def test_train_empty_manifest(capsys, tmp_path):
    (tmp_path / "empty.jsonl").write_text("")
    code, _ = run(capsys, "train", "--manifest", tmp_path / "empty.jsonl", "--checkpoint-dir",
                  tmp_path / "c", "--seed", "0")
    assert code == 1


def test_edit_zero_phonemes(capsys, workspace, checkpoint_dir, tmp_path):
    root, _, first = workspace
    code, out = run(capsys, "edit", "--checkpoint", checkpoint_dir, "--audio", first.record.audio,
                    "--alignment", root / "utt.json", "--insert-after-word", "0", "--phonemes", "",
                    "--seed", "0", "--out-dir", tmp_path)
    assert code == 1 and "at least one phoneme" in out["error"]


def test_edit_command(capsys, workspace, checkpoint_dir, tmp_path, monkeypatch):
    root, _, first = workspace
    monkeypatch.setenv(cli.CHECKPOINT_ENV, str(checkpoint_dir))
    wav = root / "data" / "utt0000.wav"
    code, out = run(capsys, "edit", "--audio", wav, "--alignment", root / "utt.json",
                    "--insert-after-word", "1", "--phonemes", "K AE1 T", "--seed", "3",
                    "--out-dir", tmp_path, "--iters", "5")
    assert code == 0
    assert out["samples"] == out["original_samples"] + out["inserted_frames"] * dsp.HOP
    assert dsp.read_wav(tmp_path / "edited.wav").samples.size == out["samples"]
    _, meta = load_archive(tmp_path / "mel")
    assert meta["kind"] == "mel"
    assert json.loads((tmp_path / "durations.json").read_text())["inserted_frames"] == out["inserted_frames"]


def test_edit_invalid_insertion_point(capsys, workspace, checkpoint_dir, tmp_path):
    root, _, _ = workspace
    code, _ = run(capsys, "edit", "--checkpoint", checkpoint_dir, "--audio", root / "data" / "utt0000.wav",
                  "--alignment", root / "utt.json", "--insert-after-word", "40", "--phonemes", "K",
                  "--seed", "0", "--out-dir", tmp_path)
    assert code == 1


def test_resynth_command(capsys, workspace, checkpoint_dir, tmp_path):
    root, _, first = workspace
    code, out = run(capsys, "resynth", "--checkpoint", checkpoint_dir, "--audio", root / "data" / "utt0000.wav",
                    "--alignment", root / "utt.json", "--seed", "0", "--out-dir", tmp_path, "--iters", "3")
    assert code == 0 and out["n_frames"] == sum(w["frames"] for w in out["words"])
    assert [w["text"] for w in out["words"]] == first.words


def test_eval_dur_perfect_predictor(capsys, tmp_path):
    voice = synthetic.SyntheticVoice.default(min_frames=5, max_frames=5, jitter=0.0)
    utts = synthetic.make_corpus(4, seed=2, voice=voice)
    manifest = synthetic.write_corpus(tmp_path / "data", utts)
    result = training.train(utts[:1], training.ModelConfig.tiny(), epochs=0)
    head = result.checkpoint.model.duration_predictor.fc2
    head.weight.data[:] = 0
    head.bias.data[:] = np.log1p(5)
    training.save_checkpoint(tmp_path / "perfect", result.checkpoint)
    code, out = run(capsys, "eval-dur", "--checkpoint", tmp_path / "perfect", "--manifest", manifest,
                    "--seed", "0", "--out", tmp_path / "report.json")
    assert code == 0
    assert out["phoneme_level_error"] == 0.0 and out["word_level_error"] == 0.0
    assert json.loads((tmp_path / "report.json").read_text())["n_words"] == 4


def test_missing_checkpoint(capsys, workspace, tmp_path, monkeypatch):
    root, manifest, _ = workspace
    monkeypatch.delenv(cli.CHECKPOINT_ENV, raising=False)
    code, _ = run(capsys, "eval-dur", "--manifest", manifest, "--seed", "0")
    assert code == 1
    code, _ = run(capsys, "eval-dur", "--manifest", manifest, "--seed", "0", "--checkpoint", tmp_path / "x")
    assert code == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "speechinsert", "mel", str(tmp_path / "x.wav"),
                           str(tmp_path / "m")], capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stdout)["exit_code"] == 2
    assert proc.stderr
