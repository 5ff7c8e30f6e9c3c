import numpy as np
import pytest

from speechinsert import corpus, dsp, synthetic, training
from speechinsert import tensor as T
from speechinsert.errors import ConfigError, ContractError, InputError
from speechinsert.model import InsertionModel, ModelConfig
from speechinsert.tensor import Tensor


def constant_voice(frames=5):
    return synthetic.SyntheticVoice.default(min_frames=frames, max_frames=frames, jitter=0.0)


def perfect_checkpoint(frames, data):
    """Duration head pinned to log(1 + frames): exact on a constant-duration corpus."""
    model = InsertionModel(ModelConfig.tiny(), seed=0).eval()
    head = model.duration_predictor.fc2
    head.weight.data[:] = 0
    head.bias.data[:] = np.log1p(frames)
    return training.Checkpoint(model, training.MelNorm.fit([u.mel.frames for u in data]))


@pytest.fixture(scope="module")
def trained(small_corpus):
    return training.train(small_corpus, ModelConfig.tiny(), epochs=2, seed=7, batch_size=3)


def test_loss_examples():
    rng = np.random.default_rng(0)
    mel = rng.standard_normal((6, 80))
    ld = rng.random(4)
    zero = training.compute_loss(Tensor(mel), mel, Tensor(ld), ld)
    assert zero.total == 0.0
    off = training.compute_loss(Tensor(mel + 1), mel, Tensor(ld), ld)
    assert off.l2_mel == pytest.approx(1.0) and off.total == pytest.approx(1.0)
    w = training.compute_loss(Tensor(mel), mel, Tensor(ld + 2), ld)
    assert w.l2_mel == 0.0 and w.l1_duration == pytest.approx(2.0) and w.total == pytest.approx(0.02)


def test_loss_total_is_exact_weighted_sum():
    rng = np.random.default_rng(1)
    for _ in range(20):
        r = training.compute_loss(Tensor(rng.standard_normal((5, 80))), rng.standard_normal((5, 80)),
                                  Tensor(rng.standard_normal(3)), rng.standard_normal(3))
        assert r.total == r.l2_mel + 0.01 * r.l1_duration


def test_loss_shape_mismatch():
    with pytest.raises(ContractError):
        training.compute_loss(Tensor(np.zeros((5, 80))), np.zeros((6, 80)), Tensor(np.zeros(3)), np.zeros(3))


def test_loss_outside_edit_region_counts(small_corpus):
    utt = small_corpus[0]
    ex = corpus.make_training_example(utt, np.random.default_rng(0))
    norm = training.MelNorm.fit([utt.mel.frames])
    model = InsertionModel(ModelConfig.tiny(), seed=0).eval()
    batch = training.collate([ex], norm)
    base = training.batch_loss(model, batch).total
    outside = np.ones(batch.target.shape[1], bool)
    outside[ex.script.frame_offset:ex.script.frame_end] = False
    batch.target[0, np.flatnonzero(outside)[0]] += 1.0
    assert training.batch_loss(model, batch).total != base


def test_empty_dataset():
    with pytest.raises(ConfigError):
        training.train([], ModelConfig.tiny(), epochs=1)


def test_step_count_one_utterance(small_corpus):
    result = training.train(small_corpus[:1], ModelConfig.tiny(), epochs=2, seed=0)
    assert result.steps == 2 and result.checkpoint.step == 2


def test_training_is_deterministic(small_corpus, trained, tmp_path):
    again = training.train(small_corpus, ModelConfig.tiny(), epochs=2, seed=7, batch_size=3, out_dir=tmp_path)
    assert training.loss_csv(again.history) == training.loss_csv(trained.history)
    assert (tmp_path / "loss.csv").read_text() == training.loss_csv(trained.history)
    assert (tmp_path / "last" / "manifest.json").exists() and (tmp_path / "best" / "tensors.bin").exists()


def test_zero_learning_rate_keeps_parameters(small_corpus):
    init = training.Checkpoint(InsertionModel(ModelConfig.tiny(), seed=3),
                               training.MelNorm.fit([u.mel.frames for u in small_corpus]))
    before = {k: v.copy() for k, v in init.model.state_dict().items()}
    training.train(small_corpus, epochs=1, seed=0, batch_size=2, lr=0.0, init=init)
    after = init.model.state_dict()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_checkpoint_round_trip(trained, tmp_path, small_corpus):
    training.save_checkpoint(tmp_path / "a", trained.checkpoint)
    loaded = training.load_checkpoint(tmp_path / "a")
    training.save_checkpoint(tmp_path / "b", loaded)
    for f in ("manifest.json", "tensors.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    utt = small_corpus[1]
    a = training.infer_edit(trained.checkpoint, utt.audio, utt.record, 0, ["K", "AA1"], n_iter=4)
    b = training.infer_edit(loaded, utt.audio, utt.record, 0, ["K", "AA1"], n_iter=4)
    assert a.mel.tobytes() == b.mel.tobytes()
    assert a.audio.samples.tobytes() == b.audio.samples.tobytes()


def test_duration_error_metrics():
    truth = [np.array([3, 4, 5])]
    perfect = training.duration_errors(truth, truth)
    assert perfect.phoneme_level_error == 0.0 and perfect.word_level_error == 0.0
    off = training.duration_errors([truth[0] + 1], truth)
    assert off.phoneme_level_error == 1.0 and off.word_level_error == 3.0 and off.n_words == 1


def test_eval_duration_perfect_predictor():
    data = synthetic.make_corpus(5, seed=4, voice=constant_voice(5))
    report = training.eval_duration(perfect_checkpoint(5, data), data, seed=1)
    assert report.phoneme_level_error == 0.0 and report.word_level_error == 0.0
    assert report.n_words == 5


def test_eval_duration_deterministic(trained, small_corpus):
    a = training.eval_duration(trained.checkpoint, small_corpus, seed=3)
    b = training.eval_duration(trained.checkpoint, small_corpus, seed=3)
    assert a == b and a.phoneme_level_error >= 0 and a.word_level_error >= 0


def test_infer_edit_identity(trained, small_corpus):
    utt = small_corpus[2]
    out = training.infer_edit(trained.checkpoint, utt.audio, utt.record, 1, [])
    assert out.audio.samples.tobytes() == utt.audio.samples.tobytes()


def test_infer_edit_length_and_determinism(trained, small_corpus):
    utt = small_corpus[3]
    runs = [training.infer_edit(trained.checkpoint, utt.audio, utt.record, 1, ["S", "IY1", "T"], seed=5,
                                n_iter=6) for _ in range(2)]
    out = runs[0]
    n_new = int(out.durations.frames[out.phonemes.inserted].sum())
    assert len(out.audio) == len(utt.audio) + n_new * dsp.HOP
    assert out.mel.shape[0] == out.durations.total == utt.durations.total + n_new
    assert runs[0].audio.samples.tobytes() == runs[1].audio.samples.tobytes()


def test_infer_edit_bad_insertion_point(trained, small_corpus):
    utt = small_corpus[0]
    with pytest.raises(InputError):
        training.infer_edit(trained.checkpoint, utt.audio, utt.record, 99, ["AA1"])


def test_resynth_accounting(trained, small_corpus):
    utt = small_corpus[4]
    res = training.resynth_all(trained.checkpoint, utt.audio, utt.record, n_iter=4)
    assert res.mel.shape[0] == sum(p["frames"] for p in res.provenance)
    assert [p["word"] for p in res.provenance] == sorted(p["word"] for p in res.provenance)
    assert [p["text"] for p in res.provenance] == utt.words
    assert len(res.audio) == (res.mel.shape[0] - 1) * dsp.HOP


def test_resynth_single_word_matches_masked_inference(trained):
    utt = synthetic.make_corpus(1, seed=8, n_words=(1, 1))[0]
    ckpt = trained.checkpoint
    res = training.resynth_all(ckpt, utt.audio, utt.record, n_iter=2)
    ex = corpus.mask_word(utt, 0)
    out, track, _ = ckpt.model.infer(ex.phonemes.ids, ex.durations, ex.phonemes.inserted,
                                     ckpt.norm.apply(utt.mel.frames), ex.script.frame_offset,
                                     ex.script.removed_frames)
    n = int(track.frames[ex.phonemes.inserted].sum())
    s = ex.script.frame_offset
    np.testing.assert_array_equal(res.mel, ckpt.norm.invert(out[s:s + n]))
