import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from speechinsert import corpus, dsp, synthetic
from speechinsert.corpus import (AlignmentRecord, DurationTrack, EditScript, Phone, PhonemeSequence,
                                 Word)
from speechinsert.errors import ContractError, CorpusError, ParseError, SkipUtterance


def record(phones, words=None):
    return corpus.alignment_from_dict({
        "phones": [{"phone": p, "start": s, "end": e, "word": w} for p, s, e, w in phones],
        "words": words or [],
    })


def test_inventory():
    assert corpus.INVENTORY[:4] == ["PAD", "SIL", "SP", "UNK"]
    assert len(set(corpus.INVENTORY)) == len(corpus.INVENTORY)
    assert corpus.phone_to_id("sil") == corpus.SIL_ID
    with pytest.warns(UserWarning):
        assert corpus.phone_to_id("QQ") == corpus.UNK_ID


def test_parse_two_phones():
    rec = corpus.parse_alignment(json.dumps({"phones": [
        {"phone": "AH", "start": 0, "end": 0.05, "word": 0},
        {"phone": "T", "start": 0.05, "end": 0.1, "word": 0}], "words": [{"word": "at", "start": 0, "end": 0.1}]}))
    assert [p.phone for p in rec.phones] == ["AH", "T"]


def test_parse_errors_carry_line_context():
    text = json.dumps({"phones": [
        {"phone": "AH", "start": 0, "end": 0.06, "word": 0},
        {"phone": "T", "start": 0.05, "end": 0.1, "word": 0}]}, indent=1)
    with pytest.raises(ParseError, match=r"line 10\) overlaps"):
        corpus.parse_alignment(text)
    unsorted = json.dumps({"phones": [
        {"phone": "AH", "start": 0.1, "end": 0.2, "word": 0},
        {"phone": "T", "start": 0.0, "end": 0.1, "word": 0}]})
    with pytest.raises(ParseError):
        corpus.parse_alignment(unsorted)
    with pytest.raises(ParseError, match="line 1"):
        corpus.parse_alignment('{"phones": [}')


def test_gap_becomes_silence():
    with pytest.warns(UserWarning):
        rec = record([("AH", 0.0, 0.05, 0), ("T", 0.08, 0.1, 0)])
    assert [p.phone for p in rec.phones] == ["AH", "SIL", "T"]
    assert rec.phones[1].start == 0.05 and rec.phones[1].end == 0.08
    assert rec.phones[1].word == -1


def test_serialize_round_trip(tmp_path):
    utt = synthetic.make_corpus(1, seed=5)[0]
    text = corpus.serialize_alignment(utt.record)
    again = corpus.parse_alignment(text)
    assert again == utt.record
    assert corpus.serialize_alignment(again) == text
    path = tmp_path / "a.json"
    path.write_text(text)
    assert corpus.parse_alignment(path) == utt.record


def test_seconds_to_frames_examples():
    np.testing.assert_array_equal(
        corpus.seconds_to_frames(record([("AH", 0, 0.05, 0), ("T", 0.05, 0.1, 0)])).frames, [4, 4])
    np.testing.assert_array_equal(corpus.seconds_to_frames(record([("AH", 0, 0.0125, 0)])).frames, [1])
    rec = record([("SIL", 0, 0.3, -1), ("AH", 0.3, 0.71, 0), ("SIL", 0.71, 1.0125, -1)])
    assert corpus.seconds_to_frames(rec).total == 81


def test_zero_frame_phone_is_merged():
    rec = record([("AH", 0, 0.05, 0), ("T", 0.05, 0.053, 0), ("K", 0.053, 0.1, 0)])
    with pytest.warns(UserWarning, match="merged"):
        track = corpus.seconds_to_frames(rec)
    np.testing.assert_array_equal(track.frames, [4, 4])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.001, 0.3), min_size=1, max_size=15))
def test_durations_telescope(lengths):
    bounds = np.concatenate([[0.0], np.cumsum(lengths)])
    rec = record([("AH", float(a), float(b), 0) for a, b in zip(bounds, bounds[1:])])
    if np.floor(bounds[-1] / dsp.HOP_SECONDS + 0.5) < 1:
        return
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        track = corpus.seconds_to_frames(rec)
    assert track.total == int(np.floor(bounds[-1] / dsp.HOP_SECONDS + 0.5))
    assert np.all(track.frames >= 1)


def test_load_utterance_fits_mel_to_durations():
    utt = synthetic.make_corpus(1, seed=0)[0]
    assert utt.durations.total == utt.mel.n_frames
    mel = dsp.MelSpectrogram(np.zeros((10, 80)))
    assert corpus.fit_mel_length(mel, 9).n_frames == 9
    assert corpus.fit_mel_length(mel, 11).n_frames == 11
    with pytest.raises(CorpusError):
        corpus.fit_mel_length(mel, 12)


def test_sequence_invariants():
    with pytest.raises(ContractError):
        PhonemeSequence([5, 6], [1, 0], [False, False])
    with pytest.raises(ContractError):
        PhonemeSequence([5, 6, 7], [0, 0, 0], [True, False, True])
    with pytest.raises(ContractError):
        PhonemeSequence([500], [0], [False])
    with pytest.raises(ContractError):
        DurationTrack([1, -1])


def _utt(words):
    """Utterance whose words have the given phoneme counts, 2 frames per phone."""
    phones, t, wlist = [], 0.0, []
    for w, n in enumerate(words):
        start = t
        for _ in range(n):
            phones.append(Phone("AH1", t, t + 0.025, w))
            t += 0.025
        wlist.append(Word(f"w{w}", start, t))
    rec = AlignmentRecord(phones, wlist)
    return corpus.load_utterance(rec, mel=dsp.MelSpectrogram(np.zeros((int(round(t / 0.0125)), 80))))


def test_only_qualifying_word_is_chosen():
    utt = _utt([1, 3, 1])
    rng = np.random.default_rng(0)
    for _ in range(20):
        ex = corpus.make_training_example(utt, rng)
        assert ex.script.phoneme_span == (1, 4)
    with pytest.raises(SkipUtterance):
        corpus.make_training_example(_utt([1, 1]), rng)


def test_masked_track_and_script():
    utt = _utt([2, 3, 2])
    ex = corpus.mask_word(utt, 1)
    s, e = ex.script.phoneme_span
    assert np.all(ex.durations.frames[s:e] == 0)
    keep = np.ones(len(utt.phonemes), bool)
    keep[s:e] = False
    np.testing.assert_array_equal(ex.durations.frames[keep], utt.durations.frames[keep])
    assert ex.script.frame_offset == utt.durations.frames[:s].sum() == 4
    assert ex.target is utt.mel and ex.script.word_text == "w1"


def test_uniform_word_choice():
    utt = _utt([2, 2, 2])
    rng = np.random.default_rng(2024)
    counts = np.zeros(3)
    for _ in range(10000):
        counts[corpus.make_training_example(utt, rng).script.phoneme_span[0] // 2] += 1
    assert np.all(np.abs(counts / 10000 - 1 / 3) < 0.02)


def test_masking_invariant_on_corpus(small_corpus):
    rng = np.random.default_rng(0)
    for utt in small_corpus:
        for _ in range(5):
            ex = corpus.make_training_example(utt, rng)
            s, e = ex.script.phoneme_span
            assert e - s > 1
            assert np.all(ex.durations.frames[s:e] == 0)
            assert np.all(np.delete(ex.durations.frames, np.arange(s, e))
                          == np.delete(utt.durations.frames, np.arange(s, e)))


def test_splice_empty_edit_is_identity():
    clip = dsp.AudioClip(np.random.default_rng(0).uniform(-1, 1, 3000))
    out = corpus.splice_output(clip, dsp.AudioClip(np.zeros(3000)), EditScript((2, 2), 3))
    assert out.samples.tobytes() == clip.samples.tobytes()


def test_splice_crossfade_formula():
    a = dsp.AudioClip(np.ones(6000))
    b = dsp.AudioClip(np.full(6600, 3.0))
    out = corpus.splice_output(a, b, EditScript((1, 2), 10, n_frames=2)).samples
    fade = 120
    start, end = 3000, 3600
    assert len(out) == 6600
    alpha = np.linspace(0, 1, fade)
    np.testing.assert_allclose(out[start - fade:start], (1 - alpha) * 1 + alpha * 3)
    np.testing.assert_allclose(out[end:end + fade], (1 - alpha) * 3 + alpha * 1)
    assert np.all(out[start:end] == 3) and np.all(out[:start - fade] == 1) and np.all(out[end + fade:] == 1)


def test_splice_at_start_has_only_right_fade():
    a = dsp.AudioClip(np.ones(3000))
    b = dsp.AudioClip(np.full(3300, 3.0))
    out = corpus.splice_output(a, b, EditScript((0, 1), 0, n_frames=1)).samples
    assert np.all(out[:300] == 3.0)
    assert out[300] == 3.0 and out[419] == 1.0 and 1.0 < out[360] < 3.0


def test_splice_out_of_bounds():
    a = dsp.AudioClip(np.ones(3000))
    with pytest.raises(ContractError):
        corpus.splice_output(a, a, EditScript((0, 1), 20, n_frames=1))


def test_manifest_round_trip(tmp_path, small_corpus):
    path = synthetic.write_corpus(tmp_path, small_corpus[:2])
    loaded = corpus.load_corpus(path)
    assert [len(u.phonemes) for u in loaded] == [len(u.phonemes) for u in small_corpus[:2]]
    for a, b in zip(loaded, small_corpus[:2]):
        np.testing.assert_array_equal(a.durations.frames, b.durations.frames)
        assert a.mel.n_frames == b.mel.n_frames
    with pytest.raises(ParseError):
        corpus.read_manifest(tmp_path / "nope.jsonl")
