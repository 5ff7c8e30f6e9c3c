"""
Inserting a word
================

Train briefly, then insert a new word into a recording and re-synthesize
every word of another one from its context.
"""

from speechinsert import dsp, synthetic, training
from speechinsert.model import ModelConfig

utts = synthetic.make_corpus(24, seed=5)
result = training.train(utts[:20], ModelConfig.tiny(), epochs=10, batch_size=4, seed=0)
ckpt = result.checkpoint

utt = utts[21]
print("transcript:", utt.record.transcript)

# insert "K AE1 T" after the first word
edit = training.infer_edit(ckpt, utt.audio, utt.record, after_word=0, phonemes=["K", "AE1", "T"],
                           word_text="cat", seed=0)
new = edit.script.n_frames
print("inserted frames:", new, "->", len(edit.audio) - len(utt.audio), "extra samples")
assert len(edit.audio) == len(utt.audio) + new * dsp.HOP
dsp.write_wav("edited.wav", edit.audio)

# an empty insertion hands back the original samples untouched
same = training.infer_edit(ckpt, utt.audio, utt.record, after_word=0, phonemes=[])
print("identity edit:", same.audio.samples.tobytes() == utt.audio.samples.tobytes())

# resynthesize every word from the rest of the sentence
res = training.resynth_all(ckpt, utt.audio, utt.record, seed=0)
for p in res.provenance:
    print(f"  word {p['word']} {p['text']!r}: {p['frames']} frames from frame {p['start_frame']}")
dsp.write_wav("resynth.wav", res.audio)
