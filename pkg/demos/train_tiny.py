"""
Training a tiny insertion model
===============================

Synthetic "speech" where every phoneme has a fixed tone and a fixed
duration. The duration predictor only sees a zero reference for the masked
word, so the durations it recovers have to come from the phoneme identities.
"""

import numpy as np

from speechinsert import corpus, training
from speechinsert import synthetic
from speechinsert.model import ModelConfig

utts = synthetic.make_corpus(48, seed=3)
train_set, held_out = utts[:40], utts[40:]
voice = synthetic.SyntheticVoice.default()
print("true frames per phoneme:", {p: voice.true_frames(p) for p in voice.phones})

cfg = ModelConfig.tiny(hidden_dim=64, ffn_inner_dim=128, phoneme_embed_dim=64)
result = training.train(train_set, cfg, epochs=30, batch_size=8, seed=0, val_fraction=0)
h = [r.total for r in result.history]
print(f"{len(h)} steps, loss {h[0]:.3f} -> {h[-1]:.3f}")

# mask one word in a held-out utterance and look at the predicted frames
ex = corpus.make_training_example(held_out[0], np.random.default_rng(1))
s, e = ex.script.phoneme_span
pred = training.predict_masked_durations(result.checkpoint, ex)
print("masked phonemes:", [corpus.INVENTORY[i] for i in ex.phonemes.ids[s:e]])
print("predicted:", pred.tolist(), "true:", ex.true_durations.frames[s:e].tolist())

report = training.eval_duration(result.checkpoint, held_out, seed=0)
print("held-out duration error:", report.to_dict())

training.save_checkpoint("tiny_checkpoint", result.checkpoint)
