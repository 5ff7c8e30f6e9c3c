"""
Log-mel features and Griffin-Lim
================================

Analyse a synthetic utterance, recover linear magnitudes from the mel
spectrogram with the filterbank pseudo-inverse, and vocode it back.
"""

import numpy as np

from speechinsert import dsp, synthetic

# one procedurally generated utterance: steady two-partial tones per phoneme
utt = synthetic.make_corpus(1, seed=2)[0]
clip = utt.audio
print("samples:", len(clip), "seconds:", round(clip.seconds, 3))

# 80-bin log-mel, one frame per 12.5 ms hop
mel = dsp.wav_to_mel(clip)
print("mel frames:", mel.frames.shape, "expected:", len(clip) // dsp.HOP + 1)

# the exact magnitudes give the best case for phase recovery
mag = np.abs(dsp.stft(clip))
_, errors = dsp.griffin_lim_trace(mag, n_iter=60, seed=0)
print("spectral convergence, iterations 1/10/60:",
      [round(errors[i], 4) for i in (0, 9, 59)])

# going through the mel bottleneck loses detail in the narrow low bands
recovered = dsp.mel_to_linear(mel)
audio = dsp.griffin_lim(recovered, seed=0)
mel2 = dsp.wav_to_mel(audio)
e1 = np.exp(mel.frames).sum(axis=1)[: mel2.n_frames]
e2 = np.exp(mel2.frames).sum(axis=1)
rank = lambda v: np.argsort(np.argsort(v))
print("frame energy rank correlation:", round(np.corrcoef(rank(e1), rank(e2))[0, 1], 3))

dsp.write_wav("round_trip.wav", audio)
print("wrote round_trip.wav")
