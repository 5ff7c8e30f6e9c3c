"""Procedural "speech" for desk-scale experiments.

Every phoneme is a steady two-partial tone whose pitch and frame duration
depend only on its id, so a model that reads the phonemes can recover both
the spectrogram and the durations of a masked word. Alignments are written on
exact frame boundaries.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import corpus, dsp
from .corpus import AlignmentRecord, Phone, Utterance, Word

DEFAULT_PHONES = ["AA1", "AE1", "AH0", "IY1", "UW1", "EH1", "B", "D", "K", "M", "N", "S", "T", "L"]


@dataclass
class SyntheticVoice:
    phones: list[str]
    base_frames: dict[int, int]
    pitch: dict[int, float]
    jitter: float = 0.1  # probability of a +-1 frame deviation

    @classmethod
    def default(cls, phones=DEFAULT_PHONES, min_frames: int = 3, max_frames: int = 10,
                jitter: float = 0.1) -> "SyntheticVoice":
        ids = [corpus.PHONE_ID[p] for p in phones]
        span = max_frames - min_frames + 1
        base = {pid: min_frames + (7 * k + 3) % span for k, pid in enumerate(ids)}
        pitch = {pid: 180.0 * 2 ** (k / 4.0) for k, pid in enumerate(ids)}
        return cls(list(phones), base, pitch, jitter)

    def true_frames(self, phone: str) -> int:
        return self.base_frames[corpus.PHONE_ID[phone]]

    def lexicon(self, rng: np.random.Generator, n_words: int = 12, max_len: int = 4) -> list[list[str]]:
        words = []
        for _ in range(n_words):
            size = int(rng.integers(1, max_len + 1))
            words.append([self.phones[int(i)] for i in rng.integers(len(self.phones), size=size)])
        return words

    def render(self, labels: list[str], frames: list[int], rng: np.random.Generator) -> np.ndarray:
        chunks = []
        phase = 0.0
        for label, n in zip(labels, frames):
            length = n * dsp.HOP
            t = np.arange(length) / dsp.SAMPLE_RATE
            if label in ("SIL", "SP"):
                chunks.append(1e-4 * rng.standard_normal(length))
                continue
            f = self.pitch[corpus.PHONE_ID[label]]
            wave = 0.4 * np.sin(2 * np.pi * f * t + phase) + 0.15 * np.sin(4 * np.pi * f * t + 2 * phase)
            ramp = np.minimum(1.0, np.minimum(np.arange(length), np.arange(length)[::-1]) / 60.0)
            chunks.append(wave * (0.3 + 0.7 * ramp))
            phase += 2 * np.pi * f * length / dsp.SAMPLE_RATE
        return np.concatenate(chunks)

    def utterance(self, rng: np.random.Generator, lexicon: list[list[str]], n_words: int = 4,
                  name: str = "utt") -> tuple[AlignmentRecord, dsp.AudioClip]:
        chosen = [int(i) for i in rng.integers(len(lexicon), size=n_words)]
        if not any(len(lexicon[i]) > 1 for i in chosen):
            multi = [i for i, w in enumerate(lexicon) if len(w) > 1]
            chosen[0] = multi[int(rng.integers(len(multi)))]
        labels, frames, word_of = ["SIL"], [4], [-1]
        for w, lex in enumerate(chosen):
            for p in lexicon[lex]:
                jitter = 0
                if rng.random() < self.jitter:
                    jitter = 1 if rng.random() < 0.5 else -1
                labels.append(p)
                frames.append(max(1, self.true_frames(p) + jitter))
                word_of.append(w)
        labels.append("SIL")
        frames.append(4)
        word_of.append(-1)

        bounds = np.concatenate([[0], np.cumsum(frames)]) * dsp.HOP_SECONDS
        phones = [Phone(lab, float(bounds[i]), float(bounds[i + 1]), word_of[i])
                  for i, lab in enumerate(labels)]
        words = []
        for w, lex in enumerate(chosen):
            own = [p for p in phones if p.word == w]
            words.append(Word("-".join(lexicon[lex]).lower(), own[0].start, own[-1].end))
        text = " ".join(w.word for w in words)
        record = AlignmentRecord(phones, words, f"{name}.wav", dsp.SAMPLE_RATE, text)
        return record, dsp.AudioClip(self.render(labels, frames, rng))


def make_corpus(n: int, seed: int = 0, voice: SyntheticVoice | None = None, n_words=(3, 5),
                lexicon_size: int = 12) -> list[Utterance]:
    """``n`` synthetic utterances (in memory) sharing one lexicon."""
    rng = np.random.default_rng(seed)
    voice = voice or SyntheticVoice.default()
    lexicon = voice.lexicon(rng, lexicon_size)
    out = []
    for i in range(n):
        k = int(rng.integers(n_words[0], n_words[1] + 1))
        rec, clip = voice.utterance(rng, lexicon, k, name=f"utt{i:04d}")
        out.append(corpus.load_utterance(rec, audio=clip))
    return out


def write_corpus(directory, utterances: list[Utterance]) -> Path:
    """Write WAVs plus ``manifest.jsonl`` and return the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for utt in utterances:
        name = Path(utt.record.audio).name
        dsp.write_wav(directory / name, utt.audio)
        obj = utt.record.to_dict()
        obj["audio"] = name
        lines.append(json.dumps(obj))
    manifest = directory / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
