"""Forced-alignment ingestion, frame durations, masked-word examples and splicing.

Alignment files are JSON::

    {"audio": "utt.wav", "sample_rate": 24000, "transcript": "...",
     "phones": [{"phone": "HH", "start": 0.0, "end": 0.05, "word": 0}, ...],
     "words":  [{"word": "hello", "start": 0.0, "end": 0.3}, ...]}

Silence phones carry ``"word": -1`` (``null`` is accepted too). A dataset
manifest is newline-delimited JSON with one such record per line.
"""
from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .archive import atomic_write_text
from .errors import ContractError, CorpusError, ParseError, SkipUtterance

# -- phoneme inventory -------------------------------------------------------

SPECIALS = ["PAD", "SIL", "SP", "UNK"]
CONSONANTS = ["B", "CH", "D", "DH", "F", "G", "HH", "JH", "K", "L", "M", "N", "NG", "P",
              "R", "S", "SH", "T", "TH", "V", "W", "Y", "Z", "ZH"]
VOWELS = ["AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER", "EY", "IH", "IY", "OW", "OY", "UH", "UW"]
INVENTORY = SPECIALS + CONSONANTS + [v + s for v in VOWELS for s in ("", "0", "1", "2")]
PHONE_ID = {p: i for i, p in enumerate(INVENTORY)}
PAD_ID, SIL_ID, SP_ID, UNK_ID = (PHONE_ID[s] for s in SPECIALS)
_SILENCE_ALIASES = {"": "SIL", "sil": "SIL", "sp": "SP", "spn": "SP", "<eps>": "SIL"}
_TIME_TOL = 1e-6


def phone_to_id(label: str) -> int:
    label = _SILENCE_ALIASES.get(label, label)
    if label in PHONE_ID:
        return PHONE_ID[label]
    if label.upper() in PHONE_ID:
        return PHONE_ID[label.upper()]
    warnings.warn(f"unknown phone label {label!r} mapped to UNK")
    return UNK_ID


def is_silence(phone_id: int) -> bool:
    return phone_id in (SIL_ID, SP_ID, PAD_ID)


def write_inventory(path):
    Path(path).write_text("\n".join(INVENTORY) + "\n")


# -- domain types --------------------------------------------------------------

@dataclass
class Phone:
    phone: str
    start: float
    end: float
    word: int = -1


@dataclass
class Word:
    word: str
    start: float
    end: float


@dataclass
class AlignmentRecord:
    phones: list[Phone]
    words: list[Word]
    audio: str = ""
    sample_rate: int = dsp.SAMPLE_RATE
    transcript: str = ""

    @property
    def duration(self) -> float:
        return self.phones[-1].end if self.phones else 0.0

    def to_dict(self) -> dict:
        return {
            "audio": self.audio,
            "sample_rate": self.sample_rate,
            "transcript": self.transcript,
            "phones": [{"phone": p.phone, "start": p.start, "end": p.end, "word": p.word}
                       for p in self.phones],
            "words": [{"word": w.word, "start": w.start, "end": w.end} for w in self.words],
        }


@dataclass
class PhonemeSequence:
    ids: np.ndarray
    word_index: np.ndarray  # -1 for silence
    inserted: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.word_index = np.asarray(self.word_index, dtype=np.int64)
        self.inserted = np.asarray(self.inserted, dtype=bool)
        if not (len(self.ids) == len(self.word_index) == len(self.inserted)):
            raise ContractError("phoneme fields differ in length")
        if np.any((self.ids < 0) | (self.ids >= len(INVENTORY))):
            raise ContractError("phoneme id outside the inventory")
        words = self.word_index[self.word_index >= 0]
        if np.any(np.diff(words) < 0):
            raise ContractError("word indices must be non-decreasing")
        runs = np.flatnonzero(np.diff(np.r_[0, self.inserted.astype(int), 0]))
        if len(runs) > 2:
            raise ContractError("inserted phonemes must form one contiguous run")

    def __len__(self):
        return len(self.ids)

    def word_span(self, word: int) -> tuple[int, int]:
        where = np.flatnonzero(self.word_index == word)
        if where.size == 0:
            raise ContractError(f"word {word} has no phonemes")
        return int(where[0]), int(where[-1]) + 1


@dataclass
class DurationTrack:
    frames: np.ndarray
    kind: str = "reference"  # or "predicted"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64)
        if np.any(self.frames < 0):
            raise ContractError("durations must be non-negative")

    def __len__(self):
        return len(self.frames)

    @property
    def total(self) -> int:
        return int(self.frames.sum())


@dataclass
class EditScript:
    """Which phonemes were edited and where their frames sit.

    ``n_frames`` is the length of the edited region in the output timeline and
    ``removed_frames`` how many original frames it replaces (0 for a pure insertion).
    """

    phoneme_span: tuple[int, int]
    frame_offset: int
    word_text: str = ""
    n_frames: int = 0
    removed_frames: int = 0

    @property
    def frame_end(self) -> int:
        return self.frame_offset + self.n_frames


@dataclass
class Utterance:
    """An aligned recording: record, frame-level durations and the matching log-mel."""

    record: AlignmentRecord
    phonemes: PhonemeSequence
    durations: DurationTrack
    mel: dsp.MelSpectrogram
    words: list[str] = field(default_factory=list)
    audio: dsp.AudioClip | None = None


# -- parsing -------------------------------------------------------------------

def _phone_line(text: str, n: int) -> int | None:
    matches = list(re.finditer(r'"phone"\s*:', text))
    if n < len(matches):
        return text.count("\n", 0, matches[n].start()) + 1
    return None


def _where(text: str | None, n: int, label: str) -> str:
    line = _phone_line(text, n) if text else None
    at = f" (line {line})" if line else ""
    return f"phones[{n}] {label!r}{at}"


def alignment_from_dict(obj: dict, text: str | None = None) -> AlignmentRecord:
    """Validate an alignment dict; unlabeled gaps become SIL phones."""
    try:
        raw_phones = obj["phones"]
        raw_words = obj.get("words", [])
        phones = [Phone(str(p["phone"]), float(p["start"]), float(p["end"]),
                        -1 if p.get("word") is None else int(p["word"])) for p in raw_phones]
        words = [Word(str(w["word"]), float(w["start"]), float(w["end"])) for w in raw_words]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"alignment does not match the schema: {exc!r}") from exc
    if not phones:
        raise ParseError("alignment has no phones")

    repaired: list[Phone] = []
    cursor = 0.0
    for n, p in enumerate(phones):
        if p.end < p.start - _TIME_TOL:
            raise ParseError(f"{_where(text, n, p.phone)} ends before it starts")
        if p.start < cursor - _TIME_TOL:
            problem = "overlaps the previous phone" if repaired else "starts before 0"
            if repaired and p.start < repaired[-1].start - _TIME_TOL:
                problem = "is out of order"
            raise ParseError(f"{_where(text, n, p.phone)} {problem}")
        if p.start > cursor + _TIME_TOL:
            warnings.warn(f"gap {cursor:.4f}-{p.start:.4f}s before {_where(text, n, p.phone)} filled with SIL")
            repaired.append(Phone("SIL", cursor, p.start, -1))
        p.phone = _SILENCE_ALIASES.get(p.phone, p.phone)
        if p.phone in ("SIL", "SP"):
            p.word = -1
        repaired.append(p)
        cursor = p.end

    word_ids = [p.word for p in repaired if p.word >= 0]
    if any(b < a for a, b in zip(word_ids, word_ids[1:])):
        raise ParseError("phone word indices are not non-decreasing")
    if words and word_ids and max(word_ids) >= len(words):
        raise ParseError(f"phone refers to word {max(word_ids)} but only {len(words)} words listed")
    return AlignmentRecord(repaired, words, str(obj.get("audio", "")),
                           int(obj.get("sample_rate", dsp.SAMPLE_RATE)), str(obj.get("transcript", "")))


def parse_alignment(source) -> AlignmentRecord:
    """Parse an alignment JSON file (path) or a JSON string."""
    if isinstance(source, (str, Path)) and not str(source).lstrip().startswith("{"):
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise ParseError(f"cannot read alignment {source}: {exc}") from exc
    else:
        text = str(source)
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed alignment JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise ParseError("alignment JSON must be an object")
    return alignment_from_dict(obj, text)


def serialize_alignment(rec: AlignmentRecord) -> str:
    return json.dumps(rec.to_dict(), indent=2)


def read_manifest(path) -> list[AlignmentRecord]:
    """Read a newline-delimited JSON manifest; relative audio paths resolve against it."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ParseError(f"cannot read manifest {path}: {exc}") from exc
    records = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{lineno}: malformed JSON: {exc.msg}") from exc
        try:
            rec = alignment_from_dict(obj)
        except ParseError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
        if rec.audio and not Path(rec.audio).is_absolute():
            rec.audio = str(path.parent / rec.audio)
        records.append(rec)
    return records


def write_manifest(path, records: list[AlignmentRecord]):
    atomic_write_text(path, "".join(json.dumps(r.to_dict()) + "\n" for r in records))


# -- frames ----------------------------------------------------------------------

def _round_half_up(x) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


def merge_short_phones(rec: AlignmentRecord, hop: float = dsp.HOP_SECONDS) -> AlignmentRecord:
    """Absorb phones that round to zero frames into a neighbour (the next one, else the previous)."""
    bounds = _round_half_up(np.array([rec.phones[0].start] + [p.end for p in rec.phones]) / hop)
    frames = np.diff(bounds)
    phones = [Phone(p.phone, p.start, p.end, p.word) for p in rec.phones]
    keep = []
    for i, p in enumerate(phones):
        if frames[i] > 0:
            keep.append(p)
            continue
        warnings.warn(f"phone {i} {p.phone!r} spans 0 frames; merged into a neighbour")
        if i + 1 < len(phones):
            phones[i + 1].start = p.start
        elif keep:
            keep[-1].end = p.end
    if not keep:
        raise CorpusError("alignment is shorter than one frame")
    return AlignmentRecord(keep, rec.words, rec.audio, rec.sample_rate, rec.transcript)


def seconds_to_frames(rec: AlignmentRecord, hop: float = dsp.HOP_SECONDS) -> DurationTrack:
    """Frame durations by rounding phone boundaries (half up) and differencing.

    The sum telescopes to ``round(end / hop)`` exactly. Phones that would get
    0 frames are merged into a neighbour first (see ``merge_short_phones``),
    so pass the merged record on to ``phoneme_sequence``.
    """
    merged = merge_short_phones(rec, hop)
    bounds = _round_half_up(np.array([merged.phones[0].start] + [p.end for p in merged.phones]) / hop)
    return DurationTrack(np.diff(bounds), "reference")


def phoneme_sequence(rec: AlignmentRecord) -> PhonemeSequence:
    ids = [phone_to_id(p.phone) for p in rec.phones]
    return PhonemeSequence(ids, [p.word for p in rec.phones], np.zeros(len(ids), dtype=bool))


def fit_mel_length(mel: dsp.MelSpectrogram, n_frames: int) -> dsp.MelSpectrogram:
    """Trim or pad (repeating the last frame) the tail by at most one frame."""
    diff = mel.n_frames - n_frames
    if abs(diff) > 1:
        raise CorpusError(f"mel has {mel.n_frames} frames but durations sum to {n_frames}")
    if diff > 0:
        frames = mel.frames[:n_frames]
    elif diff < 0:
        frames = np.concatenate([mel.frames, mel.frames[-1:]], axis=0)
    else:
        frames = mel.frames
    return dsp.MelSpectrogram(frames, mel.hop_seconds, mel.win_seconds, mel.n_mels)


def load_utterance(rec: AlignmentRecord, audio: dsp.AudioClip | None = None,
                   mel: dsp.MelSpectrogram | None = None) -> Utterance:
    """Build an Utterance; reads ``rec.audio`` when neither audio nor mel is given."""
    merged = merge_short_phones(rec)
    durations = seconds_to_frames(merged)
    if mel is None:
        if audio is None:
            audio = dsp.read_wav(rec.audio)
        mel = dsp.wav_to_mel(audio)
    mel = fit_mel_length(mel, durations.total)
    words = [w.word for w in merged.words]
    return Utterance(merged, phoneme_sequence(merged), durations, mel, words, audio)


def load_corpus(manifest) -> list[Utterance]:
    return [load_utterance(rec) for rec in read_manifest(manifest)]


# -- masked-word examples --------------------------------------------------------

@dataclass
class TrainingExample:
    phonemes: PhonemeSequence     # inserted flags mark the masked word
    durations: DurationTrack      # reference track, zeros on the masked span
    script: EditScript
    target: dsp.MelSpectrogram    # untouched full-sentence mel
    true_durations: DurationTrack


def qualifying_words(phonemes: PhonemeSequence) -> list[int]:
    """Words with more than one phoneme (eligible for masking)."""
    words, counts = np.unique(phonemes.word_index[phonemes.word_index >= 0], return_counts=True)
    return [int(w) for w, c in zip(words, counts) if c > 1]


def mask_word(utt: Utterance, word: int) -> TrainingExample:
    start, end = utt.phonemes.word_span(word)
    inserted = np.zeros(len(utt.phonemes), dtype=bool)
    inserted[start:end] = True
    masked = utt.durations.frames.copy()
    masked[start:end] = 0
    offset = int(utt.durations.frames[:start].sum())
    span_frames = int(utt.durations.frames[start:end].sum())
    text = utt.words[word] if word < len(utt.words) else ""
    script = EditScript((start, end), offset, text, n_frames=span_frames, removed_frames=span_frames)
    phonemes = PhonemeSequence(utt.phonemes.ids, utt.phonemes.word_index, inserted)
    return TrainingExample(phonemes, DurationTrack(masked), script, utt.mel, utt.durations)


def make_training_example(utt: Utterance, rng: np.random.Generator) -> TrainingExample:
    """Mask one uniformly chosen word with more than one phoneme."""
    candidates = qualifying_words(utt.phonemes)
    if not candidates:
        raise SkipUtterance("no word with more than one phoneme")
    return mask_word(utt, candidates[int(rng.integers(len(candidates)))])


# -- output assembly ---------------------------------------------------------------

CROSSFADE_SECONDS = 0.005


def splice_output(original: dsp.AudioClip, patched: dsp.AudioClip, script: EditScript,
                  hop: int = dsp.HOP, crossfade: float = CROSSFADE_SECONDS) -> dsp.AudioClip:
    """Original audio outside the edited region, vocoded audio inside it.

    ``patched`` is the vocoded full sentence on the edited timeline. Both
    boundaries get a linear crossfade ``(1 - a) * outgoing + a * incoming``
    placed just outside the region; a boundary at either end of the clip has
    no crossfade.
    """
    if script.n_frames == 0 and script.removed_frames == 0:
        return dsp.AudioClip(original.samples.copy(), original.sample_rate)
    x = original.samples
    y = patched.samples
    start = script.frame_offset * hop
    end = start + script.n_frames * hop
    resume = start + script.removed_frames * hop
    if start > len(x) or resume > len(x):
        raise ContractError("edit region lies outside the original audio")
    out_len = len(x) + (end - resume)
    if end > len(y):
        raise ContractError(f"vocoded audio has {len(y)} samples, edit region ends at {end}")
    fade = int(round(crossfade * original.sample_rate))

    out = np.empty(out_len)
    out[:start] = x[:start]
    out[start:end] = y[start:end]
    out[end:] = x[resume:]

    left = min(fade, start)
    if left:
        alpha = np.linspace(0.0, 1.0, left)
        sl = slice(start - left, start)
        out[sl] = (1 - alpha) * x[sl] + alpha * y[sl]
    right = min(fade, out_len - end, len(y) - end)
    if right > 0:
        alpha = np.linspace(0.0, 1.0, right)
        out[end:end + right] = (1 - alpha) * y[end:end + right] + alpha * x[resume:resume + right]
    return dsp.AudioClip(out, original.sample_rate)
