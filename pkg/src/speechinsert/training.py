"""Losses, the training loop, checkpoints, duration evaluation and inference pipelines."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import corpus, dsp
from . import tensor as T
from .archive import atomic_write_text, dumps_json, load_archive, save_archive
from .corpus import (AlignmentRecord, DurationTrack, EditScript, PhonemeSequence, TrainingExample,
                     Utterance)
from .errors import ConfigError, ContractError, InputError, SkipUtterance
from .model import InsertionModel, ModelConfig, extend_mel, log_to_frames
from .optim import Adam
from .tensor import Tensor

log = logging.getLogger(__name__)

MEL_WEIGHT = 1.0
DURATION_WEIGHT = 0.01
STD_FLOOR = 1e-3


# -- normalization ---------------------------------------------------------------

@dataclass
class MelNorm:
    """Corpus-level mean / std applied to log-mel values before the network."""

    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def fit(cls, mels: Sequence[np.ndarray]) -> "MelNorm":
        values = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in mels])
        return cls(float(values.mean()), float(max(values.std(), STD_FLOOR)))

    def apply(self, mel: np.ndarray) -> np.ndarray:
        return (np.asarray(mel, dtype=np.float64) - self.mean) / self.std

    def invert(self, mel: np.ndarray) -> np.ndarray:
        return np.asarray(mel, dtype=np.float64) * self.std + self.mean


# -- losses --------------------------------------------------------------------------

@dataclass
class LossReport:
    l2_mel: float
    l1_duration: float
    total: float
    step: int = 0
    per_example: np.ndarray | None = field(default=None, repr=False, compare=False)
    graph: Tensor | None = field(default=None, repr=False, compare=False)


def compute_loss(pred_mel: Tensor, target_mel, pred_logdur: Tensor, target_logdur,
                 frame_mask: np.ndarray | None = None, phone_mask: np.ndarray | None = None,
                 step: int = 0) -> LossReport:
    """Mean squared mel error over every frame plus 0.01 x mean absolute log-duration error.

    Both terms cover the whole sentence. With masks, each example's loss is
    averaged over its own real positions and the batch loss is the mean of
    those per-example values.
    """
    if not isinstance(pred_mel, Tensor):
        pred_mel = Tensor(pred_mel)
    if not isinstance(pred_logdur, Tensor):
        pred_logdur = Tensor(pred_logdur)
    target_mel = np.asarray(target_mel)
    target_logdur = np.asarray(target_logdur)
    if pred_mel.shape != target_mel.shape:
        raise ContractError(f"mel shapes differ: {pred_mel.shape} vs {target_mel.shape}")
    if pred_logdur.shape != target_logdur.shape:
        raise ContractError(f"duration shapes differ: {pred_logdur.shape} vs {target_logdur.shape}")
    if pred_mel.ndim == 2:
        return compute_loss(pred_mel.reshape(1, *pred_mel.shape), target_mel[None],
                            pred_logdur.reshape(1, *pred_logdur.shape), target_logdur[None],
                            None if frame_mask is None else frame_mask[None],
                            None if phone_mask is None else phone_mask[None], step)

    dtype = pred_mel.dtype
    if frame_mask is None:
        frame_mask = np.ones(pred_mel.shape[:2])
    if phone_mask is None:
        phone_mask = np.ones(pred_logdur.shape)
    n_frames = frame_mask.sum(axis=1) * pred_mel.shape[2]
    n_phones = phone_mask.sum(axis=1)

    diff = pred_mel - Tensor(target_mel.astype(dtype))
    sq = (diff * diff) * Tensor(frame_mask[..., None].astype(dtype))
    l2_each = sq.sum(axis=(1, 2)) * Tensor((1.0 / n_frames).astype(dtype))
    ad = (pred_logdur - Tensor(target_logdur.astype(dtype))).abs() * Tensor(phone_mask.astype(dtype))
    l1_each = ad.sum(axis=1) * Tensor((1.0 / n_phones).astype(dtype))
    l2 = l2_each.mean()
    l1 = l1_each.mean()
    total = l2 * MEL_WEIGHT + l1 * DURATION_WEIGHT

    l2f, l1f = float(l2.data), float(l1.data)
    per_example = l2_each.data.astype(np.float64) * MEL_WEIGHT + DURATION_WEIGHT * l1_each.data.astype(np.float64)
    return LossReport(l2f, l1f, MEL_WEIGHT * l2f + DURATION_WEIGHT * l1f, step, per_example, total)


# -- batching ---------------------------------------------------------------------------

@dataclass
class Batch:
    ids: np.ndarray
    phone_mask: np.ndarray
    ref: np.ndarray
    inserted: np.ndarray
    durations: np.ndarray
    ext_mel: np.ndarray
    target: np.ndarray
    frame_mask: np.ndarray

    @property
    def target_logdur(self) -> np.ndarray:
        return np.log1p(self.durations.astype(np.float64))


def collate(examples: Sequence[TrainingExample], norm: MelNorm) -> Batch:
    """Pad examples to a common length. Training lengths use true durations, so
    the zero-filled region has exactly the masked word's original length."""
    n_max = max(len(ex.phonemes) for ex in examples)
    t_max = max(ex.true_durations.total for ex in examples)
    b = len(examples)
    n_mels = examples[0].target.n_mels
    ids = np.full((b, n_max), corpus.PAD_ID, dtype=np.int64)
    phone_mask = np.zeros((b, n_max))
    ref = np.zeros((b, n_max), dtype=np.int64)
    inserted = np.zeros((b, n_max), dtype=bool)
    durations = np.zeros((b, n_max), dtype=np.int64)
    ext = np.zeros((b, t_max, n_mels))
    target = np.zeros((b, t_max, n_mels))
    frame_mask = np.zeros((b, t_max))
    for i, ex in enumerate(examples):
        n = len(ex.phonemes)
        t = ex.true_durations.total
        ids[i, :n] = ex.phonemes.ids
        phone_mask[i, :n] = 1
        ref[i, :n] = ex.durations.frames
        inserted[i, :n] = ex.phonemes.inserted
        durations[i, :n] = ex.true_durations.frames
        normed = norm.apply(ex.target.frames)
        s = ex.script
        ext[i, :t] = extend_mel(normed, s.frame_offset, s.n_frames, s.removed_frames)
        target[i, :t] = normed
        frame_mask[i, :t] = 1
    return Batch(ids, phone_mask, ref, inserted, durations, ext, target, frame_mask)


def batch_loss(model: InsertionModel, batch: Batch, rng=None, step: int = 0) -> LossReport:
    mel, log_dur = model(batch.ids, batch.phone_mask, batch.ref, batch.inserted, batch.durations,
                         batch.ext_mel, rng)
    return compute_loss(mel, batch.target, log_dur, batch.target_logdur, batch.frame_mask,
                        batch.phone_mask, step)


# -- checkpoints ----------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model: InsertionModel
    norm: MelNorm
    step: int = 0
    epoch: int = 0
    val_loss: float | None = None

    @property
    def config(self) -> ModelConfig:
        return self.model.cfg


def save_checkpoint(path, ckpt: Checkpoint):
    meta = {"kind": "checkpoint", "model_config": ckpt.config.to_dict(),
            "mel_norm": {"mean": ckpt.norm.mean, "std": ckpt.norm.std},
            "step": ckpt.step, "epoch": ckpt.epoch, "val_loss": ckpt.val_loss,
            "inventory": corpus.INVENTORY}
    save_archive(path, ckpt.model.state_dict(), meta)


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = load_archive(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    with T.precision(np.float32):
        model = InsertionModel(cfg)
    model.load_state_dict(arrays)
    model.eval()
    norm = MelNorm(float(meta["mel_norm"]["mean"]), float(meta["mel_norm"]["std"]))
    return Checkpoint(model, norm, int(meta.get("step", 0)), int(meta.get("epoch", 0)), meta.get("val_loss"))


def _as_checkpoint(ckpt) -> Checkpoint:
    return ckpt if isinstance(ckpt, Checkpoint) else load_checkpoint(ckpt)


# -- training ---------------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[LossReport]
    val_history: list[float]
    best: Checkpoint | None = None

    @property
    def steps(self) -> int:
        return len(self.history)


def loss_csv(history: Sequence[LossReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "l2_mel", "l1_duration", "total"])
    for r in history:
        writer.writerow([r.step, repr(r.l2_mel), repr(r.l1_duration), repr(r.total)])
    return buf.getvalue()


def split_validation(utterances: list[Utterance], fraction: float = 0.1, min_size: int = 10):
    """Hold out the last ``fraction`` of the corpus when it has at least ``min_size`` items."""
    if len(utterances) < min_size or fraction <= 0:
        return utterances, []
    n_val = max(1, int(round(len(utterances) * fraction)))
    return utterances[:-n_val], utterances[-n_val:]


def _eligible(utterances):
    keep = [u for u in utterances if corpus.qualifying_words(u.phonemes)]
    if len(keep) < len(utterances):
        log.warning("skipping %d utterances without a multi-phoneme word", len(utterances) - len(keep))
    return keep


def validation_loss(model: InsertionModel, utterances: Sequence[Utterance], norm: MelNorm,
                    seed: int = 0, batch_size: int = 8) -> float:
    """Mean loss with one seeded masked word per utterance (dropout off)."""
    rng = np.random.default_rng(seed)
    examples = [corpus.make_training_example(u, rng) for u in utterances]
    was_training = model.training
    model.eval()
    values = []
    with T.no_grad():
        for i in range(0, len(examples), batch_size):
            report = batch_loss(model, collate(examples[i:i + batch_size], norm))
            values.extend(report.per_example.tolist())
    model.train(was_training)
    return float(np.mean(values))


def train(data, config: ModelConfig | None = None, epochs: int = 100, seed: int = 0,
          batch_size: int = 32, lr: float = 1e-3, out_dir=None, val_fraction: float = 0.1,
          max_steps: int | None = None, init: Checkpoint | None = None) -> TrainResult:
    """Train on a manifest path or a list of Utterances.

    Each epoch shuffles the training set and draws a fresh masked word per
    example. With ``out_dir`` the last and best checkpoints plus ``loss.csv``
    are rewritten after every epoch.
    """
    utterances = corpus.load_corpus(data) if isinstance(data, (str, Path)) else list(data)
    utterances = _eligible(utterances)
    if not utterances:
        raise ConfigError("dataset has no usable utterances")
    if batch_size < 1 or epochs < 0:
        raise ConfigError("batch_size must be >= 1 and epochs >= 0")
    train_set, val_set = split_validation(utterances, val_fraction)

    seeds = np.random.SeedSequence(seed).spawn(4)
    init_seed, shuffle_rng, mask_rng, drop_rng = (
        int(seeds[0].generate_state(1)[0]), *(np.random.default_rng(s) for s in seeds[1:]))
    if init is not None:
        model, norm = init.model, init.norm
    else:
        config = config or ModelConfig()
        with T.precision(np.float32):
            model = InsertionModel(config, seed=init_seed)
        norm = MelNorm.fit([u.mel.frames for u in train_set])
    model.train()
    opt = Adam(model.parameters(), lr=lr)
    out_dir = Path(out_dir) if out_dir is not None else None

    history: list[LossReport] = []
    val_history: list[float] = []
    best: Checkpoint | None = None
    best_loss = np.inf
    step = 0
    done = False
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(train_set))
        epoch_losses = []
        for i in range(0, len(order), batch_size):
            examples = [corpus.make_training_example(train_set[j], mask_rng) for j in order[i:i + batch_size]]
            step += 1
            report = batch_loss(model, collate(examples, norm), drop_rng, step)
            report.graph.backward()
            opt.step()
            report.graph = None
            history.append(report)
            epoch_losses.append(report.total)
            log.info("step=%d epoch=%d l2_mel=%.5f l1_duration=%.5f total=%.5f",
                     step, epoch, report.l2_mel, report.l1_duration, report.total)
            if max_steps is not None and step >= max_steps:
                done = True
                break
        score = validation_loss(model, val_set, norm, seed) if val_set else float(np.mean(epoch_losses))
        val_history.append(score)
        ckpt = Checkpoint(model, norm, step, epoch, score)
        if score < best_loss:
            best_loss = score
            best = Checkpoint(_clone(model), norm, step, epoch, score)
            if out_dir is not None:
                save_checkpoint(out_dir / "best", best)
        if out_dir is not None:
            save_checkpoint(out_dir / "last", ckpt)
            atomic_write_text(out_dir / "loss.csv", loss_csv(history))
        log.info("epoch=%d steps=%d val=%.5f seconds=%.2f", epoch, step, score, time.perf_counter() - t0)
        if done:
            break
    model.eval()
    return TrainResult(Checkpoint(model, norm, step, len(val_history), val_history[-1] if val_history else None),
                       history, val_history, best)


def _clone(model: InsertionModel) -> InsertionModel:
    twin = InsertionModel(model.cfg)
    twin.load_state_dict({k: v.copy() for k, v in model.state_dict().items()})
    twin.eval()
    return twin


# -- duration evaluation ------------------------------------------------------------------------

@dataclass
class DurationErrorReport:
    phoneme_level_error: float
    word_level_error: float
    n_words: int
    n_phonemes: int = 0

    def to_dict(self) -> dict:
        return {"phoneme_level_error": self.phoneme_level_error,
                "word_level_error": self.word_level_error,
                "n_words": self.n_words, "n_phonemes": self.n_phonemes}


def duration_errors(predicted: Sequence[np.ndarray], truth: Sequence[np.ndarray]) -> DurationErrorReport:
    """Phoneme error = mean |d_hat - d| over masked phonemes; word error = mean |sum d_hat - sum d|."""
    if not predicted:
        return DurationErrorReport(0.0, 0.0, 0, 0)
    phone_err = np.concatenate([np.abs(np.asarray(p, float) - np.asarray(t, float))
                                for p, t in zip(predicted, truth)])
    word_err = [abs(float(np.sum(p)) - float(np.sum(t))) for p, t in zip(predicted, truth)]
    return DurationErrorReport(float(phone_err.mean()), float(np.mean(word_err)), len(word_err), len(phone_err))


def predict_masked_durations(ckpt: Checkpoint, example: TrainingExample) -> np.ndarray:
    """Finalized (integer) predicted frames for the masked span of ``example``."""
    model = ckpt.model
    ids = example.phonemes.ids[None]
    mask = np.ones(ids.shape)
    with T.no_grad():
        model.eval()
        h = model.encode_text(ids, mask)
        log_dur = model.predict_log_durations(h, example.durations.frames[None],
                                              example.phonemes.inserted[None], mask)
    raw = log_to_frames(log_dur)[0]
    s, e = example.script.phoneme_span
    return np.maximum(1, np.floor(raw[s:e] + 0.5)).astype(np.int64)


def eval_duration(checkpoint, data, seed: int = 0) -> DurationErrorReport:
    """Mask one multi-phoneme word per utterance and score the predicted durations."""
    ckpt = _as_checkpoint(checkpoint)
    utterances = corpus.load_corpus(data) if isinstance(data, (str, Path)) else list(data)
    rng = np.random.default_rng(seed)
    predicted, truth = [], []
    for utt in utterances:
        try:
            ex = corpus.make_training_example(utt, rng)
        except SkipUtterance:
            continue
        s, e = ex.script.phoneme_span
        predicted.append(predict_masked_durations(ckpt, ex))
        truth.append(ex.true_durations.frames[s:e])
    return duration_errors(predicted, truth)


# -- inference ---------------------------------------------------------------------------------------

@dataclass
class EditResult:
    audio: dsp.AudioClip
    mel: np.ndarray            # predicted full-sentence log-mel [T, n_mels]
    durations: DurationTrack   # predicted track over the edited phoneme sequence
    phonemes: PhonemeSequence
    script: EditScript
    vocoded: dsp.AudioClip | None = None


def insertion_point(rec: AlignmentRecord, after_word: int) -> int:
    """Phone index right after word ``after_word`` (-1 inserts at the very start)."""
    n_words = max([p.word for p in rec.phones] + [len(rec.words) - 1])
    if after_word < -1 or after_word > n_words:
        raise InputError(f"insertion point after word {after_word} is invalid (utterance has {n_words + 1} words)")
    if after_word == -1:
        return 0
    where = [i for i, p in enumerate(rec.phones) if p.word == after_word]
    if not where:
        raise InputError(f"word {after_word} has no phones in the alignment")
    return where[-1] + 1


def _insert_phonemes(utt: Utterance, at: int, new_ids: Sequence[int], after_word: int) -> PhonemeSequence:
    base = utt.phonemes
    words = base.word_index.copy()
    words[(words > after_word) & (words >= 0)] += 1
    k = len(new_ids)
    ids = np.concatenate([base.ids[:at], np.asarray(new_ids, dtype=np.int64), base.ids[at:]])
    word_index = np.concatenate([words[:at], np.full(k, after_word + 1), words[at:]])
    inserted = np.concatenate([np.zeros(at, bool), np.ones(k, bool), np.zeros(len(base) - at, bool)])
    return PhonemeSequence(ids, word_index, inserted)


def infer_edit(checkpoint, audio: dsp.AudioClip, alignment: AlignmentRecord, after_word: int,
               phonemes: Sequence[str], word_text: str = "", seed: int = 0,
               n_iter: int = dsp.GL_ITERS) -> EditResult:
    """Insert ``phonemes`` after word ``after_word`` and return the spliced narration."""
    ckpt = _as_checkpoint(checkpoint)
    utt = corpus.load_utterance(alignment, audio=audio)
    at = insertion_point(utt.record, after_word)
    new_ids = [corpus.phone_to_id(p) for p in phonemes]
    offset = int(utt.durations.frames[:at].sum())
    if not new_ids:
        script = EditScript((at, at), offset, word_text, 0, 0)
        return EditResult(corpus.splice_output(audio, audio, script), utt.mel.frames.copy(),
                          DurationTrack(utt.durations.frames, "predicted"), utt.phonemes, script)

    seq = _insert_phonemes(utt, at, new_ids, after_word)
    ref = np.concatenate([utt.durations.frames[:at], np.zeros(len(new_ids), np.int64),
                          utt.durations.frames[at:]])
    normed = ckpt.norm.apply(utt.mel.frames)
    out, track, _ = ckpt.model.infer(seq.ids, DurationTrack(ref), seq.inserted, normed, offset)
    mel = ckpt.norm.invert(out)
    n_new = int(track.frames[seq.inserted].sum())
    script = EditScript((at, at + len(new_ids)), offset, word_text, n_new, 0)

    vocoded = dsp.vocode(mel, n_iter=n_iter, seed=seed)
    timeline = len(audio) + n_new * dsp.HOP
    samples = np.zeros(max(timeline, len(vocoded)))
    samples[: len(vocoded)] = vocoded.samples
    patched = dsp.AudioClip(samples, audio.sample_rate)
    spliced = corpus.splice_output(audio, patched, script)
    return EditResult(spliced, mel, track, seq, script, vocoded)


@dataclass
class ResynthResult:
    audio: dsp.AudioClip
    mel: np.ndarray
    provenance: list[dict]


def resynth_all(checkpoint, audio: dsp.AudioClip, alignment: AlignmentRecord, seed: int = 0,
                n_iter: int = dsp.GL_ITERS) -> ResynthResult:
    """Re-synthesize every word from its context and concatenate them in order.

    For each word: mask it (zero reference, its frames cut from the mel),
    predict its duration, decode, and keep the frames of the masked region.
    """
    ckpt = _as_checkpoint(checkpoint)
    utt = corpus.load_utterance(alignment, audio=audio)
    normed = ckpt.norm.apply(utt.mel.frames)
    pieces, provenance = [], []
    for word in sorted({int(w) for w in utt.phonemes.word_index if w >= 0}):
        ex = corpus.mask_word(utt, word)
        out, track, _ = ckpt.model.infer(ex.phonemes.ids, ex.durations, ex.phonemes.inserted, normed,
                                         ex.script.frame_offset, ex.script.removed_frames)
        n = int(track.frames[ex.phonemes.inserted].sum())
        start = ex.script.frame_offset
        pieces.append(out[start:start + n])
        provenance.append({"word": word, "text": ex.script.word_text, "frames": n,
                           "start_frame": int(sum(p["frames"] for p in provenance))})
    mel = ckpt.norm.invert(np.concatenate(pieces, axis=0))
    return ResynthResult(dsp.vocode(mel, n_iter=n_iter, seed=seed), mel, provenance)
