"""The context-aware insertion network.

Two streams are brought to a common frame rate and summed before a
non-autoregressive decoder:

* phonemes -> embedding + 3-layer CNN -> projection -> scaled PE -> text
  encoder -> (duration predictor) -> length regulator
* log-mel with the edited region zero-filled -> two FC layers -> scaled PE
  -> spectrogram encoder

All tensors are batched ``[B, L, C]`` with a 0/1 mask over L; a lone
utterance is a batch of one. Padding never leaks into real positions, so an
example produces the same output alone or inside a padded batch.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .corpus import INVENTORY, DurationTrack
from .errors import ContractError, InputError, ParameterError
from .nn import (Conv1d, Embedding, EncoderLayer, Linear, Module, SequenceNorm,
                 TransformerEncoder, parameter)
from .tensor import Tensor


@dataclass
class ModelConfig:
    phoneme_embed_dim: int = 512
    hidden_dim: int = 256
    heads: int = 4
    text_encoder_layers: int = 2
    spec_encoder_layers: int = 2
    decoder_layers: int = 5
    cnn_layers: int = 3
    cnn_kernel: int = 5
    dropout: float = 0.2
    ffn_inner_dim: int = 1024
    n_mels: int = 80
    n_phonemes: int = len(INVENTORY)

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise ParameterError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.cnn_kernel % 2 == 0:
            raise ParameterError(f"cnn_kernel must be odd, got {self.cnn_kernel}")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout must be in [0, 1), got {self.dropout}")

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Desk-scale config used by tests: hidden 32, one layer per stack."""
        base = dict(phoneme_embed_dim=32, hidden_dim=32, heads=4, text_encoder_layers=1,
                    spec_encoder_layers=1, decoder_layers=1, cnn_layers=1, ffn_inner_dim=64)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ParameterError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoid_table(length: int, dim: int) -> np.ndarray:
    """PE[pos, 2i] = sin(pos / 10000^(2i/dim)), PE[pos, 2i+1] = cos(same)."""
    pos = np.arange(length)[:, None]
    rates = 1.0 / 10000.0 ** (np.arange(0, dim, 2) / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates[: dim // 2])
    return table


class ScaledPositionalEncoding(Module):
    """``h + alpha * PE`` with a trainable scalar ``alpha`` (starts at 1)."""

    def __init__(self, dim: int):
        self.alpha = parameter(np.ones(1))
        self.dim = dim

    def forward(self, h: Tensor) -> Tensor:
        pe = Tensor(sinusoid_table(h.shape[-2], self.dim).astype(h.dtype))
        return h + self.alpha * pe


def scaled_positional_encoding(h: Tensor, alpha: Tensor) -> Tensor:
    pe = Tensor(sinusoid_table(h.shape[-2], h.shape[-1]).astype(h.dtype))
    return h + alpha * pe


def _mask3(mask: np.ndarray, dtype) -> Tensor:
    return Tensor(mask[..., None].astype(dtype))


class TextEmbedding(Module):
    """Phoneme embedding -> N x (conv, per-sequence batch norm, ReLU, dropout) -> linear."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        e = cfg.phoneme_embed_dim
        self.embed = Embedding(cfg.n_phonemes, e, rng)
        # conv bias is dropped: the following normalization would cancel it
        self.convs = [Conv1d(e, e, cfg.cnn_kernel, rng, bias=False) for _ in range(cfg.cnn_layers)]
        self.norms = [SequenceNorm(e) for _ in range(cfg.cnn_layers)]
        self.proj = Linear(e, cfg.hidden_dim, rng)
        self.p = cfg.dropout

    def forward(self, ids: np.ndarray, mask: np.ndarray, rng=None) -> Tensor:
        m = _mask3(mask, self.embed.weight.dtype)
        x = self.embed(ids) * m
        for conv, norm in zip(self.convs, self.norms):
            x = norm(conv(x), mask).relu()
            x = T.dropout(x, self.p, self.training, rng) * m
        return self.proj(x)


class DurationPredictor(Module):
    """Per-phoneme log(1 + frames) from encoded text plus the reference track.

    Input features per position are ``[h_text, log(1 + ref_frames), inserted]``;
    inserted positions carry a zero reference.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        h = cfg.hidden_dim
        self.inp = Linear(h + 2, h, rng)
        self.encoder = EncoderLayer(h, cfg.heads, cfg.ffn_inner_dim, cfg.dropout, rng)
        self.fc1 = Linear(h, h, rng)
        self.fc2 = Linear(h, 1, rng)

    def forward(self, h_text: Tensor, ref_frames: np.ndarray, inserted: np.ndarray,
                mask: np.ndarray, rng=None) -> Tensor:
        check_reference(ref_frames, inserted, mask)
        extra = np.stack([np.log1p(ref_frames), inserted.astype(float)], axis=-1).astype(h_text.dtype)
        x = self.inp(T.concat([h_text, Tensor(extra)], axis=-1))
        x = self.encoder(x, mask, rng)
        out = self.fc2(self.fc1(x).relu())
        return out.reshape(out.shape[:-1])


def check_reference(ref_frames: np.ndarray, inserted: np.ndarray, mask: np.ndarray | None = None):
    """Reference durations must be zero exactly on inserted (real) positions."""
    ref_frames = np.asarray(ref_frames)
    inserted = np.asarray(inserted, dtype=bool)
    real = np.ones_like(inserted) if mask is None else np.asarray(mask, dtype=bool)
    if np.any(ref_frames[inserted & real] != 0):
        raise ContractError("inserted phonemes must have a zero reference duration")
    if np.any(ref_frames[~inserted & real] <= 0):
        raise ContractError("non-inserted phonemes must have a positive reference duration")


def log_to_frames(log_durations) -> np.ndarray:
    """Invert the log(1 + d) parameterization, clamped at zero."""
    data = log_durations.data if isinstance(log_durations, Tensor) else np.asarray(log_durations)
    return np.maximum(np.expm1(data.astype(np.float64)), 0.0)


def finalize_durations(predicted, ref: DurationTrack, inserted) -> DurationTrack:
    """Reference frames for existing phonemes; ``max(1, round_half_up(d))`` for inserted ones."""
    predicted = np.asarray(predicted, dtype=np.float64)
    inserted = np.asarray(inserted, dtype=bool)
    frames = ref.frames.copy()
    frames[inserted] = np.maximum(1, np.floor(predicted[inserted] + 0.5)).astype(np.int64)
    return DurationTrack(frames, "predicted")


def regulator_index(durations: np.ndarray) -> np.ndarray:
    durations = np.asarray(durations, dtype=np.int64)
    if np.any(durations < 0):
        raise ContractError("durations must be non-negative")
    return np.repeat(np.arange(len(durations)), durations)


def length_regulator(h: Tensor, durations) -> Tensor:
    """Repeat row i of ``h`` ``durations[i]`` times (``[N, C]`` -> ``[sum(d), C]``)."""
    frames = durations.frames if isinstance(durations, DurationTrack) else np.asarray(durations)
    if len(frames) != h.shape[-2]:
        raise ContractError(f"{len(frames)} durations for {h.shape[-2]} positions")
    return T.gather_rows(h, regulator_index(frames))


def batch_regulator_index(durations: np.ndarray, phone_mask: np.ndarray):
    """Per-example gather indices ``[B, T_max]`` and the frame mask."""
    per = [regulator_index(d[m > 0]) for d, m in zip(durations, phone_mask)]
    t_max = max(1, max(len(p) for p in per))
    index = np.zeros((len(per), t_max), dtype=np.int64)
    mask = np.zeros((len(per), t_max), dtype=np.float64)
    for b, p in enumerate(per):
        index[b, : len(p)] = p
        mask[b, : len(p)] = 1.0
    return index, mask


def extend_mel(mel: np.ndarray, frame_offset: int, insert_frames: int,
               removed_frames: int = 0) -> np.ndarray:
    """Cut ``removed_frames`` at ``frame_offset`` and put ``insert_frames`` zero rows there."""
    mel = np.asarray(mel)
    if insert_frames < 0 or removed_frames < 0:
        raise ContractError("frame counts must be non-negative")
    if not 0 <= frame_offset <= mel.shape[0] or frame_offset + removed_frames > mel.shape[0]:
        raise ContractError(f"edit at frame {frame_offset} (+{removed_frames}) outside a {mel.shape[0]}-frame mel")
    hole = np.zeros((insert_frames, mel.shape[1]), dtype=mel.dtype)
    return np.concatenate([mel[:frame_offset], hole, mel[frame_offset + removed_frames:]], axis=0)


class SpectrogramEmbedding(Module):
    """FC -> ReLU -> FC -> ReLU, then scaled positional encoding."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.fc1 = Linear(cfg.n_mels, cfg.hidden_dim, rng)
        self.fc2 = Linear(cfg.hidden_dim, cfg.hidden_dim, rng)
        self.pe = ScaledPositionalEncoding(cfg.hidden_dim)

    def forward(self, mel: Tensor, with_pe: bool = True) -> Tensor:
        h = self.fc2(self.fc1(mel).relu()).relu()
        return self.pe(h) if with_pe else h


class InsertionModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        h = cfg.hidden_dim
        self.text_embedding = TextEmbedding(cfg, rng)
        self.text_pe = ScaledPositionalEncoding(h)
        self.text_encoder = TransformerEncoder(cfg.text_encoder_layers, h, cfg.heads,
                                               cfg.ffn_inner_dim, cfg.dropout, rng)
        self.duration_predictor = DurationPredictor(cfg, rng)
        self.spec_embedding = SpectrogramEmbedding(cfg, rng)
        self.spec_encoder = TransformerEncoder(cfg.spec_encoder_layers, h, cfg.heads,
                                               cfg.ffn_inner_dim, cfg.dropout, rng)
        self.decoder = TransformerEncoder(cfg.decoder_layers, h, cfg.heads,
                                          cfg.ffn_inner_dim, cfg.dropout, rng)
        self.mel_out = Linear(h, cfg.n_mels, rng)

    # -- stages ---------------------------------------------------------------
    def encode_text(self, ids: np.ndarray, phone_mask: np.ndarray, rng=None) -> Tensor:
        ids = np.asarray(ids)
        if ids.size == 0:
            raise InputError("empty phoneme sequence")
        if np.any((ids < 0) | (ids >= self.cfg.n_phonemes)):
            raise InputError("phoneme id outside the inventory")
        h = self.text_pe(self.text_embedding(ids, phone_mask, rng))
        return self.text_encoder(h, phone_mask, rng)

    def predict_log_durations(self, h_text: Tensor, ref_frames, inserted, phone_mask, rng=None) -> Tensor:
        return self.duration_predictor(h_text, np.asarray(ref_frames), np.asarray(inserted),
                                       phone_mask, rng)

    def encode_spectrogram(self, ext_mel: np.ndarray, frame_mask: np.ndarray, rng=None) -> Tensor:
        dtype = self.mel_out.weight.dtype
        h = self.spec_embedding(Tensor(np.asarray(ext_mel, dtype=dtype)))
        return self.spec_encoder(h, frame_mask, rng)

    def fuse_and_decode(self, h_text_ext: Tensor, h_mel_ext: Tensor, frame_mask: np.ndarray,
                        rng=None) -> Tensor:
        if h_text_ext.shape != h_mel_ext.shape:
            raise ContractError(f"stream lengths differ: text {h_text_ext.shape} vs mel {h_mel_ext.shape}")
        fused = h_text_ext + h_mel_ext
        return self.mel_out(self.decoder(fused, frame_mask, rng))

    # -- full passes ------------------------------------------------------------
    def forward(self, ids, phone_mask, ref_frames, inserted, durations, ext_mel, rng=None):
        """Training pass with ground-truth durations. Returns (mel, log_durations)."""
        h_text = self.encode_text(ids, phone_mask, rng)
        log_dur = self.predict_log_durations(h_text, ref_frames, inserted, phone_mask, rng)
        index, frame_mask = batch_regulator_index(durations, phone_mask)
        if ext_mel.shape[1] != index.shape[1]:
            raise ContractError(f"extended mel has {ext_mel.shape[1]} frames, regulated text {index.shape[1]}")
        h_text_ext = T.gather_rows(h_text, index) * _mask3(frame_mask, h_text.dtype)
        h_mel_ext = self.encode_spectrogram(ext_mel, frame_mask, rng)
        mel = self.fuse_and_decode(h_text_ext, h_mel_ext, frame_mask, rng)
        return mel, log_dur

    def infer(self, ids: np.ndarray, ref: DurationTrack, inserted: np.ndarray, mel: np.ndarray,
              frame_offset: int, removed_frames: int = 0):
        """Single-utterance inference with predicted durations.

        ``mel`` is the (normalized) original spectrogram; the edit region starting
        at ``frame_offset`` is cut (``removed_frames``) and replaced by zeros of
        the predicted length. Returns (decoded mel ``[T, n_mels]``, predicted
        DurationTrack, raw predicted durations).
        """
        ids = np.asarray(ids)[None]
        inserted = np.asarray(inserted, dtype=bool)
        mask = np.ones(ids.shape)
        with T.no_grad():
            self.eval()
            h_text = self.encode_text(ids, mask)
            log_dur = self.predict_log_durations(h_text, ref.frames[None], inserted[None], mask)
            raw = log_to_frames(log_dur)[0]
            track = finalize_durations(raw, ref, inserted)
            n_insert = int(track.frames[inserted].sum())
            ext = extend_mel(mel, frame_offset, n_insert, removed_frames)
            h_text_ext = length_regulator(h_text[0], track)[None]
            frame_mask = np.ones((1, h_text_ext.shape[1]))
            if ext.shape[0] != h_text_ext.shape[1]:
                raise ContractError(f"extended mel has {ext.shape[0]} frames, regulated text {h_text_ext.shape[1]}")
            h_mel_ext = self.encode_spectrogram(ext[None], frame_mask)
            out = self.fuse_and_decode(h_text_ext, h_mel_ext, frame_mask)
        return out.data[0], track, raw
