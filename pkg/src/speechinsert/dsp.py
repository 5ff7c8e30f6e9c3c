"""Waveform <-> mel-spectrogram conversions and Griffin-Lim vocoding.

Framing: 24 kHz audio, 1200-sample (50 ms) periodic Hann window zero-padded
to a 2048-point FFT, 300-sample (12.5 ms) hop, centered frames with reflect
padding, so a clip of ``n`` samples yields ``n // 300 + 1`` frames.
Log-mel values are ``log(max(mel_energy, 1e-5))`` on magnitude spectra.
"""
from __future__ import annotations

import functools
import io
import warnings
import wave
from dataclasses import dataclass, field

import numpy as np

from .archive import atomic_write_bytes
from .errors import InputError, ParameterError

SAMPLE_RATE = 24000
HOP = 300
WIN = 1200
N_FFT = 2048
N_MELS = 80
LOG_FLOOR = 1e-5
GL_ITERS = 60
HOP_SECONDS = HOP / SAMPLE_RATE
WIN_SECONDS = WIN / SAMPLE_RATE


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.samples)):
            raise InputError("audio contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def seconds(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # T x n_mels log-mel
    hop_seconds: float = HOP_SECONDS
    win_seconds: float = WIN_SECONDS
    n_mels: int = field(default=N_MELS)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[1] != self.n_mels:
            raise InputError(f"mel frames must be T x {self.n_mels}, got {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray  # n_mels x (n_fft // 2 + 1)
    fmin: float
    fmax: float
    sample_rate: int
    n_fft: int

    @functools.cached_property
    def pinv(self) -> np.ndarray:
        return np.linalg.pinv(self.weights)


def hann(n: int) -> np.ndarray:
    """Periodic Hann window (the DFT-even variant used for spectral analysis)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


@functools.lru_cache(maxsize=None)
def _fft_window() -> np.ndarray:
    w = np.zeros(N_FFT)
    left = (N_FFT - WIN) // 2
    w[left:left + WIN] = hann(WIN)
    w.setflags(write=False)
    return w


def _samples(audio) -> np.ndarray:
    if isinstance(audio, AudioClip):
        return audio.samples
    return np.asarray(audio, dtype=np.float64).reshape(-1)


def stft(audio) -> np.ndarray:
    """Complex STFT, shape ``[T, n_fft // 2 + 1]``."""
    x = _samples(audio)
    if x.size == 0:
        raise InputError("cannot analyse an empty clip")
    pad = N_FFT // 2
    mode = "reflect" if x.size > 1 else "constant"
    padded = np.pad(x, pad, mode=mode)
    frames = np.lib.stride_tricks.sliding_window_view(padded, N_FFT)[::HOP]
    return np.fft.rfft(frames * _fft_window(), axis=-1)


def istft(spec: np.ndarray) -> np.ndarray:
    """Least-squares inverse of ``stft``; returns ``(T - 1) * hop`` samples."""
    n_frames = spec.shape[0]
    window = _fft_window()
    frames = np.fft.irfft(spec, n=N_FFT, axis=-1) * window
    total = N_FFT + HOP * (n_frames - 1)
    signal = np.zeros(total)
    norm = np.zeros(total)
    for t in range(n_frames):
        start = t * HOP
        signal[start:start + N_FFT] += frames[t]
        norm[start:start + N_FFT] += window ** 2
    nonzero = norm > 1e-10
    signal[nonzero] /= norm[nonzero]
    start = N_FFT // 2
    return signal[start:start + HOP * (n_frames - 1)]


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz,
                    min_log_mel + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep,
                    f / f_sp)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def build_mel_filterbank(n_fft: int = N_FFT, sr: int = SAMPLE_RATE, n_mels: int = N_MELS,
                         fmin: float = 0.0, fmax: float | None = None) -> MelFilterbank:
    """Slaney-style triangular filters with area (2 / bandwidth) normalization."""
    if fmax is None:
        fmax = sr / 2.0
    if not (0.0 <= fmin < fmax <= sr / 2.0):
        raise ParameterError(f"invalid mel band fmin={fmin} fmax={fmax} for sr={sr}")
    fft_freqs = np.linspace(0.0, sr / 2.0, n_fft // 2 + 1)
    mel_pts = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    widths = np.diff(mel_pts)
    ramps = mel_pts[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (mel_pts[2:] - mel_pts[:-2]))[:, None]
    if np.any(weights.sum(axis=1) <= 0):
        raise ParameterError("mel band too narrow for this FFT size: empty filters")
    weights.setflags(write=False)
    return MelFilterbank(weights, float(fmin), float(fmax), sr, n_fft)


@functools.lru_cache(maxsize=None)
def default_filterbank() -> MelFilterbank:
    return build_mel_filterbank()


def wav_to_mel(clip, fb: MelFilterbank | None = None) -> MelSpectrogram:
    fb = fb or default_filterbank()
    mag = np.abs(stft(clip))
    energy = mag @ fb.weights.T
    return MelSpectrogram(np.log(np.maximum(energy, LOG_FLOOR)))


def mel_to_linear(mel, fb: MelFilterbank | None = None) -> np.ndarray:
    """Recover linear magnitudes ``max(pinv(fb) @ exp(mel), 0)``, shape ``[T, n_fft // 2 + 1]``."""
    fb = fb or default_filterbank()
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    if not np.all(np.isfinite(frames)):
        raise InputError("mel spectrogram contains non-finite values")
    if frames.shape[-1] != fb.weights.shape[0]:
        raise InputError(f"mel has {frames.shape[-1]} bins, filterbank has {fb.weights.shape[0]}")
    return np.maximum(np.exp(frames) @ fb.pinv.T, 0.0)


def spectral_convergence(x: np.ndarray, mag: np.ndarray) -> float:
    """``|| |STFT(x)| - mag || / || mag ||`` (0 when ``mag`` is all zero and matched)."""
    diff = np.linalg.norm(np.abs(stft(x)) - mag)
    ref = np.linalg.norm(mag)
    return float(diff / ref) if ref > 0 else float(diff)


def griffin_lim_trace(mag: np.ndarray, n_iter: int = GL_ITERS,
                      seed: int = 0) -> tuple[AudioClip, list[float]]:
    """Griffin-Lim with the spectral-convergence error recorded after each iteration."""
    mag = np.asarray(mag, dtype=np.float64)
    if np.any(mag < 0):
        raise InputError("magnitudes must be non-negative")
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    ref = np.linalg.norm(mag)
    errors = []
    x = np.zeros(HOP * (mag.shape[0] - 1))
    for _ in range(n_iter):
        x = istft(mag * phase)
        rebuilt = stft(x) if x.size else np.zeros(mag.shape, dtype=complex)
        absr = np.abs(rebuilt)
        errors.append(float(np.linalg.norm(absr - mag) / ref) if ref > 0 else 0.0)
        phase = np.where(absr > 1e-12, rebuilt / np.maximum(absr, 1e-12), 1.0)
    return AudioClip(x), errors


def griffin_lim(mag: np.ndarray, n_iter: int = GL_ITERS, seed: int = 0) -> AudioClip:
    """Reconstruct a waveform of ``(T - 1) * hop`` samples from STFT magnitudes."""
    return griffin_lim_trace(mag, n_iter, seed)[0]


def vocode(mel, fb: MelFilterbank | None = None, n_iter: int = GL_ITERS, seed: int = 0) -> AudioClip:
    return griffin_lim(mel_to_linear(mel, fb), n_iter, seed)


# -- WAV I/O -----------------------------------------------------------------

def resample_linear(x: np.ndarray, sr_in: int, sr_out: int) -> np.ndarray:
    if sr_in == sr_out or x.size == 0:
        return x
    n_out = int(round(x.size * sr_out / sr_in))
    t_out = np.arange(n_out) * (sr_in / sr_out)
    return np.interp(t_out, np.arange(x.size), x)


def read_wav(path) -> AudioClip:
    """Read 16-bit PCM mono; other rates are linearly resampled to 24 kHz."""
    try:
        with wave.open(str(path), "rb") as fh:
            channels, width, rate = fh.getnchannels(), fh.getsampwidth(), fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (OSError, EOFError, wave.Error) as exc:
        raise InputError(f"cannot read WAV {path}: {exc}") from exc
    if width != 2:
        raise InputError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        raise InputError(f"{path}: expected mono audio, got {channels} channels")
    if rate != SAMPLE_RATE:
        warnings.warn(f"{path}: resampling {rate} Hz -> {SAMPLE_RATE} Hz (linear interpolation)")
        x = resample_linear(x, rate, SAMPLE_RATE)
    return AudioClip(x, SAMPLE_RATE)


def wav_bytes(clip: AudioClip) -> bytes:
    pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(clip.sample_rate)
        fh.writeframes(pcm.tobytes())
    return buf.getvalue()


def write_wav(path, clip: AudioClip):
    atomic_write_bytes(path, wav_bytes(clip))
