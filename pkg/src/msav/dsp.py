"""Spectral front-end: WAV ingestion, resampling, log-mel features, standardization."""
from __future__ import annotations

import os
import wave
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import ftz


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"AudioClip holds mono samples, got shape {self.samples.shape}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelExtractorConfig:
    target_rate: int = 22050
    n_fft: int = 2048
    hop: int = 368
    n_mels: int = 128
    fmin: float = 0.0
    fmax: float = 11025.0
    log_floor: float = 1e-10
    log_base: str = "e"

    def __post_init__(self):
        if self.fmax > self.target_rate / 2:
            raise ValueError(f"fmax {self.fmax} exceeds Nyquist {self.target_rate / 2}")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.log_base not in ("e", "db"):
            raise ValueError(f"log_base must be 'e' or 'db', got {self.log_base!r}")


@dataclass
class BinStats:
    mean: np.ndarray
    std: np.ndarray
    eps: float = 1e-8

    def save(self, path: str | os.PathLike) -> None:
        ftz.save(path, np.stack([self.mean, self.std]))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "BinStats":
        arr = ftz.load(path)
        if arr.ndim != 2 or arr.shape[0] != 2:
            raise ValueError(f"{path}: stats file must have shape [2, n_mels], got {arr.shape}")
        return cls(arr[0].astype(np.float64), arr[1].astype(np.float64))


# -- WAV I/O --------------------------------------------------------------------


def read_wav(path: str | os.PathLike) -> AudioClip:
    """Read 16-bit PCM WAV; stereo is averaged to mono."""
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported (sample width {w.getsampwidth()})")
        channels = w.getnchannels()
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        pcm = pcm.reshape(-1, channels).mean(axis=1)
    return AudioClip(pcm, rate)


def write_wav(path: str | os.PathLike, clip: AudioClip, channels: int = 1) -> None:
    pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype("<i2")
    if channels > 1:
        pcm = np.repeat(pcm[:, None], channels, axis=1).reshape(-1)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(pcm.tobytes())


# -- waveform operations ---------------------------------------------------------


def peak_normalize(clip: AudioClip) -> AudioClip:
    peak = np.max(np.abs(clip.samples)) if clip.samples.size else 0.0
    if peak == 0:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    return AudioClip(clip.samples / peak, clip.sample_rate)


def resample_linear(clip: AudioClip, target_rate: int) -> AudioClip:
    """Linear-interpolation resampler; output length is ``round(n * target / source)``."""
    if clip.sample_rate <= 0:
        raise ValueError(f"source rate must be positive, got {clip.sample_rate}")
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    n = len(clip.samples)
    n_out = int(round(n * target_rate / clip.sample_rate))
    positions = np.arange(n_out) * (clip.sample_rate / target_rate)
    out = np.interp(positions, np.arange(n), clip.samples)
    return AudioClip(out, target_rate)


def segment(clip: AudioClip, n_segments: int = 10, seconds: float = 1.0) -> list[AudioClip]:
    """Cut the first ``n_segments * seconds`` into contiguous, non-overlapping pieces."""
    size = int(round(seconds * clip.sample_rate))
    if len(clip.samples) < n_segments * size:
        raise ValueError(
            f"clip of {len(clip.samples)} samples is shorter than {n_segments} x {size} samples"
        )
    return [AudioClip(clip.samples[k * size : (k + 1) * size].copy(), clip.sample_rate) for k in range(n_segments)]


# -- mel spectrogram ---------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_points(cfg: MelExtractorConfig) -> np.ndarray:
    """The ``n_mels + 2`` filter edge frequencies in Hz; entry ``i + 1`` is the centre of filter ``i``."""
    return mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))


def mel_filterbank(cfg: MelExtractorConfig) -> np.ndarray:
    """Triangular filters on the HTK mel scale with Slaney area normalization, ``[n_mels, n_fft//2 + 1]``."""
    fft_freqs = np.linspace(0.0, cfg.target_rate / 2, cfg.n_fft // 2 + 1)
    edges = mel_points(cfg)
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return weights


def power_spectrogram(samples: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Hann-windowed, centred, reflect-padded STFT power, ``[n_frames, n_fft//2 + 1]``."""
    if len(samples) < hop:
        raise ValueError(f"clip of {len(samples)} samples is shorter than one hop ({hop})")
    padded = np.pad(samples, n_fft // 2, mode="reflect")
    n_frames = 1 + len(samples) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    window = np.hanning(n_fft + 1)[:-1]
    return np.abs(np.fft.rfft(padded[idx] * window, axis=1)) ** 2


def log_mel(clip: AudioClip, cfg: MelExtractorConfig | None = None) -> np.ndarray:
    """Log-mel spectrogram ``[n_frames, n_mels]`` with ``n_frames = 1 + n // hop``."""
    cfg = cfg or MelExtractorConfig()
    if clip.sample_rate != cfg.target_rate:
        raise ValueError(f"clip is at {clip.sample_rate} Hz, extractor expects {cfg.target_rate} Hz")
    power = power_spectrogram(clip.samples, cfg.n_fft, cfg.hop)
    mel = power @ mel_filterbank(cfg).T
    mel = np.maximum(mel, cfg.log_floor)
    out = 10.0 * np.log10(mel) if cfg.log_base == "db" else np.log(mel)
    return out.astype(np.float32)


# -- per-bin standardization ---------------------------------------------------------


def fit_bin_stats(spectrograms: Iterable[np.ndarray], eps: float = 1e-8) -> BinStats:
    """Per-bin mean and population std over every frame of every training spectrogram."""
    specs = [np.asarray(s, dtype=np.float64) for s in spectrograms]
    if not specs:
        raise ValueError("cannot fit bin statistics on an empty training set")
    frames = np.concatenate(specs, axis=0)
    if frames.shape[0] < 2:
        raise ValueError("bin statistics need at least 2 frames")
    mean = frames.mean(axis=0)
    std = np.sqrt(((frames - mean) ** 2).mean(axis=0))
    return BinStats(mean, std, eps)


def standardize(spec: np.ndarray, stats: BinStats) -> np.ndarray:
    out = (np.asarray(spec, dtype=np.float64) - stats.mean) / (stats.std + stats.eps)
    return out.astype(np.float32)
