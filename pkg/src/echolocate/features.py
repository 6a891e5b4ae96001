"""Log-mel front end turning a K-channel clip into the network's state."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigurationError, InputTooShortError


@dataclass(frozen=True)
class FeatureConfig:
    f_s: int = 16000
    win: int = 512
    hop: int = 256
    n_mels: int = 64
    log_floor: float = 1e-10
    f_min: float = 0.0
    f_max: float | None = None  # None means f_s / 2

    def __post_init__(self) -> None:
        if self.hop < 1 or self.hop > self.win:
            raise ConfigurationError("need 1 <= hop <= win")
        if self.n_mels < 1:
            raise ConfigurationError("n_mels must be >= 1")
        if not self.log_floor > 0:
            raise ConfigurationError("log_floor must be positive")

    @property
    def upper(self) -> float:
        return self.f_s / 2 if self.f_max is None else self.f_max

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.win) // self.hop


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def mel_band_edges(config: FeatureConfig) -> np.ndarray:
    """``n_mels + 2`` frequencies (Hz); band ``b`` peaks at ``edges[b + 1]``."""
    m = np.linspace(hz_to_mel(config.f_min), hz_to_mel(config.upper), config.n_mels + 2)
    return mel_to_hz(m)


@lru_cache(maxsize=16)
def mel_filterbank(config: FeatureConfig) -> np.ndarray:
    """Triangular, peak-normalised filters of shape ``(n_mels, win // 2 + 1)``."""
    edges = mel_band_edges(config)
    freqs = np.fft.rfftfreq(config.win, 1.0 / config.f_s)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=16)
def _window(win: int) -> np.ndarray:
    # periodic Hann
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)
    w.setflags(write=False)
    return w


def logmel(waveform: np.ndarray, config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Log10 mel power spectrogram, shape ``(K, n_mels, frames)``, float32.

    A 1-D input is treated as a single channel.
    """
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    n = x.shape[-1]
    if n < config.win:
        raise InputTooShortError(f"need at least {config.win} samples, got {n}")
    frames = np.lib.stride_tricks.sliding_window_view(x, config.win, axis=-1)[:, :: config.hop, :]
    spec = np.fft.rfft(frames * _window(config.win), axis=-1)
    power = spec.real**2 + spec.imag**2
    mel = power @ mel_filterbank(config).T  # (K, frames, n_mels)
    out = np.log10(np.maximum(mel, config.log_floor))
    return np.ascontiguousarray(out.transpose(0, 2, 1), dtype=np.float32)
