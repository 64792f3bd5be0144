"""
audio_frontend.py
=================

Mono waveform to log-Mel filterbank spectrogram: Hamming-windowed frames, power spectrum,
area-normalized triangular Mel filters and a floored natural log. Everything here is a
pure function of its inputs.
"""

from typing import Iterable, Tuple

import numpy as np
from pydantic import BaseModel
from scipy.signal import get_window

from .errors import ConfigurationError, DataError
from .types import AudioFrontendConfig


class Spectrogram(BaseModel):
    """`grid` is (n_mels, frames) log energy; `frame_count` is the frame count before pad/crop."""

    grid: np.ndarray
    frame_count: int

    class Config:
        arbitrary_types_allowed = True

    @property
    def shape(self) -> Tuple[int, int]:
        return self.grid.shape


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def fft_size(window_length: int) -> int:
    return int(2 ** np.ceil(np.log2(window_length)))


def mel_band_edges(cfg: AudioFrontendConfig) -> np.ndarray:
    """The n_mels + 2 band edges in Hz; filter k spans edges[k]..edges[k + 2] and peaks at edges[k + 1]."""
    mels = np.linspace(hz_to_mel(cfg.mel_fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return mel_to_hz(mels)


def mel_center_frequencies(cfg: AudioFrontendConfig) -> np.ndarray:
    return mel_band_edges(cfg)[1:-1]


def mel_filterbank(cfg: AudioFrontendConfig) -> np.ndarray:
    """(n_mels, n_fft // 2 + 1) triangular filters, each scaled to unit area."""
    n_fft = fft_size(cfg.window_length)
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / cfg.sample_rate)
    edges = mel_band_edges(cfg)

    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights *= (2.0 / (upper - lower))
    return weights


def frame_count(num_samples: int, cfg: AudioFrontendConfig) -> int:
    return (num_samples - cfg.window_length) // cfg.hop_length + 1


def waveform_to_logmel(wave: np.ndarray, cfg: AudioFrontendConfig) -> Spectrogram:
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1 or wave.size == 0:
        raise DataError("expected a non-empty mono waveform, got shape %s" % (wave.shape,))
    if cfg.fmax > cfg.sample_rate / 2.0:
        raise ConfigurationError(
            "mel_fmax %g Hz exceeds the Nyquist frequency of %d Hz audio" % (cfg.fmax, cfg.sample_rate),
            keys=["frontend.mel_fmax", "frontend.sample_rate"],
        )
    if wave.size < cfg.window_length:
        raise DataError("waveform of %d samples is shorter than one %d-sample window" % (wave.size, cfg.window_length))

    # No padding: a partial window at the tail is dropped.
    frames = np.lib.stride_tricks.sliding_window_view(wave, cfg.window_length)[:: cfg.hop_length]
    frames = frames * get_window("hamming", cfg.window_length, fftbins=False)

    n_fft = fft_size(cfg.window_length)
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=-1)) ** 2
    energies = power @ mel_filterbank(cfg).T
    grid = np.log(np.maximum(energies, cfg.log_floor)).T
    return Spectrogram(grid=grid.astype(np.float32), frame_count=grid.shape[1])


def pad_or_crop(spec: Spectrogram, target_frames: int) -> Spectrogram:
    """Zero-pad or truncate the tail of the frame axis to exactly `target_frames`."""
    n_mels, frames = spec.grid.shape
    if frames >= target_frames:
        grid = spec.grid[:, :target_frames]
    else:
        grid = np.concatenate([spec.grid, np.zeros((n_mels, target_frames - frames), dtype=spec.grid.dtype)], axis=1)
    return Spectrogram(grid=np.ascontiguousarray(grid), frame_count=spec.frame_count)


def normalize(spec: Spectrogram, mean: float, std: float) -> Spectrogram:
    if not std > 0:
        raise ConfigurationError("audio std must be positive, got %g" % std, keys=["frontend.audio_std"])
    grid = ((spec.grid - mean) / (2.0 * std)).astype(np.float32)
    return Spectrogram(grid=grid, frame_count=spec.frame_count)


def compute_stats(specs: Iterable[Spectrogram]) -> Tuple[float, float]:
    """Dataset-level mean and standard deviation of raw (un-normalized) log-Mel values."""
    total, total_sq, count = 0.0, 0.0, 0
    for spec in specs:
        grid = spec.grid.astype(np.float64)
        total += grid.sum()
        total_sq += (grid ** 2).sum()
        count += grid.size
    if count == 0:
        raise DataError("cannot compute statistics of an empty dataset")
    mean = total / count
    return float(mean), float(np.sqrt(max(total_sq / count - mean ** 2, 0.0)))


def spectrogram_from_waveform(wave: np.ndarray, cfg: AudioFrontendConfig) -> Spectrogram:
    """The full front end: log-Mel, normalization with the configured stats, then pad/crop."""
    spec = waveform_to_logmel(wave, cfg)
    spec = normalize(spec, cfg.audio_mean, cfg.audio_std)
    return pad_or_crop(spec, cfg.target_frames)
