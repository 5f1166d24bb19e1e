"""Short-time Fourier analysis and synthesis.

Square-root-Hann windows on both sides, 50% overlap, frames zero-padded to
the FFT size. With the periodic Hann window the squared analysis window
overlap-adds to exactly one, so an unmodified analysis/synthesis round trip
reconstructs the interior of the signal to floating-point precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FRAME_DURATION_S = 0.0125


def sqrt_hann(n: int) -> np.ndarray:
    """Square root of the periodic Hann window."""
    return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n))


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 16000
    frame_len: int = 200
    fft_size: int = 256
    hop: int = 100

    def __post_init__(self):
        if self.frame_len < 2 or self.frame_len % 2:
            raise ValueError("frame_len must be a positive even sample count")
        if self.hop != self.frame_len // 2:
            raise ValueError("hop must equal frame_len/2 (50% overlap)")
        if self.fft_size < self.frame_len:
            raise ValueError("fft_size must be at least frame_len")
        win_sq = sqrt_hann(self.frame_len) ** 2
        ola = win_sq[: self.hop] + win_sq[self.hop:]
        if np.max(np.abs(ola - 1.0)) > 1e-10:
            raise ValueError("window fails the constant overlap-add check")

    @classmethod
    def for_rate(cls, sample_rate: int, fft_size: int = 256) -> "StftConfig":
        """Config with the standard 12.5 ms frame at the given rate."""
        frame_len = int(round(FRAME_DURATION_S * sample_rate))
        return cls(sample_rate=sample_rate, frame_len=frame_len,
                   fft_size=fft_size, hop=frame_len // 2)

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def bin_freqs_hz(self) -> np.ndarray:
        return np.arange(self.n_bins) * self.sample_rate / self.fft_size

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.frame_len:
            raise ValueError("signal shorter than one frame")
        return 1 + (n_samples - self.frame_len) // self.hop


def analyze(config: StftConfig, signal: np.ndarray) -> np.ndarray:
    """Windowed, zero-padded STFT keeping bins 0..fft_size/2.

    ``signal`` is (n,) for mono or (channels, n) for multichannel. Returns
    (n_bins, n_frames) or (n_bins, n_frames, channels) complex frames.
    """
    sig = np.asarray(signal, dtype=float)
    mono = sig.ndim == 1
    if mono:
        sig = sig[None, :]
    if sig.ndim != 2:
        raise ValueError("signal must be 1-D or (channels, samples)")
    if sig.shape[1] == 0:
        raise ValueError("empty signal")
    n_frames = config.n_frames(sig.shape[1])
    window = sqrt_hann(config.frame_len)
    frames = np.lib.stride_tricks.sliding_window_view(
        sig, config.frame_len, axis=1)[:, :: config.hop][:, :n_frames]
    spec = np.fft.rfft(frames * window, n=config.fft_size, axis=2)
    spec = np.transpose(spec, (2, 1, 0))  # (bins, frames, channels)
    return spec[:, :, 0] if mono else spec


def synthesize(config: StftConfig, frames: np.ndarray) -> np.ndarray:
    """Overlap-add synthesis of (n_bins, n_frames) complex frames.

    Each frame is inverse-transformed, truncated to the analysis frame
    length, weighted with the synthesis sqrt-Hann window and overlap-added.
    """
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise ValueError("frames must be (n_bins, n_frames)")
    if frames.shape[0] != config.n_bins:
        raise ValueError(
            f"expected {config.n_bins} bins, got {frames.shape[0]}")
    n_frames = frames.shape[1]
    window = sqrt_hann(config.frame_len)
    segs = np.fft.irfft(frames, n=config.fft_size, axis=0)[: config.frame_len]
    segs = segs * window[:, None]
    out = np.zeros((n_frames - 1) * config.hop + config.frame_len)
    for l in range(n_frames):
        start = l * config.hop
        out[start: start + config.frame_len] += segs[:, l]
    return out


def interior_slice(config: StftConfig, n_samples: int) -> slice:
    """Sample range where overlap-add is complete (half-frame edges cut)."""
    return slice(config.hop, n_samples - config.hop)
