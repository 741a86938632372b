"""Deterministic signal-processing primitives.

Resampling, framing/STFT, linear-phase FIR high-pass design, and assembly
of the stacked real/imaginary STFT feature. All functions are pure and
safe to call from multiple threads.

Conventions (fixed, not tunable):
  * framing is left-aligned with right zero-padding, T = ceil(len / hop)
  * Hamming coefficients 0.54 - 0.46*cos(2*pi*k/(N-1))
  * per-utterance peak normalization is available via `peak_normalize`
    and applied by feature-extraction callers, not inside `stft`
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import fftconvolve, resample_poly


class InvalidArgument(ValueError):
    """Raised when an operation precondition is violated."""


@dataclass(frozen=True)
class Waveform:
    """Mono sample sequence with its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if self.sample_rate <= 0:
            raise InvalidArgument(f"sample_rate must be positive, got {self.sample_rate}")
        if samples.ndim != 1:
            raise InvalidArgument(f"waveform must be mono 1-D, got shape {samples.shape}")
        if samples.size and not np.all(np.isfinite(samples)):
            raise InvalidArgument("waveform contains NaN or Inf")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class FrameConfig:
    """STFT framing parameters (window length, hop, FFT size in samples)."""

    window_len: int
    hop: int
    fft_size: int
    window_kind: str = "hamming"

    def __post_init__(self):
        if not (0 < self.hop <= self.window_len <= self.fft_size):
            raise InvalidArgument(
                f"need 0 < hop <= window_len <= fft_size, got "
                f"hop={self.hop} window_len={self.window_len} fft_size={self.fft_size}"
            )
        if self.window_kind != "hamming":
            raise InvalidArgument(f"unsupported window kind: {self.window_kind}")

    @classmethod
    def for_rate(cls, sample_rate: int, window_ms: float = 128.0, hop_ms: float = 10.0,
                 fft_size: int | None = None) -> "FrameConfig":
        """Derive the framing config from a sample rate (128 ms window, 10 ms hop)."""
        window_len = int(round(sample_rate * window_ms / 1000.0))
        hop = int(round(sample_rate * hop_ms / 1000.0))
        if fft_size is None:
            fft_size = window_len
        return cls(window_len=window_len, hop=hop, fft_size=fft_size)

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        """Frame count for a signal of n_samples: ceil(n / hop)."""
        if n_samples <= 0:
            raise InvalidArgument("empty signal")
        return -(-n_samples // self.hop)

    def window(self) -> np.ndarray:
        n = self.window_len
        k = np.arange(n)
        return 0.54 - 0.46 * np.cos(2.0 * np.pi * k / (n - 1))


@dataclass(frozen=True)
class ComplexSpectrogram:
    """T x F one-sided complex STFT with its framing config."""

    values: np.ndarray
    frame_config: FrameConfig
    sample_rate: int

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != self.frame_config.n_bins:
            raise InvalidArgument(
                f"spectrogram shape {self.values.shape} inconsistent with "
                f"F={self.frame_config.n_bins}"
            )

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FeatureTensor:
    """T x 2F real matrix: real parts in columns [0, F), imaginary in [F, 2F)."""

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] % 2 != 0:
            raise InvalidArgument(f"feature tensor must be T x 2F, got {self.values.shape}")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1] // 2


@dataclass(frozen=True)
class FirFilter:
    """Linear-phase FIR filter taps with integer group delay."""

    taps: np.ndarray
    group_delay: int
    design_meta: dict = field(default_factory=dict)

    def frequency_response(self, freqs_hz: np.ndarray, sample_rate: int) -> np.ndarray:
        """Complex DTFT of the taps at the given frequencies."""
        freqs_hz = np.atleast_1d(np.asarray(freqs_hz, dtype=np.float64))
        k = np.arange(self.taps.size)
        phase = -2j * np.pi * np.outer(freqs_hz / sample_rate, k)
        return np.exp(phase) @ self.taps


def peak_normalize(wave: Waveform) -> Waveform:
    """Scale so max|s| = 1; all-zero input is returned unchanged."""
    peak = np.max(np.abs(wave.samples)) if len(wave) else 0.0
    if peak == 0.0:
        return wave
    return Waveform(wave.samples / peak, wave.sample_rate)


def _resample_filter(up: int, down: int) -> np.ndarray:
    """Kaiser windowed-sinc anti-alias filter for a polyphase up/down stage.

    Passband to 0.45 and stopband from 0.5 of the narrower Nyquist,
    ~80 dB stopband attenuation.
    """
    max_rate = max(up, down)
    atten = 80.0
    beta = 0.1102 * (atten - 8.7)
    # transition 0.05/max_rate cycles/sample at the upsampled rate
    delta_w = 2.0 * np.pi * 0.05 / max_rate
    n_taps = int(np.ceil((atten - 7.95) / (2.285 * delta_w)))
    if n_taps % 2 == 0:
        n_taps += 1
    half = n_taps // 2
    fc = 0.475 / max_rate  # cycles/sample, center of the transition band
    m = np.arange(n_taps) - half
    taps = 2.0 * fc * np.sinc(2.0 * fc * m) * np.kaiser(n_taps, beta)
    return taps / taps.sum()


def resample(wave: Waveform, target_rate: int) -> Waveform:
    """Polyphase rational-ratio resampling with a windowed-sinc anti-alias filter."""
    if target_rate <= 0:
        raise InvalidArgument(f"target_rate must be positive, got {target_rate}")
    if target_rate == wave.sample_rate:
        return Waveform(wave.samples.copy(), wave.sample_rate)
    ratio = Fraction(target_rate, wave.sample_rate)
    up, down = ratio.numerator, ratio.denominator
    out = resample_poly(wave.samples, up, down, window=_resample_filter(up, down))
    return Waveform(out, target_rate)


def stft(wave: Waveform, cfg: FrameConfig) -> ComplexSpectrogram:
    """Hamming-windowed one-sided STFT, left-aligned frames, right zero-padding."""
    x = wave.samples
    if x.size == 0:
        raise InvalidArgument("empty signal")
    n_frames = cfg.n_frames(x.size)
    padded_len = (n_frames - 1) * cfg.hop + cfg.window_len
    padded = np.zeros(padded_len, dtype=np.float64)
    padded[: x.size] = x
    idx = np.arange(cfg.window_len)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    frames = padded[idx] * cfg.window()[None, :]
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=1)
    return ComplexSpectrogram(spec, cfg, wave.sample_rate)


def design_kaiser_highpass(beta: float, n: int, cutoff_hz: float, sample_rate: int) -> FirFilter:
    """Linear-phase Kaiser high-pass of order n (n + 1 taps).

    Built by spectral inversion of a Kaiser windowed-sinc low-pass whose DC
    gain is normalized to one, so the high-pass response is exactly zero at DC.
    """
    if n <= 0 or n % 2 != 0:
        raise InvalidArgument(f"filter order must be positive and even, got {n}")
    if not (0.0 < cutoff_hz < sample_rate / 2.0):
        raise InvalidArgument(
            f"cutoff {cutoff_hz} Hz outside (0, Nyquist={sample_rate / 2.0}) of rate {sample_rate}"
        )
    half = n // 2
    m = np.arange(n + 1) - half
    fc = cutoff_hz / sample_rate  # cycles/sample
    lowpass = 2.0 * fc * np.sinc(2.0 * fc * m) * np.kaiser(n + 1, beta)
    lowpass /= lowpass.sum()
    taps = -lowpass
    taps[half] += 1.0
    return FirFilter(
        taps=taps,
        group_delay=half,
        design_meta={"beta": float(beta), "n": int(n), "cutoff_hz": float(cutoff_hz)},
    )


def apply_fir(wave: Waveform, filt: FirFilter) -> Waveform:
    """Filter and re-align: full convolution, drop the group delay, keep input length."""
    n = len(wave)
    if n == 0:
        return wave
    full = fftconvolve(wave.samples, filt.taps, mode="full")
    out = full[filt.group_delay : filt.group_delay + n]
    if out.size < n:  # input shorter than the delay
        out = np.pad(out, (0, n - out.size))
    return Waveform(out, wave.sample_rate)


def feature_from_spectrogram(spec: ComplexSpectrogram) -> FeatureTensor:
    """Stack real and imaginary parts along frequency: X[:, :F]=Re, X[:, F:]=Im."""
    return FeatureTensor(np.hstack([spec.values.real, spec.values.imag]))


def spectrogram_from_feature(feat: FeatureTensor, cfg: FrameConfig, sample_rate: int) -> ComplexSpectrogram:
    """Inverse of `feature_from_spectrogram` (exact)."""
    f = feat.n_bins
    values = feat.values[:, :f] + 1j * feat.values[:, f:]
    return ComplexSpectrogram(values, cfg, sample_rate)


def read_wav(path: str | Path) -> Waveform:
    """Read a mono WAV file (16-bit PCM or 32-bit float), normalized to [-1, 1]."""
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise InvalidArgument(f"{path}: only mono WAV is supported, got {data.ndim} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise InvalidArgument(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, int(rate))


def write_wav(path: str | Path, wave: Waveform) -> None:
    """Write a mono 32-bit float WAV file."""
    wavfile.write(str(path), wave.sample_rate, wave.samples.astype(np.float32))
