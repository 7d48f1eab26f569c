"""STFT analysis, overlap-add synthesis and noisy-phase reconstruction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError, LengthError, ShapeError
from .numerics import Tensor, record_op

__all__ = [
    "SAMPLE_RATE",
    "Waveform",
    "StftConfig",
    "ComplexSpectrogram",
    "SE_CONFIG",
    "PMOS_CONFIG",
    "stft",
    "istft",
    "reconstruct_with_phase",
    "reconstruct_tensor",
    "num_frames",
    "istft_length",
    "normalize_features",
    "FeatureStats",
    "spectral_energy",
    "require_rate",
]

SAMPLE_RATE = 16000


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise FormatError("waveform must be mono (1-D samples)", field="channels")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise FormatError(f"invalid sample rate {self.sample_rate}", field="sample_rate")
        if not np.isfinite(self.samples).all():
            raise FormatError("waveform contains non-finite samples", field="samples")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def require_rate(w: Waveform, rate: int = SAMPLE_RATE) -> None:
    if w.sample_rate != rate:
        raise FormatError(
            f"sample rate {w.sample_rate} Hz, pipeline requires {rate} Hz", field="sample_rate"
        )


@dataclass(frozen=True)
class StftConfig:
    frame_len: int
    hop: int
    fft_size: int
    window: str = "hann"

    def __post_init__(self):
        if not 0 < self.hop <= self.frame_len <= self.fft_size:
            raise ContractError("StftConfig needs 0 < hop <= frame_len <= fft_size")
        if self.window != "hann":
            raise ContractError(f"unsupported window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def window_array(self) -> np.ndarray:
        # periodic Hann: sums to a constant at 50% overlap
        n = np.arange(self.frame_len)
        return 0.5 - 0.5 * np.cos(2 * np.pi * n / self.frame_len)


# 640-point DFT, 40 ms Hann, 20 ms shift -> 321 bins
SE_CONFIG = StftConfig(frame_len=640, hop=320, fft_size=640)
# 32 ms frames with 25% overlap and a 512-point FFT -> 257 bins
PMOS_CONFIG = StftConfig(frame_len=512, hop=384, fft_size=512)


@dataclass
class ComplexSpectrogram:
    magnitude: np.ndarray  # T x F
    phase: np.ndarray  # T x F
    config: StftConfig

    def __post_init__(self):
        if self.magnitude.shape != self.phase.shape:
            raise ShapeError("magnitude and phase planes differ in shape")
        if self.magnitude.shape[1] != self.config.n_bins:
            raise ShapeError(f"expected {self.config.n_bins} bins, got {self.magnitude.shape[1]}")

    @property
    def n_frames(self) -> int:
        return self.magnitude.shape[0]

    def complex(self) -> np.ndarray:
        return self.magnitude * np.exp(1j * self.phase)


def num_frames(n_samples: int, c: StftConfig) -> int:
    if n_samples < c.frame_len:
        raise LengthError(f"signal of {n_samples} samples is shorter than one frame ({c.frame_len})")
    return 1 + (n_samples - c.frame_len) // c.hop


def istft_length(n_frames: int, c: StftConfig) -> int:
    return (n_frames - 1) * c.hop + c.frame_len


def stft(w: Waveform, c: StftConfig) -> ComplexSpectrogram:
    x = w.samples
    T = num_frames(len(x), c)
    idx = np.arange(c.frame_len)[None, :] + c.hop * np.arange(T)[:, None]
    frames = x[idx] * c.window_array()
    spec = np.fft.rfft(frames, n=c.fft_size, axis=1)
    phase = np.angle(spec)
    # np.angle returns [-pi, pi]; fold -pi onto pi
    phase[phase == -np.pi] = np.pi
    return ComplexSpectrogram(np.abs(spec), phase, c)


def _synthesis_denominator(T: int, c: StftConfig) -> np.ndarray:
    """Sum of squared windows per output sample, floored at its interior minimum.

    The floor leaves fully-overlapped samples exact and tapers the partial
    edge regions instead of dividing by near-zero window energy.
    """
    w2 = c.window_array() ** 2
    n = istft_length(T, c)
    den = np.zeros(n)
    for t in range(T):
        den[t * c.hop : t * c.hop + c.frame_len] += w2
    floor = _interior_floor(c)
    return np.maximum(den, floor)


_FLOORS: dict[StftConfig, float] = {}


def _interior_floor(c: StftConfig) -> float:
    if c not in _FLOORS:
        w2 = c.window_array() ** 2
        k = -(-c.frame_len // c.hop) + 1
        den = np.zeros((2 * k + 1) * c.hop + c.frame_len)
        for t in range(2 * k + 1):
            den[t * c.hop : t * c.hop + c.frame_len] += w2
        lo, hi = c.frame_len, 2 * k * c.hop
        _FLOORS[c] = float(den[lo:hi].min())
    return _FLOORS[c]


def _overlap_add(frames: np.ndarray, c: StftConfig) -> np.ndarray:
    T = frames.shape[0]
    out = np.zeros(istft_length(T, c))
    for t in range(T):
        out[t * c.hop : t * c.hop + c.frame_len] += frames[t]
    return out


def _frames_from_spectrum(spec: np.ndarray, c: StftConfig) -> np.ndarray:
    frames = np.fft.irfft(spec, n=c.fft_size, axis=1)[:, : c.frame_len]
    return frames * c.window_array()


def istft(s: ComplexSpectrogram, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`."""
    c = s.config
    frames = _frames_from_spectrum(s.complex(), c)
    y = _overlap_add(frames, c) / _synthesis_denominator(s.n_frames, c)
    return Waveform(y, sample_rate)


def reconstruct_with_phase(mag: np.ndarray, phase: np.ndarray, c: StftConfig) -> Waveform:
    """Combine an estimated magnitude with the mixture phase and invert."""
    mag = np.asarray(mag, dtype=np.float64)
    if mag.shape != phase.shape:
        raise ShapeError(f"magnitude {mag.shape} and phase {phase.shape} differ")
    if (mag < 0).any():
        raise ContractError("reconstruct_with_phase: negative magnitudes")
    return istft(ComplexSpectrogram(mag, phase, c))


def _bin_weights(c: StftConfig) -> np.ndarray:
    wts = np.full(c.n_bins, 2.0)
    wts[0] = 1.0
    if c.fft_size % 2 == 0:
        wts[-1] = 1.0
    return wts / c.fft_size


def reconstruct_tensor(mag: Tensor, phase: np.ndarray, c: StftConfig) -> Tensor:
    """Differentiable :func:`reconstruct_with_phase` (linear in ``mag``)."""
    if mag.shape != phase.shape:
        raise ShapeError(f"magnitude {mag.shape} and phase {phase.shape} differ")
    T = mag.shape[0]
    den = _synthesis_denominator(T, c)
    rot = np.exp(1j * phase)
    win = c.window_array()
    frames = _frames_from_spectrum(mag.data * rot, c)
    out = _overlap_add(frames, c) / den

    def bw(g):
        gs = g / den
        idx = np.arange(c.frame_len)[None, :] + c.hop * np.arange(T)[:, None]
        gf = gs[idx] * win
        R = np.fft.rfft(gf, n=c.fft_size, axis=1)
        return ((rot.real * R.real + rot.imag * R.imag) * _bin_weights(c),)

    return record_op("reconstruct", out, (mag,), bw)


@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray


def normalize_features(mag: np.ndarray, eps: float = 1e-8) -> tuple[np.ndarray, FeatureStats]:
    """Per-utterance, per-frequency mean and variance normalization."""
    mean = mag.mean(axis=0)
    std = mag.std(axis=0)
    std = np.where(std > eps, std, 1.0)
    return (mag - mean) / std, FeatureStats(mean, std)


def spectral_energy(s: ComplexSpectrogram) -> float:
    """Signal energy estimated from the spectrogram via Parseval.

    Each frame's energy is divided by the average squared-window coverage
    ``sum(w**2) / hop`` so the result tracks the time-domain energy.
    """
    c = s.config
    wts = _bin_weights(c)
    frame_energy = (s.magnitude**2 * wts).sum()
    coverage = (c.window_array() ** 2).sum() / c.hop
    return float(frame_energy / coverage)
