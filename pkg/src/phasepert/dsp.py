"""STFT analysis and weighted overlap-add synthesis.

Frames are centred: the signal is reflect-padded by ``fft_size // 2`` on both
sides so that frame ``t`` is centred on sample ``t * hop_size``. Synthesis
multiplies every inverse-transformed frame by the analysis window again and
divides by the overlap-added squared window, which is the least-squares signal
estimate for a (possibly inconsistent) spectrogram.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.signal import get_window

from .errors import InvalidInput, InvalidParams, SynthesisError

_WINDOW_ALIASES = {"rect": "boxcar", "rectangular": "boxcar", "hanning": "hann"}
COLA_TOLERANCE = 1e-10


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono audio, float64 samples nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InvalidInput(f"expected mono 1-D samples, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise InvalidInput("waveform contains NaN or Inf")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise InvalidInput(f"sample_rate must be a positive integer, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples: np.ndarray) -> "Waveform":
        return Waveform(samples, self.sample_rate)


@lru_cache(maxsize=32)
def _window(name: str, size: int) -> np.ndarray:
    if name == "sqrt_hann":
        win = np.sqrt(get_window("hann", size, fftbins=True))
    else:
        win = get_window(_WINDOW_ALIASES.get(name, name), size, fftbins=True)
    win = np.asarray(win, dtype=np.float64)
    win.setflags(write=False)
    return win


def cola_deviation(window: np.ndarray, hop_size: int) -> float:
    """Relative peak-to-peak deviation of the overlap-added squared window.

    The squared window is the relevant quantity because the same window is
    applied at analysis and synthesis.
    """
    fft_size = window.shape[0]
    folded = (window**2).reshape(fft_size // hop_size, hop_size).sum(axis=0)
    mean = folded.mean()
    if mean <= 0:
        return np.inf
    return float((folded.max() - folded.min()) / mean)


@dataclass(frozen=True)
class StftParams:
    fft_size: int = 512
    hop_size: int = 128
    window: str = "hann"

    def __post_init__(self):
        n, hop = self.fft_size, self.hop_size
        if not isinstance(n, (int, np.integer)) or n < 2 or n & (n - 1):
            raise InvalidParams(f"fft_size must be a power of two >= 2, got {n}")
        if not isinstance(hop, (int, np.integer)) or hop < 1 or n % hop:
            raise InvalidParams(f"hop_size must divide fft_size evenly, got {hop} for {n}")
        try:
            win = _window(self.window, n)
        except ValueError as exc:
            raise InvalidParams(f"unknown window {self.window!r}") from exc
        dev = cola_deviation(win, hop)
        if not dev < COLA_TOLERANCE:
            raise InvalidParams(
                f"window {self.window!r} with hop {hop} is not constant-overlap-add "
                f"(relative deviation {dev:.3g})"
            )

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def window_array(self) -> np.ndarray:
        return _window(self.window, self.fft_size)

    def n_frames(self, length: int) -> int:
        """Number of centred frames for ``length`` samples.

        Frame centres run from 0 to the first multiple of the hop at or past
        the last sample, so every sample is covered for any valid hop.
        """
        return 1 + -(-length // self.hop_size)


def wrap_phase(phase: np.ndarray) -> np.ndarray:
    """Wrap angles to (-pi, pi]."""
    wrapped = np.pi - np.mod(np.pi - np.asarray(phase, dtype=np.float64), 2 * np.pi)
    # np.mod can round up to exactly 2*pi for tiny negative arguments
    return np.where(wrapped <= -np.pi, np.pi, wrapped)


@dataclass(frozen=True, eq=False)
class ComplexSpectrogram:
    """Polar STFT: ``magnitude`` and ``phase`` are (frames, bins) grids."""

    magnitude: np.ndarray
    phase: np.ndarray
    params: StftParams = field(default_factory=StftParams)
    original_length: int = 0
    sample_rate: int = 16000

    def __post_init__(self):
        if self.magnitude.shape != self.phase.shape or self.magnitude.ndim != 2:
            raise InvalidInput("magnitude and phase must be matching 2-D grids")
        if self.magnitude.shape[1] != self.params.n_bins:
            raise InvalidInput(
                f"expected {self.params.n_bins} bins, got {self.magnitude.shape[1]}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.magnitude.shape

    def to_complex(self) -> np.ndarray:
        return self.magnitude * np.exp(1j * self.phase)

    def with_phase(self, phase: np.ndarray) -> "ComplexSpectrogram":
        return ComplexSpectrogram(
            self.magnitude, phase, self.params, self.original_length, self.sample_rate
        )

    def with_magnitude(self, magnitude: np.ndarray) -> "ComplexSpectrogram":
        return ComplexSpectrogram(
            magnitude, self.phase, self.params, self.original_length, self.sample_rate
        )


def stft_complex(samples: np.ndarray, params: StftParams) -> np.ndarray:
    """Complex centred STFT of a 1-D float array, shape (frames, bins)."""
    n, hop = params.fft_size, params.hop_size
    length = samples.shape[0]
    if length == 0:
        raise InvalidInput("cannot analyse an empty waveform")
    n_frames = params.n_frames(length)
    tail = (n_frames - 1) * hop - length
    padded = np.pad(samples, (n // 2, n // 2 + tail), mode="reflect" if length > 1 else "edge")
    frames = np.lib.stride_tricks.sliding_window_view(padded, n)[::hop]
    return np.fft.rfft(frames * params.window_array, axis=-1)


def stft(wave: Waveform, params: StftParams | None = None) -> ComplexSpectrogram:
    params = params or StftParams()
    spec = stft_complex(wave.samples, params)
    return ComplexSpectrogram(
        magnitude=np.abs(spec),
        phase=wrap_phase(np.angle(spec)),
        params=params,
        original_length=len(wave),
        sample_rate=wave.sample_rate,
    )


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    n_frames, n = frames.shape
    ratio = n // hop
    blocks = frames.reshape(n_frames, ratio, hop)
    out = np.zeros((n_frames + ratio - 1, hop))
    for j in range(ratio):
        out[j : j + n_frames] += blocks[:, j]
    return out.reshape(-1)


def istft_complex(
    spec: np.ndarray, params: StftParams, target_length: int, sample_rate: int = 16000
) -> Waveform:
    """Weighted overlap-add synthesis from a complex (frames, bins) grid.

    ``irfft`` discards the imaginary parts of the DC and Nyquist bins, so any
    phase assigned to them is projected back onto a real signal.
    """
    if target_length <= 0:
        raise InvalidInput(f"target_length must be positive, got {target_length}")
    n, hop = params.fft_size, params.hop_size
    win = params.window_array
    frames = np.fft.irfft(spec, n=n, axis=-1) * win
    signal = _overlap_add(frames, hop)
    norm = _overlap_add(np.broadcast_to(win**2, frames.shape), hop)

    start = n // 2
    stop = min(start + target_length, signal.shape[0])
    norm = norm[start:stop]
    if np.any(norm <= 1e-10 * win.max() ** 2):
        raise SynthesisError("window normalisation is zero at some output samples")
    out = np.zeros(target_length)
    out[: stop - start] = signal[start:stop] / norm
    return Waveform(out, sample_rate)


def istft(spec: ComplexSpectrogram, target_length: int | None = None) -> Waveform:
    if target_length is None:
        target_length = spec.original_length
    return istft_complex(spec.to_complex(), spec.params, target_length, spec.sample_rate)


def signal_power(wave: Waveform | np.ndarray) -> float:
    """Mean-square amplitude."""
    samples = wave.samples if isinstance(wave, Waveform) else np.asarray(wave, dtype=np.float64)
    if samples.shape[0] == 0:
        raise InvalidInput("signal power of an empty waveform is undefined")
    return float(np.mean(samples * samples))
