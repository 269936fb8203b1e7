"""Phase and SNR-controlled magnitude perturbation of waveforms.

Every operator takes an explicit integer seed and builds its own generator,
so calls are pure functions of their arguments and safe to run concurrently.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass

import numpy as np

from .dsp import (
    ComplexSpectrogram,
    StftParams,
    Waveform,
    istft,
    istft_complex,
    signal_power,
    stft,
    stft_complex,
    wrap_phase,
)
from .errors import InvalidInput, InvalidParams, UndefinedSnrError

TWO_PI = 2 * math.pi
SEED_MASK = (1 << 64) - 1

#: phase widths studied for evaluation and training
STANDARD_PHASE_WIDTHS = (math.pi / 2, math.pi, 3 * math.pi / 2, 2 * math.pi)
#: SNR settings (dB) for magnitude perturbation
STANDARD_SNRS_DB = (10.0, 5.0, 0.0, -5.0, -10.0)


def make_rng(seed: int) -> np.random.Generator:
    if not 0 <= int(seed) <= SEED_MASK:
        raise InvalidParams(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(int(seed)))


class Kind(str, enum.Enum):
    NONE = "none"
    PHASE = "phase"
    MAGNITUDE = "magnitude"


_PI_FRACTION = re.compile(r"^\s*(?:(?P<num>[0-9.]+)\s*\*?\s*)?pi\s*(?:/\s*(?P<den>[0-9.]+))?\s*$")


def parse_radians(text: str) -> float:
    """Parse ``"3.14"``, ``"pi"``, ``"pi/2"``, ``"3pi/2"`` or ``"3*pi/2"``."""
    text = str(text).strip().lower()
    match = _PI_FRACTION.match(text)
    if match:
        num = float(match.group("num") or 1.0)
        den = float(match.group("den") or 1.0)
        if den == 0:
            raise InvalidParams(f"zero denominator in {text!r}")
        return num * math.pi / den
    try:
        return float(text)
    except ValueError:
        raise InvalidParams(f"cannot parse phase width {text!r}") from None


def format_radians(value: float) -> str:
    """Inverse of :func:`parse_radians` for multiples of pi/4, else decimal."""
    quarters = value / (math.pi / 4)
    if abs(quarters - round(quarters)) < 1e-9:
        q = int(round(quarters))
        if q == 0:
            return "0"
        num, den = q, 4
        g = math.gcd(num, den)
        num, den = num // g, den // g
        head = "pi" if num == 1 else f"{num}pi"
        return head if den == 1 else f"{head}/{den}"
    return repr(float(value))


@dataclass(frozen=True)
class PerturbationSpec:
    """A single corruption: none, phase width ``n`` (radians) or SNR (dB)."""

    kind: Kind = Kind.NONE
    phase_width: float | None = None
    snr_db: float | None = None

    def __post_init__(self):
        kind = Kind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is Kind.PHASE:
            if self.phase_width is None or self.snr_db is not None:
                raise InvalidParams("phase spec needs phase_width and no snr_db")
            if not 0.0 <= self.phase_width <= TWO_PI:
                raise InvalidParams(f"phase width must lie in [0, 2pi], got {self.phase_width}")
        elif kind is Kind.MAGNITUDE:
            if self.snr_db is None or self.phase_width is not None:
                raise InvalidParams("magnitude spec needs snr_db and no phase_width")
            if not math.isfinite(self.snr_db):
                raise InvalidParams(f"snr_db must be finite, got {self.snr_db}")
        elif self.phase_width is not None or self.snr_db is not None:
            raise InvalidParams("'none' spec takes no parameters")

    @classmethod
    def none(cls) -> "PerturbationSpec":
        return cls(Kind.NONE)

    @classmethod
    def phase(cls, width: float) -> "PerturbationSpec":
        return cls(Kind.PHASE, phase_width=float(width))

    @classmethod
    def magnitude(cls, snr_db: float) -> "PerturbationSpec":
        return cls(Kind.MAGNITUDE, snr_db=float(snr_db))

    @classmethod
    def parse(cls, text: str) -> "PerturbationSpec":
        """Parse a label such as ``none``, ``phase:pi/2`` or ``snr:-5``."""
        text = text.strip()
        if text.lower() == "none":
            return cls.none()
        key, sep, value = text.partition(":")
        if not sep:
            raise InvalidParams(f"cannot parse perturbation {text!r}")
        key = key.strip().lower()
        if key == "phase":
            return cls.phase(parse_radians(value))
        if key in ("snr", "magnitude", "mag"):
            try:
                return cls.magnitude(float(value.lower().removesuffix("db")))
            except ValueError:
                raise InvalidParams(f"cannot parse SNR {value!r}") from None
        raise InvalidParams(f"unknown perturbation kind {key!r}")

    @property
    def label(self) -> str:
        if self.kind is Kind.PHASE:
            return f"phase:{format_radians(self.phase_width)}"
        if self.kind is Kind.MAGNITUDE:
            return f"snr:{self.snr_db:g}"
        return "none"

    def __str__(self) -> str:
        return self.label


def perturb_phase_spectrogram(
    spec: ComplexSpectrogram, n: float, rng: np.random.Generator
) -> ComplexSpectrogram:
    """Redraw every bin's phase uniformly on [phase - n/2, phase + n/2].

    The magnitude array is passed through untouched (same object).
    """
    if not 0.0 <= n <= TWO_PI:
        raise InvalidParams(f"phase width must lie in [0, 2pi], got {n}")
    offsets = rng.uniform(-n / 2, n / 2, size=spec.phase.shape)
    return spec.with_phase(wrap_phase(spec.phase + offsets))


def perturb_phase(
    wave: Waveform, n: float, params: StftParams | None = None, seed: int = 0
) -> Waveform:
    if not 0.0 <= n <= TWO_PI:
        raise InvalidParams(f"phase width must lie in [0, 2pi], got {n}")
    if len(wave) == 0:
        raise InvalidInput("cannot perturb an empty waveform")
    spec = stft(wave, params or StftParams())
    return istft(perturb_phase_spectrogram(spec, n, make_rng(seed)))


def white_noise(length: int, power: float, seed: int = 0) -> np.ndarray:
    """Zero-mean Gaussian samples with variance ``power``."""
    if length <= 0:
        raise InvalidInput(f"length must be positive, got {length}")
    if power < 0:
        raise InvalidInput(f"noise power must be non-negative, got {power}")
    return make_rng(seed).standard_normal(length) * math.sqrt(power)


def peak_normalize(wave: Waveform, limit: float = 1.0) -> Waveform:
    """Rescale so the absolute peak does not exceed ``limit``."""
    if limit <= 0:
        raise InvalidParams(f"limit must be positive, got {limit}")
    if len(wave) == 0:
        return wave
    peak = float(np.max(np.abs(wave.samples)))
    if peak <= limit:
        return wave
    # divide first: |x| / peak <= 1 holds exactly under IEEE rounding
    return wave.with_samples(wave.samples / peak * limit)


def add_noise_at_snr(wave: Waveform, snr_db: float, seed: int = 0) -> tuple[Waveform, np.ndarray]:
    """Return ``(noisy, noise)`` with the noise scaled to exactly the requested SNR.

    The Gaussian draw is rescaled by its own empirical power, so the
    whole-utterance SNR is exact rather than exact in expectation.
    """
    p_signal = signal_power(wave)
    if p_signal <= 0:
        raise UndefinedSnrError("SNR is undefined for an all-zero waveform")
    target = p_signal / 10 ** (snr_db / 10)
    noise = white_noise(len(wave), 1.0, seed)
    realised = float(np.mean(noise * noise))
    noise *= math.sqrt(target / realised)
    return wave.with_samples(wave.samples + noise), noise


def perturb_magnitude(
    wave: Waveform, snr_db: float, params: StftParams | None = None, seed: int = 0
) -> Waveform:
    """Noisy magnitude, clean phase, resynthesise, then guard against clipping."""
    params = params or StftParams()
    noisy, _ = add_noise_at_snr(wave, snr_db, seed)
    clean = stft_complex(wave.samples, params)
    noisy_mag = np.abs(stft_complex(noisy.samples, params))
    clean_phase = np.angle(clean)
    out = istft_complex(noisy_mag * np.exp(1j * clean_phase), params, len(wave), wave.sample_rate)
    return peak_normalize(out, 1.0)


def apply(
    wave: Waveform,
    spec: PerturbationSpec,
    params: StftParams | None = None,
    seed: int = 0,
) -> Waveform:
    """Dispatch to the operator selected by ``spec``; ``none`` returns ``wave`` itself."""
    if spec.kind is Kind.PHASE:
        return perturb_phase(wave, spec.phase_width, params, seed)
    if spec.kind is Kind.MAGNITUDE:
        return perturb_magnitude(wave, spec.snr_db, params, seed)
    return wave
