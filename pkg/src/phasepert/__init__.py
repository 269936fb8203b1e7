"""Seeded phase and magnitude perturbation of speech, EER scoring, and a
small synthetic countermeasure benchmark."""

__version__ = "0.1.0"

from .dsp import ComplexSpectrogram, StftParams, Waveform, istft, signal_power, stft  # noqa: E402
from .metrics import EerResult, TrialScore, compute_eer, det_points, pooled_eer  # noqa: E402
from .perturb import (  # noqa: E402
    PerturbationSpec,
    apply,
    peak_normalize,
    perturb_magnitude,
    perturb_phase,
    white_noise,
)

__all__ = [
    "ComplexSpectrogram",
    "EerResult",
    "PerturbationSpec",
    "StftParams",
    "TrialScore",
    "Waveform",
    "apply",
    "compute_eer",
    "det_points",
    "istft",
    "peak_normalize",
    "perturb_magnitude",
    "perturb_phase",
    "pooled_eer",
    "signal_power",
    "stft",
    "white_noise",
]
