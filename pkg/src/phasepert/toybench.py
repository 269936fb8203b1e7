"""Desk-scale synthetic countermeasure benchmark.

Bonafide utterances are harmonic complexes whose phases evolve smoothly.
Spoof utterances share the same construction but carry a vocoder-like phase
artifact (block-wise random phase offsets per harmonic, linearly
interpolated) and a weak high-shelf magnitude artifact applied as a
zero-phase filter, so the magnitude cue never leaks into phase statistics.
A logistic regression over per-band magnitude and phase-coherence features
plays the countermeasure. Experiments sweep perturbation in training against
perturbation in evaluation and average EERs over seeds.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import ProtocolEntry, format_protocol, utterance_seed, write_audio
from .dsp import StftParams, Waveform, stft_complex, wrap_phase
from .errors import ConfigError, InvalidInput, TrainingError
from .metrics import TrialScore, eer_from_scores, pooled_eer
from .perturb import (
    STANDARD_PHASE_WIDTHS,
    STANDARD_SNRS_DB,
    Kind,
    PerturbationSpec,
    apply,
    make_rng,
)

log = logging.getLogger(__name__)

N_BANDS = 16
LOG_FLOOR = 1e-10
FEATURE_DIM = 3 * N_BANDS
FEATURE_NAMES = (
    [f"logpow_{b}" for b in range(N_BANDS)]
    + [f"phase_mean_{b}" for b in range(N_BANDS)]
    + [f"phase_var_{b}" for b in range(N_BANDS)]
)

# synthesis constants
_F0_RANGE = (90.0, 220.0)
_VIBRATO_RATE = (3.0, 6.0)
_VIBRATO_DEPTH = (0.001, 0.004)
_DETUNE_STD = 0.002
_MAX_HARMONICS = 60
_NATURAL_JITTER = (0.1, 0.3)
_ENVELOPE_FLOOR_DB = (-32.0, -20.0)
_SHELF_HZ = (1500.0, 2000.0)
_ARTIFACT_BLOCK_S = 0.010
_NOISE_FLOOR_DB = -35.0
_TARGET_RMS = 0.05


# --- corpus ------------------------------------------------------------------


@dataclass(frozen=True)
class ToyCorpusConfig:
    n_bonafide: int = 100
    n_spoof: int = 100
    duration: float = 1.0
    sample_rate: int = 16000
    spoof_phase_artifact_strength: float = 0.6
    spoof_magnitude_artifact_strength: float = 5.0
    seed: int = 0

    def validate(self, params: StftParams | None = None) -> None:
        params = params or StftParams()
        if self.n_bonafide < 10 or self.n_spoof < 10:
            raise ConfigError("need at least 10 utterances per class")
        if self.sample_rate <= 0 or self.duration <= 0:
            raise ConfigError("duration and sample_rate must be positive")
        if self.duration * self.sample_rate < 4 * params.fft_size:
            raise ConfigError("utterances must span at least four FFT frames")
        if self.spoof_phase_artifact_strength < 0:
            raise ConfigError("phase artifact strength must be non-negative")


@dataclass
class ToyCorpus:
    utt_ids: list[str]
    waves: list[Waveform]
    labels: np.ndarray  # 1 = bonafide, 0 = spoof

    def __len__(self) -> int:
        return len(self.waves)

    def subset(self, idx: Sequence[int]) -> "ToyCorpus":
        return ToyCorpus(
            [self.utt_ids[i] for i in idx],
            [self.waves[i] for i in idx],
            self.labels[np.asarray(idx, dtype=int)],
        )


def _block_jitter(rng: np.random.Generator, n_samples: int, n_tracks: int, block: int) -> np.ndarray:
    """Piecewise-linear random process per track, knots uniform on [-1/2, 1/2]."""
    n_knots = n_samples // block + 2
    knots = rng.uniform(-0.5, 0.5, size=(n_tracks, n_knots))
    pos = np.arange(n_samples) / block
    i = pos.astype(int)
    frac = pos - i
    return knots[:, i] * (1 - frac) + knots[:, i + 1] * frac


def _shelf_filter(x: np.ndarray, sr: int, gain_db: float) -> np.ndarray:
    """Zero-phase high shelf: a real gain per frequency leaves every phase intact."""
    f = np.fft.rfftfreq(x.size, 1 / sr)
    ramp = np.clip((f - _SHELF_HZ[0]) / (_SHELF_HZ[1] - _SHELF_HZ[0]), 0.0, 1.0)
    return np.fft.irfft(np.fft.rfft(x) * 10 ** (gain_db * ramp / 20), n=x.size)


def synth_utterance(cfg: ToyCorpusConfig, seed: int, spoof: bool) -> Waveform:
    rng = make_rng(seed)
    sr = cfg.sample_rate
    n = int(round(cfg.duration * sr))
    t = np.arange(n) / sr

    f0 = rng.uniform(*_F0_RANGE)
    depth = rng.uniform(*_VIBRATO_DEPTH)
    f0_track = f0 * (1 + depth * np.sin(2 * np.pi * rng.uniform(*_VIBRATO_RATE) * t + rng.uniform(0, 2 * np.pi)))
    n_harm = min(_MAX_HARMONICS, int(0.45 * sr / (f0 * (1 + depth))))
    k = np.arange(1, n_harm + 1)
    detune = 1 + rng.normal(0, _DETUNE_STD, n_harm)
    freqs = k * f0 * detune

    # random three-formant envelope
    centres = np.array([rng.uniform(300, 900), rng.uniform(900, 2500), rng.uniform(2500, 4500)])
    widths = rng.uniform(100, 400, size=3)
    gains = rng.uniform(0.3, 1.0, size=3)
    floor = 10 ** (rng.uniform(*_ENVELOPE_FLOOR_DB) / 20)
    amp = (gains * np.exp(-0.5 * ((freqs[:, None] - centres) / widths) ** 2)).sum(axis=1) + floor
    amp /= np.sqrt(k)

    base_phase = 2 * np.pi * np.cumsum(f0_track) / sr
    phase = k[:, None] * detune[:, None] * base_phase + rng.uniform(0, 2 * np.pi, (n_harm, 1))
    block = max(1, int(round(_ARTIFACT_BLOCK_S * sr)))
    natural = rng.uniform(*_NATURAL_JITTER)
    phase += natural * _block_jitter(rng, n, n_harm, block)
    # the spoof-only draws come last so both classes share the generator stream above
    if spoof:
        phase += cfg.spoof_phase_artifact_strength * _block_jitter(rng, n, n_harm, block)

    x = (amp[:, None] * np.cos(phase)).sum(axis=0)
    x /= np.sqrt(np.mean(x * x))
    x += rng.standard_normal(n) * 10 ** (_NOISE_FLOOR_DB / 20)
    if spoof:
        x = _shelf_filter(x, sr, cfg.spoof_magnitude_artifact_strength)
    x *= _TARGET_RMS / np.sqrt(np.mean(x * x))
    return Waveform(x, sr)


def gen_toy_corpus(cfg: ToyCorpusConfig, split: str = "T", params: StftParams | None = None) -> ToyCorpus:
    """Generate a labelled corpus; utterance ``i`` depends only on (cfg, split, i)."""
    cfg.validate(params)
    ids, waves, labels = [], [], []
    for label, count, tag in ((1, cfg.n_bonafide, "B"), (0, cfg.n_spoof, "S")):
        for i in range(count):
            utt = f"TOY_{split}_{tag}{i:05d}"
            ids.append(utt)
            waves.append(synth_utterance(cfg, utterance_seed(cfg.seed, utt), spoof=label == 0))
            labels.append(label)
    return ToyCorpus(ids, waves, np.asarray(labels, dtype=np.int8))


def export_corpus(
    corpus: ToyCorpus, root: str | Path, bit_depth: int = 16, speaker: str = "TOY_0000"
) -> list[ProtocolEntry]:
    """Write each utterance as ``root/<utt_id>.wav`` plus ``root/protocol.txt``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for utt, wave, label in zip(corpus.utt_ids, corpus.waves, corpus.labels):
        write_audio(root / f"{utt}.wav", wave, bit_depth)
        bona = label == 1
        entries.append(ProtocolEntry(speaker, utt, "-" if bona else "TOY", "bonafide" if bona else "spoof"))
    (root / "protocol.txt").write_text(format_protocol(entries))
    return entries


# --- features ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """16 log band powers, then 16 circular means and 16 circular variances."""

    magnitude_features: np.ndarray
    phase_features: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.magnitude_features, self.phase_features])


def band_edges(n_bins: int, n_bands: int = N_BANDS) -> np.ndarray:
    return np.linspace(0, n_bins, n_bands + 1).round().astype(int)


def phase_advance_deviation(spec: np.ndarray, params: StftParams) -> np.ndarray:
    """Wrapped phase advance between consecutive frames minus the advance
    expected from each bin's centre frequency; shape (frames - 1, bins)."""
    phase = np.angle(spec)
    expected = 2 * np.pi * np.arange(spec.shape[1]) * params.hop_size / params.fft_size
    return wrap_phase(phase[1:] - phase[:-1] - expected)


def features_from_spectrogram(spec: np.ndarray, params: StftParams) -> FeatureVector:
    """Band features from a complex (frames, bins) grid.

    Phase statistics are taken per bin over time, then averaged across the
    bins of a band with weights proportional to mean bin magnitude. Silent
    bands get mean 0 and variance 0.
    """
    if spec.shape[0] < 2:
        raise InvalidInput("need at least two frames for phase-advance features")
    mag = np.abs(spec)
    power = mag * mag
    dev = phase_advance_deviation(spec, params)
    resultant = np.mean(np.exp(1j * dev), axis=0)
    weight = mag.mean(axis=0)

    edges = band_edges(spec.shape[1])
    logpow = np.empty(N_BANDS)
    mean = np.zeros(N_BANDS)
    var = np.zeros(N_BANDS)
    for b, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        logpow[b] = math.log(power[:, lo:hi].mean() + LOG_FLOOR)
        w = weight[lo:hi]
        total = w.sum()
        if total > 0:
            mean[b] = float(np.angle(np.sum(w * resultant[lo:hi])))
            var[b] = 1.0 - float(np.sum(w * np.abs(resultant[lo:hi])) / total)
    return FeatureVector(logpow, np.concatenate([mean, var]))


def extract_features(wave: Waveform, params: StftParams | None = None) -> FeatureVector:
    params = params or StftParams()
    if len(wave) == 0 or params.n_frames(len(wave)) < 2:
        raise InvalidInput("waveform too short for two analysis frames")
    return features_from_spectrogram(stft_complex(wave.samples, params), params)


def classifier_inputs(features: np.ndarray) -> np.ndarray:
    """Classifier front end: log band energies relative to the utterance's
    mean log energy, so overall level carries no information."""
    x = np.array(features, dtype=float, copy=True)
    x[..., :N_BANDS] -= x[..., :N_BANDS].mean(axis=-1, keepdims=True)
    return x


def feature_matrix(
    waves: Sequence[Waveform],
    spec: PerturbationSpec,
    params: StftParams,
    seeds: Sequence[int],
) -> np.ndarray:
    """Perturb each waveform with its seed and stack the classifier inputs."""
    return classifier_inputs(
        np.stack([extract_features(apply(w, spec, params, s), params).as_array() for w, s in zip(waves, seeds)])
    )


# --- classifier ----------------------------------------------------------------


@dataclass(frozen=True)
class TrainHyper:
    learning_rate: float = 0.5
    l2: float = 1e-2
    epochs: int = 5
    steps_per_epoch: int = 60
    dev_fraction: float = 0.2


@dataclass
class LinearModel:
    """Logistic regression on standardised features; higher score = bonafide."""

    weights: np.ndarray
    bias: float
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    train_spec: PerturbationSpec = field(default_factory=PerturbationSpec.none)
    epochs: int = 0
    seed: int = 0
    history: list[float] = field(default_factory=list)

    def score(self, features: np.ndarray) -> np.ndarray:
        z = (np.atleast_2d(features) - self.feature_mean) / self.feature_scale
        return z @ self.weights + self.bias


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1 + np.tanh(0.5 * z))


def logistic_loss(theta: np.ndarray, x: np.ndarray, y: np.ndarray, l2: float) -> float:
    """Mean binary cross-entropy plus ``l2/2 * |w|^2``; ``theta = [w..., b]``."""
    z = x @ theta[:-1] + theta[-1]
    # log(1 + exp(-z)) for y=1 and log(1 + exp(z)) for y=0, computed stably
    loss = np.logaddexp(0.0, np.where(y == 1, -z, z)).mean()
    return float(loss + 0.5 * l2 * theta[:-1] @ theta[:-1])


def logistic_grad(theta: np.ndarray, x: np.ndarray, y: np.ndarray, l2: float) -> np.ndarray:
    z = x @ theta[:-1] + theta[-1]
    r = (_sigmoid(z) - y) / y.shape[0]
    return np.append(x.T @ r + l2 * theta[:-1], r.sum())


def gradient_descent(
    theta: np.ndarray, x: np.ndarray, y: np.ndarray, lr: float, l2: float, steps: int
) -> tuple[np.ndarray, list[float]]:
    losses = []
    for _ in range(steps):
        theta = theta - lr * logistic_grad(theta, x, y, l2)
        losses.append(logistic_loss(theta, x, y, l2))
    if not np.all(np.isfinite(theta)) or not math.isfinite(losses[-1] if losses else 0.0):
        raise TrainingError("gradient descent diverged (non-finite loss)")
    return theta, losses


def _standardiser(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    return mean, np.where(scale > 1e-8, scale, 1.0)


def fit_logistic(
    x: np.ndarray, y: np.ndarray, hyper: TrainHyper = TrainHyper(), steps: int | None = None
) -> LinearModel:
    """Plain full-batch fit on fixed features (no augmentation, no early stop)."""
    mean, scale = _standardiser(x)
    z = (x - mean) / scale
    theta = np.zeros(x.shape[1] + 1)
    steps = hyper.epochs * hyper.steps_per_epoch if steps is None else steps
    theta, losses = gradient_descent(theta, z, y.astype(float), hyper.learning_rate, hyper.l2, steps)
    return LinearModel(theta[:-1], float(theta[-1]), mean, scale, history=losses)


def _split_dev(labels: np.ndarray, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = make_rng(seed)
    train, dev = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        n_dev = max(1, int(round(fraction * idx.size)))
        dev.append(idx[:n_dev])
        train.append(idx[n_dev:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(dev))


def _eer_of(labels: np.ndarray, scores: np.ndarray) -> float:
    return eer_from_scores(scores[labels == 1], scores[labels == 0]).eer


def train_classifier(
    corpus: ToyCorpus,
    train_spec: PerturbationSpec = PerturbationSpec.none(),
    hyper: TrainHyper = TrainHyper(),
    seed: int = 0,
    params: StftParams | None = None,
) -> LinearModel:
    """Fit the countermeasure, re-perturbing training audio every epoch.

    Each epoch draws a fresh perturbation per utterance, extracts features,
    then takes ``steps_per_epoch`` full-batch gradient steps. The held-out
    split is perturbed once with ``train_spec`` and the epoch with the lowest
    held-out EER is kept (later epochs win ties).
    """
    params = params or StftParams()
    labels = corpus.labels
    if labels.min() == labels.max():
        raise InvalidInput("training needs both bonafide and spoof utterances")
    tr, dev = _split_dev(labels, hyper.dev_fraction, seed)
    tr_waves = [corpus.waves[i] for i in tr]
    tr_ids = [corpus.utt_ids[i] for i in tr]
    y = labels[tr].astype(float)

    dev_x = feature_matrix(
        [corpus.waves[i] for i in dev],
        train_spec,
        params,
        [utterance_seed(seed ^ 0xD5, corpus.utt_ids[i]) for i in dev],
    )

    perturbed = train_spec.kind is not Kind.NONE
    theta = np.zeros(FEATURE_DIM + 1)
    best: tuple[float, np.ndarray] | None = None
    history: list[float] = []
    x = None
    mean = scale = None
    for epoch in range(hyper.epochs):
        if x is None or perturbed:
            epoch_seed = utterance_seed(seed, f"epoch{epoch}")
            x = feature_matrix(tr_waves, train_spec, params, [utterance_seed(epoch_seed, u) for u in tr_ids])
            if mean is None:
                mean, scale = _standardiser(x)
            z = (x - mean) / scale
        theta, losses = gradient_descent(theta, z, y, hyper.learning_rate, hyper.l2, hyper.steps_per_epoch)
        history.extend(losses)
        dev_eer = _eer_of(labels[dev], ((dev_x - mean) / scale) @ theta[:-1] + theta[-1])
        if best is None or dev_eer <= best[0]:
            best = (dev_eer, theta.copy())
    theta = best[1]
    return LinearModel(
        theta[:-1], float(theta[-1]), mean, scale,
        train_spec=train_spec, epochs=hyper.epochs, seed=seed, history=history,
    )


# --- experiments -----------------------------------------------------------------


def default_eval_specs() -> list[PerturbationSpec]:
    return (
        [PerturbationSpec.none()]
        + [PerturbationSpec.phase(n) for n in STANDARD_PHASE_WIDTHS]
        + [PerturbationSpec.magnitude(s) for s in STANDARD_SNRS_DB]
    )


def default_train_specs() -> list[PerturbationSpec]:
    return default_eval_specs()


@dataclass(frozen=True)
class ExperimentGrid:
    train_specs: tuple[PerturbationSpec, ...] = field(default_factory=lambda: tuple(default_train_specs()))
    eval_specs: tuple[PerturbationSpec, ...] = field(default_factory=lambda: tuple(default_eval_specs()))
    seeds: tuple[int, ...] = (1, 2, 3)
    corpus: ToyCorpusConfig = field(default_factory=ToyCorpusConfig)
    hyper: TrainHyper = field(default_factory=TrainHyper)
    stft: StftParams = field(default_factory=StftParams)

    def __post_init__(self):
        if not self.train_specs or not self.eval_specs or not self.seeds:
            raise ConfigError("train_specs, eval_specs and seeds must be non-empty")
        labels = [s.label for s in self.eval_specs]
        if len(set(labels)) != len(labels):
            raise ConfigError("duplicate evaluation conditions")


@dataclass
class ResultTable:
    """Mean EER over seeds per (training spec, evaluation spec).

    ``trials[(train_label, seed)]`` keeps every scored evaluation trial with
    its condition tag, so any pooled column can be recomputed.
    """

    train_specs: list[PerturbationSpec]
    eval_specs: list[PerturbationSpec]
    seeds: list[int]
    trials: dict[tuple[str, int], list[TrialScore]] = field(default_factory=dict)
    errors: dict[tuple[str, int], str] = field(default_factory=dict)

    def cell(self, train: PerturbationSpec | str, evaluation: PerturbationSpec | str) -> float:
        return self.pooled(train, [evaluation])

    def pooled(
        self, train: PerturbationSpec | str, evaluations: Sequence[PerturbationSpec | str] | None = None
    ) -> float:
        """Mean over seeds of the EER pooled across ``evaluations`` (default all)."""
        train = str(train)
        conds = [str(e) for e in (evaluations if evaluations is not None else self.eval_specs)]
        values = [
            pooled_eer(self.trials[(train, s)], conds).eer
            for s in self.seeds
            if (train, s) in self.trials
        ]
        return float(np.mean(values)) if values else float("nan")

    def rows(self) -> list[list[str]]:
        phase = [e for e in self.eval_specs if e.kind is Kind.PHASE]
        mag = [e for e in self.eval_specs if e.kind is Kind.MAGNITUDE]
        header = ["train"] + [str(e) for e in self.eval_specs] + ["pooled", "pooled_phase", "pooled_magnitude"]
        out = [header]
        for tr in self.train_specs:
            row = [str(tr)] + [f"{self.cell(tr, e):.6f}" for e in self.eval_specs]
            row.append(f"{self.pooled(tr):.6f}")
            row.append(f"{self.pooled(tr, phase):.6f}" if phase else "nan")
            row.append(f"{self.pooled(tr, mag):.6f}" if mag else "nan")
            out.append(row)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.rows())
        return buf.getvalue()


def _eval_seed(seed: int, spec: PerturbationSpec, utt: str) -> int:
    return utterance_seed(utterance_seed(seed, f"eval/{spec.label}"), utt)


def _run_seed(grid: ExperimentGrid, seed: int) -> tuple[dict, dict]:
    """All training specs for one seed; evaluation features are shared."""
    cfg = replace(grid.corpus, seed=utterance_seed(grid.corpus.seed, f"seed{seed}"))
    train_corpus = gen_toy_corpus(cfg, "T", grid.stft)
    eval_corpus = gen_toy_corpus(cfg, "E", grid.stft)
    eval_x = {
        spec.label: feature_matrix(
            eval_corpus.waves, spec, grid.stft, [_eval_seed(seed, spec, u) for u in eval_corpus.utt_ids]
        )
        for spec in grid.eval_specs
    }
    trials, errors = {}, {}
    for tr in grid.train_specs:
        key = (tr.label, seed)
        try:
            model = train_classifier(train_corpus, tr, grid.hyper, seed, grid.stft)
        except Exception as exc:  # a failed cell must not abort the grid
            errors[key] = f"{type(exc).__name__}: {exc}"
            log.warning("training %s seed %d failed: %s", tr.label, seed, exc)
            continue
        cell = []
        for spec in grid.eval_specs:
            scores = model.score(eval_x[spec.label])
            cell += [
                TrialScore(u, spec.label, float(s), "bonafide" if lab == 1 else "spoof")
                for u, s, lab in zip(eval_corpus.utt_ids, scores, eval_corpus.labels)
            ]
        trials[key] = cell
    return trials, errors


def run_experiment(grid: ExperimentGrid, workers: int = 1) -> ResultTable:
    """Train once per (train spec, seed), evaluate under every eval spec."""
    table = ResultTable(list(grid.train_specs), list(grid.eval_specs), list(grid.seeds))
    start = time.perf_counter()
    if workers > 1 and len(grid.seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(grid.seeds))) as pool:
            results = list(pool.map(_run_seed, [grid] * len(grid.seeds), grid.seeds))
    else:
        results = [_run_seed(grid, s) for s in grid.seeds]
    for trials, errors in results:
        table.trials.update(trials)
        table.errors.update(errors)
    log.info("experiment finished in %.1f s", time.perf_counter() - start)
    return table
