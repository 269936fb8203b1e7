import math

import numpy as np
import pytest

from phasepert.corpus import utterance_seed
from phasepert.dsp import ComplexSpectrogram, StftParams, Waveform, stft_complex
from phasepert.errors import ConfigError, InvalidInput
from phasepert.metrics import eer_from_scores
from phasepert.perturb import PerturbationSpec, make_rng, perturb_phase_spectrogram, white_noise
from phasepert.toybench import (
    FEATURE_DIM,
    LOG_FLOOR,
    N_BANDS,
    ExperimentGrid,
    ToyCorpusConfig,
    TrainHyper,
    band_edges,
    extract_features,
    feature_matrix,
    features_from_spectrogram,
    fit_logistic,
    gen_toy_corpus,
    logistic_grad,
    logistic_loss,
    phase_advance_deviation,
    run_experiment,
    train_classifier,
)

PI = math.pi
P = StftParams()
PHASE_VAR = slice(2 * N_BANDS, 3 * N_BANDS)
PHASE_ALL = slice(N_BANDS, 3 * N_BANDS)
MAGNITUDE = slice(0, N_BANDS)


def eer(labels, scores):
    return eer_from_scores(scores[labels == 1], scores[labels == 0]).eer


def corpus_features(cfg, split, spec=PerturbationSpec.none(), salt=0):
    c = gen_toy_corpus(cfg, split, P)
    return c, feature_matrix(c.waves, spec, P, [utterance_seed(salt, u) for u in c.utt_ids])


# --- logistic regression ------------------------------------------------------


def test_gradient_matches_central_differences():
    rng = make_rng(0)
    x = rng.standard_normal((40, 6))
    y = (rng.uniform(size=40) < 0.5).astype(float)
    h = 1e-6
    for _ in range(10):
        theta = rng.standard_normal(7)
        analytic = logistic_grad(theta, x, y, 0.1)
        numeric = np.array(
            [
                (logistic_loss(theta + h * e, x, y, 0.1) - logistic_loss(theta - h * e, x, y, 0.1)) / (2 * h)
                for e in np.eye(7)
            ]
        )
        rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(analytic)
        assert rel < 1e-5


def test_separable_loss_decreases_and_training_eer_is_zero():
    rng = make_rng(1)
    x = np.vstack([rng.normal(2.0, 0.5, (30, 4)), rng.normal(-2.0, 0.5, (30, 4))])
    y = np.r_[np.ones(30), np.zeros(30)]
    model = fit_logistic(x, y)
    assert np.all(np.diff(model.history) < 0)
    assert eer(y, model.score(x)) == 0.0


def test_loss_is_stable_for_large_margins():
    x = np.array([[1.0], [-1.0]])
    y = np.array([1.0, 0.0])
    assert math.isfinite(logistic_loss(np.array([1e4, 0.0]), x, y, 0.0))


SMALL = ToyCorpusConfig(n_bonafide=20, n_spoof=20, seed=3)
FAST = TrainHyper(epochs=2, steps_per_epoch=20)


def test_training_is_deterministic():
    corpus = gen_toy_corpus(SMALL, "T", P)
    a = train_classifier(corpus, PerturbationSpec.phase(PI), FAST, seed=5)
    b = train_classifier(corpus, PerturbationSpec.phase(PI), FAST, seed=5)
    c = train_classifier(corpus, PerturbationSpec.phase(PI), FAST, seed=6)
    assert np.array_equal(a.weights, b.weights) and a.bias == b.bias
    assert not np.array_equal(a.weights, c.weights)
    assert a.train_spec == PerturbationSpec.phase(PI)
    assert a.epochs == 2 and a.seed == 5


def test_training_needs_both_classes():
    corpus = gen_toy_corpus(SMALL, "T", P)
    with pytest.raises(InvalidInput):
        train_classifier(corpus.subset(range(20)), hyper=FAST)


# --- corpus ---------------------------------------------------------------------


def test_corpus_is_deterministic_and_labelled():
    a = gen_toy_corpus(SMALL, "T", P)
    b = gen_toy_corpus(SMALL, "T", P)
    assert a.utt_ids == b.utt_ids
    assert all(np.array_equal(x.samples, y.samples) for x, y in zip(a.waves, b.waves))
    assert a.labels.sum() == 20 and len(a) == 40
    assert a.utt_ids[0] == "TOY_T_B00000" and a.utt_ids[-1] == "TOY_T_S00019"
    other = gen_toy_corpus(SMALL, "E", P)
    assert not np.array_equal(a.waves[0].samples, other.waves[0].samples)


@pytest.mark.parametrize(
    "kwargs",
    [dict(n_bonafide=2), dict(duration=0.01), dict(spoof_phase_artifact_strength=-1.0), dict(sample_rate=0)],
)
def test_corpus_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ToyCorpusConfig(**kwargs).validate()


def test_no_artifact_means_no_signal():
    cfg = ToyCorpusConfig(spoof_phase_artifact_strength=0.0, spoof_magnitude_artifact_strength=0.0, seed=11)
    train = gen_toy_corpus(cfg, "T", P)
    model = train_classifier(train, seed=1)
    test, x = corpus_features(cfg, "E")
    assert abs(eer(test.labels, model.score(x)) - 0.5) <= 0.1


def test_phase_artifact_alone_is_visible_only_to_phase_features():
    cfg = ToyCorpusConfig(spoof_phase_artifact_strength=PI / 2, spoof_magnitude_artifact_strength=0.0, seed=12)
    train, xt = corpus_features(cfg, "T")
    test, xe = corpus_features(cfg, "E")
    phase_model = fit_logistic(xt[:, PHASE_ALL], train.labels)
    mag_model = fit_logistic(xt[:, MAGNITUDE], train.labels)
    assert eer(test.labels, phase_model.score(xe[:, PHASE_ALL])) < 0.1
    assert abs(eer(test.labels, mag_model.score(xe[:, MAGNITUDE])) - 0.5) <= 0.1


# --- features --------------------------------------------------------------------


def test_feature_layout():
    fv = extract_features(gen_toy_corpus(SMALL, "T", P).waves[0], P)
    assert fv.magnitude_features.shape == (N_BANDS,)
    assert fv.phase_features.shape == (2 * N_BANDS,)
    assert fv.as_array().shape == (FEATURE_DIM,)
    edges = band_edges(P.n_bins)
    assert edges[0] == 0 and edges[-1] == P.n_bins and len(edges) == N_BANDS + 1


def test_all_zero_input_defaults():
    fv = extract_features(Waveform(np.zeros(4000)), P)
    assert np.all(fv.magnitude_features == math.log(LOG_FLOOR))
    assert np.all(fv.phase_features == 0.0)


def test_too_short_input_rejected():
    with pytest.raises(InvalidInput):
        extract_features(Waveform(np.zeros(0)), P)


def test_bin_centred_sinusoid_has_no_deviation():
    k0 = 40
    x = np.cos(2 * PI * k0 * np.arange(16000) / P.fft_size + 0.7)
    spec = stft_complex(x, P)
    # interior frames see the exact analytic advance
    dev = phase_advance_deviation(spec[4:-4], P)
    assert np.all(np.abs(dev[:, k0]) < 1e-9)
    # the reflect-padded edge frames add a small residue to the band summary
    fv = extract_features(Waveform(x), P)
    band = np.searchsorted(band_edges(P.n_bins), k0, side="right") - 1
    assert abs(fv.phase_features[band]) < 0.02  # circular mean
    assert fv.phase_features[N_BANDS + band] < 0.02  # circular variance


def uniform_variance(n_frames):
    # 1 - E|R| for the resultant of n unit vectors with uniform angles
    return 1 - math.sqrt(math.pi / (4 * n_frames))


def test_full_width_perturbation_makes_phase_deviation_uniform():
    wave = gen_toy_corpus(SMALL, "T", P).waves[0]
    spec = stft_complex(wave.samples, P)
    grid = ComplexSpectrogram(np.abs(spec), np.angle(spec), P, len(wave))
    perturbed = perturb_phase_spectrogram(grid, 2 * PI, make_rng(4)).to_complex()
    var = features_from_spectrogram(perturbed, P).phase_features[N_BANDS:]
    clean = features_from_spectrogram(spec, P).phase_features[N_BANDS:]
    target = uniform_variance(spec.shape[0] - 1)
    assert np.all(np.abs(var - target) < 0.03)
    assert np.all(clean < var)


def test_resynthesised_full_width_perturbation_matches_noise_coherence():
    # after resynthesis overlapping frames re-correlate, so the ceiling is the
    # value white noise reaches through the same analysis, not the uniform one
    wave = gen_toy_corpus(SMALL, "T", P).waves[0]
    out = feature_matrix([wave], PerturbationSpec.phase(2 * PI), P, [9])[0, PHASE_VAR]
    noise = extract_features(Waveform(white_noise(len(wave), 0.01, seed=3)), P).phase_features[N_BANDS:]
    clean = extract_features(wave, P).phase_features[N_BANDS:]
    assert np.all(np.abs(out - noise) < 0.05)
    assert out.mean() > clean.mean() + 0.2


# --- experiments --------------------------------------------------------------------


def test_degenerate_grid_reproduces_baseline():
    grid = ExperimentGrid(
        (PerturbationSpec.none(),), (PerturbationSpec.none(),), seeds=(4,), corpus=SMALL, hyper=FAST
    )
    table = run_experiment(grid)
    cfg = ToyCorpusConfig(n_bonafide=20, n_spoof=20, seed=utterance_seed(SMALL.seed, "seed4"))
    model = train_classifier(gen_toy_corpus(cfg, "T", P), hyper=FAST, seed=4)
    test, x = corpus_features(cfg, "E")
    assert table.cell("none", "none") == eer(test.labels, model.score(x))
    assert table.pooled("none") == table.cell("none", "none")
    header = table.to_csv().splitlines()[0]
    assert header == "train,none,pooled,pooled_phase,pooled_magnitude"


def test_grid_is_a_pure_function():
    grid = ExperimentGrid(
        (PerturbationSpec.none(), PerturbationSpec.phase(PI)),
        (PerturbationSpec.none(), PerturbationSpec.phase(2 * PI)),
        seeds=(1, 2),
        corpus=SMALL,
        hyper=FAST,
    )
    assert run_experiment(grid).to_csv() == run_experiment(grid, workers=2).to_csv()


def test_grid_validation():
    with pytest.raises(ConfigError):
        ExperimentGrid((), (PerturbationSpec.none(),))
    with pytest.raises(ConfigError):
        ExperimentGrid((PerturbationSpec.none(),), (PerturbationSpec.none(), PerturbationSpec.none()))


@pytest.mark.slow
def test_magnitude_degradation_trend():
    # None-trained EER, averaged over the default seeds, never improves as
    # the eval SNR drops
    evals = tuple(PerturbationSpec.magnitude(snr) for snr in (10, 5, 0, -5, -10))
    table = run_experiment(ExperimentGrid((PerturbationSpec.none(),), evals))
    eers = [table.cell("none", e) for e in evals]
    assert np.all(np.diff(eers) >= 0), eers
