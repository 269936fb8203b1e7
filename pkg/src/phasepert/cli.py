"""Command-line front end: ``phasepert perturb|score|bench|info``.

Exit codes:

    0  success
    1  file or data error (unreadable audio, malformed score file, ...)
    2  usage or configuration error
    3  batch finished with some failed utterances
    4  batch finished with every utterance failed
"""

from __future__ import annotations

import argparse
import logging
import math
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .corpus import (
    METADATA_NAME,
    BatchJob,
    default_workers,
    read_audio_with_depth,
    read_protocol,
    run_batch,
)
from .dsp import COLA_TOLERANCE, StftParams, cola_deviation
from .errors import ConfigError, InvalidParams, PhasePertError
from .metrics import eer_table, eer_table_csv, pooled_eer, read_scores
from .perturb import STANDARD_PHASE_WIDTHS, STANDARD_SNRS_DB, Kind, PerturbationSpec, format_radians, parse_radians
from .toybench import (
    ExperimentGrid,
    ToyCorpusConfig,
    TrainHyper,
    default_eval_specs,
    default_train_specs,
    run_experiment,
)

log = logging.getLogger("phasepert")

EXIT_OK = 0
EXIT_DATA = 1
EXIT_USAGE = 2
EXIT_PARTIAL = 3
EXIT_TOTAL = 4


# --- shared helpers -------------------------------------------------------------


def _stft_from(args) -> StftParams:
    default = StftParams()
    return StftParams(
        args.fft_size if args.fft_size is not None else default.fft_size,
        args.hop_size if args.hop_size is not None else default.hop_size,
        args.window if args.window is not None else default.window,
    )


def _provenance(seed, spec: str, stft: StftParams, out=None) -> None:
    out = out or sys.stdout
    print(f"# phasepert {__version__}", file=out)
    print(f"# seed {seed}", file=out)
    print(f"# spec {spec}", file=out)
    print(f"# stft fft_size={stft.fft_size} hop_size={stft.hop_size} window={stft.window}", file=out)


def _radians(text: str) -> float:
    try:
        value = parse_radians(text)
    except InvalidParams as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    if not 0.0 <= value <= 2 * math.pi:
        raise argparse.ArgumentTypeError(f"phase width must lie in [0, 2pi], got {text}")
    return value


def _db(text: str) -> float:
    try:
        value = float(text.lower().removesuffix("db"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an SNR in dB: {text!r}") from None
    if not math.isfinite(value):
        raise argparse.ArgumentTypeError(f"SNR must be finite, got {text!r}")
    return value


def _spec_list(text: str) -> list[PerturbationSpec]:
    try:
        return [PerturbationSpec.parse(t) for t in text.split(",") if t.strip()]
    except InvalidParams as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _seed(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer seed: {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must lie in [0, 2^64), got {value}")
    return value


# --- perturb --------------------------------------------------------------------


def cmd_perturb(args) -> int:
    if args.phase is not None:
        spec = PerturbationSpec.phase(args.phase)
    elif args.snr is not None:
        spec = PerturbationSpec.magnitude(args.snr)
    else:
        spec = PerturbationSpec.none()
    stft = _stft_from(args)
    workers = args.workers if args.workers is not None else default_workers()
    manifest = read_protocol(args.manifest)
    job = BatchJob(manifest, Path(args.in_dir), Path(args.out), spec, stft, args.seed, workers, args.bit_depth)
    _provenance(args.seed, spec.label, stft)
    print(f"# workers {workers}")
    report = run_batch(job)
    print(report.summary())
    print(f"metadata written to {Path(args.out) / METADATA_NAME}")
    if report.count and report.succeeded == 0:
        return EXIT_TOTAL
    if report.failures:
        return EXIT_PARTIAL
    return EXIT_OK


# --- score ----------------------------------------------------------------------


def cmd_score(args) -> int:
    trials = read_scores(args.scores)
    rows = eer_table(trials)
    if args.pool:
        conds = [c.strip() for c in args.pool.split(",") if c.strip()]
        rows[-1] = ("pooled", pooled_eer(trials, conds))
    for cond, res in rows:
        print(f"{cond:<16} EER {res.percent:.2f}%  threshold {res.threshold:.6g}")
    if args.csv:
        Path(args.csv).write_text(eer_table_csv(rows))
        log.info("wrote %s", args.csv)
    return EXIT_OK


# --- bench ----------------------------------------------------------------------


def _plot(table, out_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    for kind, name, xlabel in (
        (Kind.PHASE, "phase_eer.png", "evaluation phase width"),
        (Kind.MAGNITUDE, "magnitude_eer.png", "evaluation SNR (dB)"),
    ):
        evals = [PerturbationSpec.none()] + [e for e in table.eval_specs if e.kind is kind]
        evals = [e for e in evals if e in table.eval_specs]
        if len(evals) < 2:
            continue
        fig, ax = plt.subplots(figsize=(6, 4))
        x = np.arange(len(evals))
        for tr in table.train_specs:
            ax.plot(x, [100 * table.cell(tr, e) for e in evals], marker="o", label=str(tr))
        ax.set_xticks(x, [str(e) for e in evals], rotation=30)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("EER (%)")
        ax.legend(title="trained on", fontsize="small")
        fig.tight_layout()
        path = out_dir / name
        # no software/date stamps, so reruns are byte-identical
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written


def cmd_bench(args) -> int:
    stft = _stft_from(args)
    corpus = ToyCorpusConfig(
        n_bonafide=args.n_per_class,
        n_spoof=args.n_per_class,
        spoof_phase_artifact_strength=args.phase_artifact,
        spoof_magnitude_artifact_strength=args.magnitude_artifact,
        seed=args.corpus_seed,
    )
    corpus.validate(stft)
    hyper = TrainHyper(epochs=args.epochs) if args.epochs is not None else TrainHyper()
    seeds = tuple(args.seed + i for i in range(args.seeds))
    grid = ExperimentGrid(
        tuple(args.train or default_train_specs()),
        tuple(args.eval or default_eval_specs()),
        seeds,
        corpus,
        hyper,
        stft,
    )
    workers = args.workers if args.workers is not None else default_workers()
    _provenance(",".join(map(str, seeds)), "toy benchmark", stft)
    print(f"# corpus {corpus}")
    print(f"# hyper {hyper}")
    table = run_experiment(grid, workers)
    for (train, seed), err in sorted(table.errors.items()):
        print(f"FAILED train={train} seed={seed}: {err}")
    print(f"{'train':<12} {'pooled':>8} {'phase':>8} {'magnitude':>10}")
    for row in table.rows()[1:]:
        print(f"{row[0]:<12} {row[-3]:>8} {row[-2]:>8} {row[-1]:>10}")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.csv").write_text(table.to_csv())
        for path in [out / "results.csv", *_plot(table, out)]:
            print(f"wrote {path}")
    if table.errors:
        return EXIT_TOTAL if len(table.errors) == len(grid.train_specs) * len(seeds) else EXIT_PARTIAL
    return EXIT_OK


# --- info -----------------------------------------------------------------------


def cmd_info(args) -> int:
    stft = _stft_from(args)
    print(f"phasepert {__version__}")
    print(f"python {platform.python_version()}, numpy {np.__version__}, scipy {scipy.__version__}")
    print(f"stft fft_size={stft.fft_size} hop_size={stft.hop_size} window={stft.window}")
    dev = cola_deviation(stft.window_array, stft.hop_size)
    print(f"cola deviation {dev:.3g} (tolerance {COLA_TOLERANCE:g})")
    print("phase widths " + ", ".join(format_radians(n) for n in STANDARD_PHASE_WIDTHS))
    print("snr levels (dB) " + ", ".join(f"{s:g}" for s in STANDARD_SNRS_DB))
    print("utterance seed = splitmix64(global_seed ^ blake2b64(utt_id)), PCG64 generator")
    print(f"workers {default_workers()} (override with PHASEPERT_WORKERS)")
    status = EXIT_OK
    for name in args.files:
        try:
            wave, depth = read_audio_with_depth(name)
        except (PhasePertError, OSError) as exc:
            print(f"{name}: {type(exc).__name__}: {exc}")
            status = EXIT_DATA
            continue
        peak = float(np.max(np.abs(wave.samples))) if len(wave) else 0.0
        print(
            f"{name}: {wave.sample_rate} Hz, {len(wave)} samples ({wave.duration:.3f} s), "
            f"{depth}-bit, peak {peak:.4f}, frames {stft.n_frames(len(wave))}"
        )
    return status


# --- parser ---------------------------------------------------------------------


def _add_stft(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("STFT")
    g.add_argument("--fft-size", type=int, help="FFT size (default 512)")
    g.add_argument("--hop-size", type=int, help="hop size (default 128)")
    g.add_argument("--window", help="window name (default hann)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phasepert", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"phasepert {__version__}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="log progress")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="log errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("perturb", help="perturb every utterance of a manifest")
    which = p.add_mutually_exclusive_group(required=True)
    which.add_argument("--phase", type=_radians, metavar="RAD", help="phase width, e.g. 1.57 or pi/2")
    which.add_argument("--snr", type=_db, metavar="DB", help="magnitude perturbation SNR in dB")
    which.add_argument("--none", action="store_true", help="identity pipeline (analysis and resynthesis)")
    p.add_argument("--manifest", required=True, help="protocol file listing the utterances")
    p.add_argument("--in", dest="in_dir", required=True, help="audio root")
    p.add_argument("--out", required=True, help="output root")
    p.add_argument("--seed", type=_seed, default=0, help="global seed (default 0)")
    p.add_argument("--workers", type=_positive_int, help="worker processes (default PHASEPERT_WORKERS or 1)")
    p.add_argument("--bit-depth", type=int, choices=(16, 32), help="output depth (default: keep input)")
    _add_stft(p)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("score", help="EER per condition and pooled")
    p.add_argument("scores", help="score file: utt_id condition score label")
    p.add_argument("--csv", help="also write the table as CSV")
    p.add_argument("--pool", help="comma-separated conditions for the pooled row (default all)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("bench", help="run the synthetic train/eval grid")
    p.add_argument("--seed", type=_seed, default=1, help="first grid seed (default 1)")
    p.add_argument("--seeds", type=_positive_int, default=3, help="number of seeds averaged (default 3)")
    p.add_argument("--train", type=_spec_list, help="training specs, e.g. none,phase:pi,snr:0")
    p.add_argument("--eval", type=_spec_list, help="evaluation specs (default: none, four widths, five SNRs)")
    p.add_argument("--n-per-class", type=int, default=100, help="utterances per class and split")
    p.add_argument("--epochs", type=_positive_int, help="training epochs")
    p.add_argument("--phase-artifact", type=float, default=0.6, help="spoof phase artifact strength")
    p.add_argument("--magnitude-artifact", type=float, default=5.0, help="spoof magnitude artifact (dB)")
    p.add_argument("--corpus-seed", type=_seed, default=0, help="toy corpus base seed")
    p.add_argument("--workers", type=_positive_int, help="worker processes over seeds")
    p.add_argument("--out-dir", help="write results.csv and plots here")
    _add_stft(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("info", help="defaults, versions and optional WAV details")
    p.add_argument("files", nargs="*", help="WAV files to describe")
    _add_stft(p)
    p.set_defaults(func=cmd_info)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.INFO if args.verbose else logging.ERROR if args.quiet else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, InvalidParams) as exc:
        print(f"phasepert {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PhasePertError, OSError, ValueError) as exc:
        print(f"phasepert {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
