"""Corpus I/O and the deterministic batch perturbation runner."""

from __future__ import annotations

import hashlib
import logging
import os
import struct
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.io import wavfile

from . import __version__
from .dsp import StftParams, Waveform
from .errors import ConfigError, CorruptFile, ParseError, PhasePertError, UnsupportedFormat
from .perturb import SEED_MASK, Kind, PerturbationSpec, apply

log = logging.getLogger(__name__)

LABELS = ("bonafide", "spoof")
METADATA_NAME = "perturbation_job.txt"


# --- protocol manifests ------------------------------------------------------


@dataclass(frozen=True)
class ProtocolEntry:
    speaker_id: str
    utt_id: str
    attack_id: str
    label: str
    condition: str = "-"

    @property
    def is_bonafide(self) -> bool:
        return self.label == "bonafide"


def parse_protocol(text: str) -> list[ProtocolEntry]:
    """Parse an ASVspoof LA countermeasure protocol.

    Two layouts are accepted. The 2019 LA layout has five columns,
    ``speaker utt_id system attack label`` (``-`` placeholders allowed). The
    2021 LA key layout has eight, ``speaker utt_id codec transmission attack
    label trim subset``; its codec column becomes the entry's condition.
    """
    entries = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) == 5:
            speaker, utt, _system, attack, label = fields
            condition = "-"
        elif len(fields) == 8:
            speaker, utt, condition, _tx, attack, label, _trim, _subset = fields
        else:
            raise ParseError(f"expected 5 or 8 fields, got {len(fields)}", lineno)
        if label not in LABELS:
            raise ParseError(f"unknown label {label!r}", lineno)
        if utt in seen:
            raise ParseError(f"duplicate utterance id {utt!r} (first on line {seen[utt]})", lineno)
        seen[utt] = lineno
        entries.append(ProtocolEntry(speaker, utt, attack, label, condition))
    return entries


def read_protocol(path: str | Path) -> list[ProtocolEntry]:
    return parse_protocol(Path(path).read_text())


def format_protocol(entries: Iterable[ProtocolEntry]) -> str:
    return "".join(f"{e.speaker_id} {e.utt_id} - {e.attack_id} {e.label}\n" for e in entries)


# --- audio files -------------------------------------------------------------


_PCM, _IEEE_FLOAT, _EXTENSIBLE = 0x0001, 0x0003, 0xFFFE


def _wav_format_tag(path: Path) -> int:
    """Codec tag from the ``fmt `` chunk; the subformat tag for extensible files."""
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12 or head[:4] not in (b"RIFF", b"RIFX", b"RF64") or head[8:] != b"WAVE":
            raise CorruptFile(f"{path}: not a RIFF/WAVE file")
        order = ">" if head[:4] == b"RIFX" else "<"
        while True:
            chunk = fh.read(8)
            if len(chunk) < 8:
                raise CorruptFile(f"{path}: no fmt chunk before end of file")
            cid, size = chunk[:4], struct.unpack(order + "I", chunk[4:])[0]
            if cid == b"fmt ":
                fmt = fh.read(size)
                if len(fmt) < 2:
                    raise CorruptFile(f"{path}: truncated fmt chunk")
                tag = struct.unpack(order + "H", fmt[:2])[0]
                if tag == _EXTENSIBLE and len(fmt) >= 26:
                    tag = struct.unpack(order + "H", fmt[24:26])[0]
                return tag
            fh.seek(size + (size & 1), 1)


def read_audio_with_depth(path: str | Path) -> tuple[Waveform, int]:
    """Read a mono WAV file; returns the waveform and its bit depth (16 or 32)."""
    path = Path(path)
    tag = _wav_format_tag(path)
    if tag not in (_PCM, _IEEE_FLOAT):
        raise UnsupportedFormat(f"{path}: WAV format tag 0x{tag:04x} (need PCM or IEEE float)")
    try:
        with warnings.catch_warnings():
            # scipy warns and carries on over truncated or malformed chunks
            warnings.simplefilter("error", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except (ValueError, EOFError, struct.error, wavfile.WavFileWarning) as exc:
        raise CorruptFile(f"{path}: {exc}") from exc

    if data.ndim != 1:
        raise UnsupportedFormat(f"{path}: {data.shape[1]} channels, only mono is supported")
    if data.dtype == np.int16:
        return Waveform(data.astype(np.float64) / 32768.0, rate), 16
    if data.dtype == np.float32:
        if not np.all(np.isfinite(data)):
            raise CorruptFile(f"{path}: non-finite float samples")
        return Waveform(data.astype(np.float64), rate), 32
    raise UnsupportedFormat(f"{path}: sample type {data.dtype} (need 16-bit PCM or 32-bit float)")


def read_audio(path: str | Path) -> Waveform:
    return read_audio_with_depth(path)[0]


def write_audio(path: str | Path, wave: Waveform, bit_depth: int = 16) -> None:
    if bit_depth == 16:
        data = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype(np.int16)
    elif bit_depth == 32:
        data = wave.samples.astype(np.float32)
    else:
        raise UnsupportedFormat(f"bit depth {bit_depth} (need 16 or 32)")
    wavfile.write(Path(path), wave.sample_rate, data)


# --- seeds ---------------------------------------------------------------------


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & SEED_MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & SEED_MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & SEED_MASK
    return x ^ (x >> 31)


def stable_hash64(text: str) -> int:
    """BLAKE2b-64 of the UTF-8 text, little-endian."""
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def utterance_seed(global_seed: int, utt_id: str) -> int:
    """Per-utterance seed: ``splitmix64(global_seed XOR blake2b64(utt_id))``.

    splitmix64 is a bijection, so for a fixed id distinct global seeds always
    give distinct utterance seeds.
    """
    return _splitmix64((int(global_seed) & SEED_MASK) ^ stable_hash64(utt_id))


# --- batch runner ----------------------------------------------------------------


@dataclass
class BatchJob:
    manifest: Sequence[ProtocolEntry]
    audio_root: Path
    output_root: Path
    spec: PerturbationSpec = field(default_factory=PerturbationSpec.none)
    stft: StftParams = field(default_factory=StftParams)
    global_seed: int = 0
    workers: int = 1
    #: force the output bit depth; ``None`` keeps each input's depth
    bit_depth: int | None = None


@dataclass
class BatchReport:
    count: int = 0
    succeeded: int = 0
    failures: list[tuple[str, str]] = field(default_factory=list)
    wall_time: float = 0.0
    audio_seconds: float = 0.0

    @property
    def realtime_factor(self) -> float:
        return self.audio_seconds / self.wall_time if self.wall_time > 0 else float("inf")

    def summary(self) -> str:
        lines = [
            f"processed {self.succeeded}/{self.count} utterances, {len(self.failures)} failed",
            f"audio {self.audio_seconds:.2f} s in {self.wall_time:.2f} s "
            f"({self.realtime_factor:.1f}x realtime)",
        ]
        lines += [f"FAILED {utt}: {err}" for utt, err in self.failures]
        return "\n".join(lines)


@dataclass(frozen=True)
class _Task:
    utt_id: str
    src: Path
    dst: Path
    spec: PerturbationSpec
    stft: StftParams
    seed: int
    bit_depth: int | None


def _run_task(task: _Task) -> tuple[str, str | None, float]:
    try:
        wave, depth = read_audio_with_depth(task.src)
        out = apply(wave, task.spec, task.stft, task.seed)
        task.dst.parent.mkdir(parents=True, exist_ok=True)
        write_audio(task.dst, out, task.bit_depth or depth)
        return task.utt_id, None, wave.duration
    except (PhasePertError, OSError, ValueError) as exc:
        return task.utt_id, f"{type(exc).__name__}: {exc}", 0.0


def index_audio(audio_root: Path) -> dict[str, Path]:
    """Map utterance id (file stem) to path relative to ``audio_root``."""
    index: dict[str, Path] = {}
    clashes = []
    for path in sorted(audio_root.rglob("*.wav")):
        rel = path.relative_to(audio_root)
        if path.stem in index:
            clashes.append(f"{index[path.stem]} / {rel}")
        index[path.stem] = rel
    if clashes:
        raise ConfigError("ambiguous utterance ids under audio root: " + "; ".join(clashes))
    return index


def job_metadata(job: BatchJob) -> str:
    """Provenance sidecar text. Excludes worker count and timings so the
    output tree is identical whatever the parallelism."""
    spec = job.spec
    lines = [
        "# phasepert batch perturbation job",
        f"toolkit_version = {__version__}",
        f"spec = {spec.label}",
        f"kind = {spec.kind.value}",
        f"phase_width_rad = {spec.phase_width!r}" if spec.kind is Kind.PHASE else "phase_width_rad = -",
        f"snr_db = {spec.snr_db!r}" if spec.kind is Kind.MAGNITUDE else "snr_db = -",
        f"stft.fft_size = {job.stft.fft_size}",
        f"stft.hop_size = {job.stft.hop_size}",
        f"stft.window = {job.stft.window}",
        f"global_seed = {job.global_seed}",
        f"bit_depth = {job.bit_depth or 'input'}",
        "seed_derivation = splitmix64(global_seed ^ blake2b64(utt_id))",
        f"utterances = {len(job.manifest)}",
    ]
    lines += [f"seed.{e.utt_id} = {utterance_seed(job.global_seed, e.utt_id)}" for e in job.manifest]
    return "\n".join(lines) + "\n"


def run_batch(job: BatchJob) -> BatchReport:
    audio_root = Path(job.audio_root)
    output_root = Path(job.output_root)
    if not audio_root.is_dir():
        raise ConfigError(f"audio root {audio_root} is not a directory")
    if output_root.resolve() == audio_root.resolve():
        raise ConfigError("output root must differ from audio root")
    if job.workers < 1:
        raise ConfigError(f"workers must be >= 1, got {job.workers}")

    start = time.perf_counter()
    report = BatchReport(count=len(job.manifest))
    index = index_audio(audio_root)
    output_root.mkdir(parents=True, exist_ok=True)

    tasks = []
    for entry in job.manifest:
        rel = index.get(entry.utt_id)
        if rel is None:
            report.failures.append((entry.utt_id, f"no audio file {entry.utt_id}.wav under {audio_root}"))
            continue
        tasks.append(
            _Task(
                entry.utt_id,
                audio_root / rel,
                output_root / rel,
                job.spec,
                job.stft,
                utterance_seed(job.global_seed, entry.utt_id),
                job.bit_depth,
            )
        )

    if job.workers == 1 or len(tasks) <= 1:
        results = map(_run_task, tasks)
    else:
        pool = ProcessPoolExecutor(max_workers=job.workers)
        chunk = max(1, len(tasks) // (4 * job.workers))
        results = pool.map(_run_task, tasks, chunksize=chunk)
    try:
        for utt_id, error, seconds in results:
            if error is None:
                report.succeeded += 1
                report.audio_seconds += seconds
            else:
                log.warning("failed %s: %s", utt_id, error)
                report.failures.append((utt_id, error))
    finally:
        if job.workers > 1 and len(tasks) > 1:
            pool.shutdown()

    (output_root / METADATA_NAME).write_text(job_metadata(job))
    report.wall_time = time.perf_counter() - start
    return report


def default_workers() -> int:
    """Worker count from ``PHASEPERT_WORKERS``, else 1."""
    value = os.environ.get("PHASEPERT_WORKERS", "1")
    try:
        workers = int(value)
    except ValueError:
        raise ConfigError(f"PHASEPERT_WORKERS must be an integer, got {value!r}") from None
    if workers < 1:
        raise ConfigError(f"PHASEPERT_WORKERS must be >= 1, got {workers}")
    return workers
