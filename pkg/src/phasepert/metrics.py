"""Equal error rate scoring for bonafide/spoof trials.

Conventions: a trial is accepted as bonafide when ``score >= threshold``.
Operating points are taken at every distinct score plus ``+inf`` (accept
nothing). When FAR and FRR never meet exactly, the crossing is linearly
interpolated between the two bracketing operating points.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInput, ParseError

LABELS = ("bonafide", "spoof")


@dataclass(frozen=True)
class TrialScore:
    utt_id: str
    condition: str
    score: float
    label: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise InvalidInput(f"label must be one of {LABELS}, got {self.label!r}")
        if not math.isfinite(self.score):
            raise InvalidInput(f"score for {self.utt_id} is not finite")

    @property
    def is_bonafide(self) -> bool:
        return self.label == "bonafide"


@dataclass(frozen=True)
class EerResult:
    eer: float
    threshold: float

    @property
    def percent(self) -> float:
        return 100.0 * self.eer


def _split(trials: Iterable[TrialScore]) -> tuple[np.ndarray, np.ndarray]:
    bona, spoof = [], []
    for t in trials:
        (bona if t.is_bonafide else spoof).append(t.score)
    return np.asarray(bona, dtype=np.float64), np.asarray(spoof, dtype=np.float64)


def det_curve(bonafide: np.ndarray, spoof: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thresholds, FAR and FRR at every distinct score plus ``+inf``."""
    bonafide = np.sort(np.asarray(bonafide, dtype=np.float64))
    spoof = np.sort(np.asarray(spoof, dtype=np.float64))
    if bonafide.size == 0 or spoof.size == 0:
        raise InvalidInput("EER needs at least one bonafide and one spoof trial")
    thresholds = np.append(np.unique(np.concatenate([bonafide, spoof])), np.inf)
    far = (spoof.size - np.searchsorted(spoof, thresholds, side="left")) / spoof.size
    frr = np.searchsorted(bonafide, thresholds, side="left") / bonafide.size
    return thresholds, far, frr


def eer_from_scores(bonafide: np.ndarray, spoof: np.ndarray) -> EerResult:
    thresholds, far, frr = det_curve(bonafide, spoof)
    diff = far - frr
    # diff starts at 1 (accept all) and ends at -1 (accept none)
    exact = np.flatnonzero(diff == 0)
    if exact.size:
        i = exact[0]
        return EerResult(float(far[i]), float(thresholds[i]))
    i = int(np.flatnonzero(diff > 0)[-1])
    alpha = diff[i] / (diff[i] - diff[i + 1])
    eer = far[i] + alpha * (far[i + 1] - far[i])
    lo, hi = thresholds[i], thresholds[i + 1]
    threshold = lo + alpha * (hi - lo) if np.isfinite(hi) else lo
    return EerResult(float(eer), float(threshold))


def compute_eer(trials: Iterable[TrialScore]) -> EerResult:
    return eer_from_scores(*_split(trials))


def pooled_eer(trials: Iterable[TrialScore], conditions: Iterable[str] | None = None) -> EerResult:
    """EER over the concatenation of all trials in ``conditions``.

    This is not the mean of per-condition EERs: score offsets between
    conditions hurt the pooled value even when each condition is separable.
    """
    trials = list(trials)
    if conditions is not None:
        wanted = set(conditions)
        trials = [t for t in trials if t.condition in wanted]
    if not trials:
        raise InvalidInput("no trials in the selected conditions")
    return compute_eer(trials)


def det_points(trials: Iterable[TrialScore]) -> list[tuple[float, float, float]]:
    thresholds, far, frr = det_curve(*_split(trials))
    return list(zip(thresholds.tolist(), far.tolist(), frr.tolist()))


def per_condition_eer(trials: Sequence[TrialScore]) -> dict[str, EerResult]:
    by_cond: dict[str, list[TrialScore]] = {}
    for t in trials:
        by_cond.setdefault(t.condition, []).append(t)
    return {c: compute_eer(ts) for c, ts in sorted(by_cond.items())}


# --- score files: "utt_id condition score label" per line ---------------------


def parse_scores(text: str) -> list[TrialScore]:
    trials = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 4:
            raise ParseError(f"expected 4 fields, got {len(fields)}", lineno)
        utt, cond, score, label = fields
        try:
            value = float(score)
        except ValueError:
            raise ParseError(f"score {score!r} is not a number", lineno) from None
        if label not in LABELS:
            raise ParseError(f"unknown label {label!r}", lineno)
        if not math.isfinite(value):
            raise ParseError(f"score {score!r} is not finite", lineno)
        trials.append(TrialScore(utt, cond, value, label))
    return trials


def read_scores(path: str | Path) -> list[TrialScore]:
    return parse_scores(Path(path).read_text())


def format_scores(trials: Iterable[TrialScore]) -> str:
    return "".join(f"{t.utt_id} {t.condition} {t.score!r} {t.label}\n" for t in trials)


def write_scores(path: str | Path, trials: Iterable[TrialScore]) -> None:
    Path(path).write_text(format_scores(trials))


def eer_table(trials: Sequence[TrialScore]) -> list[tuple[str, EerResult]]:
    """Per-condition rows followed by a ``pooled`` row."""
    rows = list(per_condition_eer(trials).items())
    rows.append(("pooled", pooled_eer(trials)))
    return rows


def eer_table_csv(rows: Sequence[tuple[str, EerResult]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["condition", "eer", "threshold"])
    for cond, res in rows:
        writer.writerow([cond, f"{res.eer:.6f}", f"{res.threshold:.6g}"])
    return buf.getvalue()
