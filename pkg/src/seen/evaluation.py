"""Evaluation protocol: random window starts, confusion matrix, WAR/UAR, JSON report."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .events import LIGHTING, NUM_CLASSES, ProtocolError, SequenceRecord, WindowSpec, aggregate_window, slice_windows

log = logging.getLogger(__name__)

CLASS_NAMES = ("happiness", "sadness", "anger", "disgust", "surprise", "fear", "neutral")
REPORT_SCHEMA = "seen-eval-report"
REPORT_VERSION = 1


@dataclass(frozen=True)
class EvalProtocol:
    window: WindowSpec
    trials: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


def random_start(duration: int, window: WindowSpec, rng: np.random.Generator) -> int:
    """Uniform whole-microsecond start in [0, duration - testing length]."""
    length = window.testing_length_us
    if not duration > length:
        raise ProtocolError(f"sequence of {duration} us is not longer than the {window} testing length {length} us")
    return int(rng.integers(0, duration - length, endpoint=True))


def trial_starts(duration: int, protocol: EvalProtocol) -> list[int]:
    """Starts for every trial of one sequence.

    Trial j draws from its own generator seeded with seed + j, so a start never
    depends on evaluation order or worker count, and every sequence sees the
    same stream of draws.
    """
    return [random_start(duration, protocol.window, np.random.default_rng(protocol.seed + j))
            for j in range(protocol.trials)]


def prepare_batch(seqs: Sequence[SequenceRecord], starts: Sequence[int], window: WindowSpec):
    """Stack model inputs for one window per (sequence, start).

    Returns ``(i1, in_, event_frames, labels)`` with frames shaped (N, H, W)
    and one (N, 2, H, W) array per event window.
    """
    i1s, ins, per_seq = [], [], []
    for seq, start in zip(seqs, starts):
        windows, i1, in_ = slice_windows(seq, start, window)
        i1s.append(i1.pixels)
        ins.append(in_.pixels)
        per_seq.append([aggregate_window(w, seq.height, seq.width).channels for w in windows])
    frames = [np.stack([ws[k] for ws in per_seq]) for k in range(window.x)]
    labels = np.array([s.label for s in seqs], dtype=np.int64)
    return np.stack(i1s), np.stack(ins), frames, labels


def predict(model, seq: SequenceRecord, starts: Sequence[int], window: WindowSpec) -> list[int]:
    preds = []
    for start in starts:
        i1, in_, frames, _ = prepare_batch([seq], [start], window)
        scores = model.forward_sequence(i1, in_, frames)
        preds.append(int(np.argmax(scores.R.data[0])))  # ties resolve to the lowest index
    return preds


class ConfusionMatrix:
    """Rows are true classes, columns predictions."""

    def __init__(self, classes: int = NUM_CLASSES):
        self.counts = np.zeros((classes, classes), dtype=np.int64)

    def add(self, truth: int, pred: int) -> None:
        self.counts[truth, pred] += 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def war(self) -> float:
        if self.total == 0:
            raise ValueError("empty confusion matrix")
        return float(np.trace(self.counts) / self.total)

    def uar(self) -> float:
        support = self.counts.sum(axis=1)
        seen = support > 0
        if not seen.any():
            raise ValueError("empty confusion matrix")
        recall = np.diag(self.counts)[seen] / support[seen]
        return float(recall.mean())

    def per_class(self) -> list[float | None]:
        support = self.counts.sum(axis=1)
        return [float(self.counts[c, c] / support[c]) if support[c] else None for c in range(len(support))]


def metrics(cm: ConfusionMatrix) -> tuple[float, float]:
    return cm.war(), cm.uar()


@dataclass
class TrialRecord:
    sequence: str
    trial: int
    start_us: int
    label: int
    pred: int
    lighting: str


@dataclass
class EvalReport:
    protocol: EvalProtocol
    confusion: ConfusionMatrix
    trials: list[TrialRecord] = field(default_factory=list)
    excluded: list[str] = field(default_factory=list)

    @property
    def war(self) -> float:
        return self.confusion.war()

    @property
    def uar(self) -> float:
        return self.confusion.uar()

    def per_lighting(self) -> dict[str, float | None]:
        out = {}
        for tag in LIGHTING:
            hits = [r.pred == r.label for r in self.trials if r.lighting == tag]
            out[tag] = float(np.mean(hits)) if hits else None
        return out

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "version": REPORT_VERSION,
            "window": str(self.protocol.window),
            "trials": self.protocol.trials,
            "seed": self.protocol.seed,
            "n_sequences": len({r.sequence for r in self.trials}),
            "war": self.war,
            "uar": self.uar,
            "per_class_accuracy": dict(zip(CLASS_NAMES, self.confusion.per_class())),
            "per_lighting_accuracy": self.per_lighting(),
            "confusion_matrix": self.confusion.counts.tolist(),
            "excluded": list(self.excluded),
            "trial_log": [vars(r) for r in self.trials],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def evaluate_sequences(model, sequences: Sequence[SequenceRecord], protocol: EvalProtocol,
                       jobs: int = 1) -> EvalReport:
    """Run ``protocol.trials`` windows per sequence with fresh LIF state each time.

    Sequences not longer than the testing length are excluded with a warning.
    The result does not depend on ``jobs``.
    """
    model.eval()
    usable, excluded = [], []
    for s in sequences:
        if s.duration > protocol.window.testing_length_us:
            usable.append(s)
        else:
            log.warning("sequence %s is shorter than the %s testing length; excluded", s.name, protocol.window)
            excluded.append(s.name)
    if not usable:
        raise ProtocolError("no sequence is long enough for the evaluation window")

    def run(seq: SequenceRecord):
        starts = trial_starts(seq.duration, protocol)
        return starts, predict(model, seq, starts, protocol.window)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, usable))
    else:
        results = [run(s) for s in usable]
    cm = ConfusionMatrix()
    records = []
    for seq, (starts, preds) in zip(usable, results):
        for j, (start, pred) in enumerate(zip(starts, preds)):
            cm.add(seq.label, pred)
            records.append(TrialRecord(seq.name, j, start, seq.label, pred, seq.lighting))
    return EvalReport(protocol, cm, records, excluded)
