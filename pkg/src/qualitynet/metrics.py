"""MSE, Pearson LCC, Spearman SRCC and the clean-speech frame-variance diagnostic."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from qualitynet import net
from qualitynet._io import atomic_open, atomic_write_text

log = logging.getLogger(__name__)


class UndefinedCorrelation(ValueError):
    """A correlation was requested for constant or too-short input."""


def _pair(x, y, min_len: int = 1):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < min_len:
        raise ValueError(f"need at least {min_len} values, got {x.size}")
    return x, y


def mse(truth, pred) -> float:
    t, p = _pair(truth, pred)
    return float(np.mean((t - p) ** 2))


def pearson_lcc(x, y) -> float:
    x, y = _pair(x, y, 2)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("undefined correlation: constant input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    sorted_x = x[order]
    start = 0
    while start < x.size:
        stop = start + 1
        while stop < x.size and sorted_x[stop] == sorted_x[start]:
            stop += 1
        ranks[order[start:stop]] = 0.5 * (start + stop - 1) + 1.0
        start = stop
    return ranks


def spearman_srcc(x, y) -> float:
    x, y = _pair(x, y, 2)
    return pearson_lcc(average_ranks(x), average_ranks(y))


def frame_variance_clean(results: Sequence[net.AssessmentResult]) -> float:
    """Mean over utterances of the population variance of their frame scores."""
    if not results:
        raise ValueError("no clean utterances to average over")
    return float(np.mean([np.var(np.asarray(r.q, dtype=np.float64)) for r in results]))


@dataclass
class ReportRow:
    utterance_id: str
    condition: str
    label_q: float
    pred_q: float


@dataclass
class EvalReport:
    mse: float
    lcc: float | None
    srcc: float | None
    n: int
    rows: list[ReportRow] = field(default_factory=list, repr=False)
    clean_frame_variance: float | None = None
    failures: int = 0
    error: str | None = None  # set when a correlation is undefined

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("rows")
        return d

    def write_json(self, path) -> None:
        atomic_write_text(path, json.dumps(self.summary(), indent=2) + "\n")

    def write_rows_csv(self, path) -> None:
        with atomic_open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["utterance_id", "condition", "label_q", "pred_q"])
            for r in self.rows:
                w.writerow([r.utterance_id, r.condition, f"{r.label_q:.4f}", f"{r.pred_q:.6f}"])


def summarize(labels, preds, rows=None, clean_results=None, failures=0) -> EvalReport:
    labels = np.asarray(labels, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    report = EvalReport(mse(labels, preds), None, None, labels.size, list(rows or []), failures=failures)
    try:
        report.lcc = pearson_lcc(labels, preds)
        report.srcc = spearman_srcc(labels, preds)
    except (UndefinedCorrelation, ValueError) as exc:
        report.error = str(exc)
    usable = [r for r in clean_results or [] if np.size(r.q) >= 2]
    if usable:
        report.clean_frame_variance = frame_variance_clean(usable)
    return report


def evaluate_features(params: net.ModelParams, specs, labels, clamp: bool = False) -> EvalReport:
    preds = []
    for spec in specs:
        q = net.predict(spec, params).Q
        preds.append(min(max(q, 1.0), 4.5) if clamp else q)
    return summarize(labels, preds)


def evaluate(params: net.ModelParams, manifest, stft=None, clamp: bool = False) -> EvalReport:
    """Score every manifest entry; unreadable entries are logged and counted, not fatal."""
    from qualitynet.features import StftConfig, magnitude_spectrogram
    from qualitynet.signal import read_wav

    stft = stft or StftConfig()
    if not len(manifest):
        raise ValueError("empty test manifest")
    rows, clean, failures = [], [], 0
    for entry in manifest:
        try:
            spec = magnitude_spectrogram(read_wav(manifest.resolve(entry)), stft)
        except (OSError, ValueError) as exc:
            log.warning("%s: skipped (%s)", entry.utterance_id, exc)
            failures += 1
            continue
        result = net.predict(spec, params)
        q = min(max(result.Q, 1.0), 4.5) if clamp else result.Q
        rows.append(ReportRow(entry.utterance_id, entry.condition, entry.label_q, q))
        if entry.condition == "clean":
            clean.append(result)
    if not rows:
        raise ValueError("no utterance in the manifest could be scored")
    return summarize([r.label_q for r in rows], [r.pred_q for r in rows], rows, clean, failures)
