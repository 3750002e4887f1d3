"""Anomaly scores, validation threshold search, and binary metrics.

Defect is the positive class and a sample is called defective when its
score is strictly greater than the threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .training import INFERENCE_BATCH, ModelBundle, _batches

NORMAL, DEFECT = 0, 1
STEP_FRACTION = 0.1
LOWER_SPAN = 10.0
MAX_GRID = 2_000_000


class DegenerateScoresError(ValueError):
    pass


@dataclass
class ScoredSample:
    score: float
    truth: int
    predicted: int | None = None

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError("scores must be finite")


def anomaly_scores(bundle: ModelBundle, X: np.ndarray, w_svdd: float | None = None) -> np.ndarray:
    """Per-sample scores for flattened one-hot inputs ``X`` (n, 3*S*S).

    dsvdd: ``|mu - C|^2 - R^2``; aae: mean L1 reconstruction error from the
    mean latent; aae_dsvdd: the L1 error plus ``w_svdd`` times the SVDD term.
    """
    kind = bundle.kind
    if kind in ("dsvdd", "aae_dsvdd") and not bundle.sphere.initialized:
        raise ValueError(f"{kind} bundle has no hypersphere; train it first")
    if w_svdd is None:
        w_svdd = bundle.config.w_svdd
    enc, dec = bundle.encoder, bundle.decoder
    out = []
    for s in _batches(len(X), INFERENCE_BATCH):
        x = X[s].astype(np.float32)
        mu = enc.mean(Tensor(x)).data
        score = np.zeros(len(x), dtype=np.float64)
        if kind != "aae":
            c = bundle.sphere.center.astype(np.float32)
            d2 = ((mu - c) ** 2).sum(axis=1, dtype=np.float32).astype(np.float64)
            svdd = d2 - bundle.sphere.radius ** 2
            score += svdd if kind == "dsvdd" else w_svdd * svdd
        if kind != "dsvdd":
            recon = dec(Tensor(mu)).data
            score += np.abs(recon - x).mean(axis=1, dtype=np.float64)
        out.append(score)
    scores = np.concatenate(out) if out else np.zeros(0)
    if not np.all(np.isfinite(scores)):
        from .training import NumericError
        raise NumericError("non-finite anomaly score")
    return scores


def anomaly_score(bundle: ModelBundle, x: np.ndarray) -> float:
    """Score of a single encoded wafer, shape (3, S, S) or flattened."""
    return float(anomaly_scores(bundle, np.asarray(x).reshape(1, -1))[0])


def classify(scores, threshold: float) -> np.ndarray:
    return (np.asarray(scores, dtype=np.float64) > threshold).astype(np.int8)


@dataclass
class EvalReport:
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    zero_division: tuple[str, ...] = ()

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def as_dict(self) -> dict:
        return {"threshold": self.threshold, "tp": self.tp, "fp": self.fp, "tn": self.tn,
                "fn": self.fn, "accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1,
                "zero_division": ",".join(self.zero_division)}


def metrics(predictions, truths, threshold: float = float("nan")) -> EvalReport:
    p = np.asarray(predictions).astype(np.int64).ravel()
    t = np.asarray(truths).astype(np.int64).ravel()
    if p.shape != t.shape:
        raise ValueError(f"{p.size} predictions vs {t.size} labels")
    tp = int(np.sum((p == 1) & (t == 1)))
    fp = int(np.sum((p == 1) & (t == 0)))
    tn = int(np.sum((p == 0) & (t == 0)))
    fn = int(np.sum((p == 0) & (t == 1)))
    return report_from_counts(tp, fp, tn, fn, threshold)


def report_from_counts(tp: int, fp: int, tn: int, fn: int, threshold: float = float("nan")) -> EvalReport:
    flags = []
    total = tp + fp + tn + fn

    def ratio(num, den, name):
        if den == 0:
            flags.append(name)
            return 0.0
        return num / den

    accuracy = ratio(tp + tn, total, "accuracy")
    precision = ratio(tp, tp + fp, "precision")
    recall = ratio(tp, tp + fn, "recall")
    f1 = ratio(2 * precision * recall, precision + recall, "f1")
    return EvalReport(threshold, tp, fp, tn, fn, accuracy, precision, recall, f1, tuple(flags))


@dataclass
class GridReport:
    mean: float
    std: float
    step: float
    ks: np.ndarray
    thresholds: np.ndarray
    f1: np.ndarray
    recall: np.ndarray
    upper: float
    best_index: int = field(default=-1)

    @property
    def threshold(self) -> float:
        return float(self.thresholds[self.best_index])


def _grid_counts(thresholds: np.ndarray, scores: np.ndarray, truths: np.ndarray):
    """TP and FP for every threshold under the ``score > t`` rule."""
    pos = np.sort(scores[truths == DEFECT])
    neg = np.sort(scores[truths == NORMAL])
    tp = pos.size - np.searchsorted(pos, thresholds, side="right")
    fp = neg.size - np.searchsorted(neg, thresholds, side="right")
    return tp, fp, pos.size, neg.size


def threshold_search(train_scores, valid_scores, valid_truths) -> tuple[float, GridReport]:
    """Pick the validation-F1-maximizing threshold on the ``mean + k * 0.1 * std`` lattice.

    The lattice runs from ``mean - 10 std`` up to the largest lattice point
    (k >= 0) at which validation recall is still 1; when recall is already
    below 1 at the mean, the upper end is the mean itself. Ties go to the
    larger threshold.
    """
    train = np.asarray(train_scores, dtype=np.float64).ravel()
    scores = np.asarray(valid_scores, dtype=np.float64).ravel()
    truths = np.asarray(valid_truths).astype(np.int64).ravel()
    if train.size == 0:
        raise ValueError("threshold search needs training scores")
    if scores.shape != truths.shape:
        raise ValueError("validation scores and labels differ in length")
    if not (np.any(truths == DEFECT) and np.any(truths == NORMAL)):
        raise ValueError("validation set must contain both normal and defect samples")
    m = float(train.mean())
    s = float(train.std())
    if not s > 0:
        raise DegenerateScoresError("training scores have zero spread")
    step = STEP_FRACTION * s
    lowest_defect = float(scores[truths == DEFECT].min())
    # largest k >= 0 with m + k*step < lowest_defect (recall 1 needs every defect above t)
    k_up = 0
    if m < lowest_defect:
        k_up = max(0, math.ceil((lowest_defect - m) / step) - 1)
        while k_up > 0 and m + k_up * step >= lowest_defect:
            k_up -= 1
        while m + (k_up + 1) * step < lowest_defect:
            k_up += 1
    k_low = -int(round(LOWER_SPAN / STEP_FRACTION))
    if k_up - k_low + 1 > MAX_GRID:
        raise DegenerateScoresError("threshold lattice is too large; training scores are too concentrated")
    ks = np.arange(k_low, k_up + 1)
    thresholds = m + ks * step
    tp, fp, n_pos, _ = _grid_counts(thresholds, scores, truths)
    recall = tp / n_pos
    pred_pos = tp + fp
    precision = np.divide(tp, pred_pos, out=np.zeros(len(ks)), where=pred_pos > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(len(ks)), where=denom > 0)
    best = int(len(ks) - 1 - np.argmax(f1[::-1]))
    grid = GridReport(m, s, step, ks, thresholds, f1, recall, float(thresholds[-1]), best)
    return grid.threshold, grid


def evaluate(scores, truths, threshold: float) -> EvalReport:
    return metrics(classify(scores, threshold), truths, threshold)


# ---------------------------------------------------------------------------
# report text

METRIC_COLUMNS = ("Threshold", "Accuracy", "Precision", "Recall", "F1")


def _row_values(r: EvalReport) -> list[float]:
    return [r.threshold, r.accuracy, r.precision, r.recall, r.f1]


def format_reports(rows: Sequence[tuple[str, str, EvalReport]]) -> str:
    """Aligned table, one row per (model, split)."""
    name_w = max([5] + [len(n) for n, _, _ in rows])
    head = f"{'Model':<{name_w}}  {'Split':<5}  " + "  ".join(f"{c:>10}" for c in METRIC_COLUMNS)
    lines = [head, "-" * len(head)]
    for name, split, rep in rows:
        vals = "  ".join(f"{v:>10.6f}" for v in _row_values(rep))
        lines.append(f"{name:<{name_w}}  {split:<5}  {vals}")
    return "\n".join(lines) + "\n"


def report_to_kv(prefix: str, rep: EvalReport) -> list[str]:
    return [f"{prefix}.{k} = {v!r}" if isinstance(v, float) else f"{prefix}.{k} = {v}"
            for k, v in rep.as_dict().items()]


def report_from_kv(lines: dict, prefix: str) -> EvalReport:
    def get(k):
        return lines[f"{prefix}.{k}"]

    flags = tuple(f for f in get("zero_division").split(",") if f)
    return EvalReport(float(get("threshold")), int(get("tp")), int(get("fp")), int(get("tn")),
                      int(get("fn")), float(get("accuracy")), float(get("precision")),
                      float(get("recall")), float(get("f1")), flags)


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out
