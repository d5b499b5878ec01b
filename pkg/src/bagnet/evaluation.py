"""Entity-typing and relation-extraction metrics.

Score matrices are (entities x types) probabilities; gold matrices are the
matching 0/1 label arrays.  Everything here is rank- or threshold-based and
pure: no model state, no I/O beyond the writers at the bottom.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


def precision_at_1(scores: np.ndarray, gold: np.ndarray) -> float:
    """Share of entities whose top-scored type is gold (ties: lowest type id).

    Rows that are entirely NaN stand for entities without predictions and
    count as wrong.
    """
    scores = np.asarray(scores, dtype=float)
    gold = np.asarray(gold).astype(bool)
    missing = np.isnan(scores).all(axis=1)
    top = np.argmax(np.nan_to_num(scores, nan=-np.inf), axis=1)
    hit = gold[np.arange(len(top)), top] & ~missing
    return float(hit.mean()) if len(hit) else 0.0


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)


def _counts_at(scores_t, gold_t, thetas):
    """TP/FP/FN for decisions ``score > theta``, one entry per theta."""
    pos = np.sort(scores_t[gold_t])
    neg = np.sort(scores_t[~gold_t])
    tp = len(pos) - np.searchsorted(pos, thetas, side="right")
    fp = len(neg) - np.searchsorted(neg, thetas, side="right")
    return tp, fp, len(pos) - tp


def tune_thresholds(scores: np.ndarray, gold: np.ndarray, base: float = 0.5) -> np.ndarray:
    """Per-type thresholds chosen on dev.

    One coordinate-ascent pass over types: starting from ``base`` everywhere,
    each type's threshold is set to the candidate (``base``, one of that
    type's dev scores, or just below the lowest of them) that maximizes dev micro-F1 with the other thresholds
    held fixed.  ``base`` stays in every candidate set, so the tuned dev
    micro-F1 can never fall below the fixed-threshold one.
    """
    scores = np.asarray(scores, dtype=float)
    gold = np.asarray(gold).astype(bool)
    T = scores.shape[1]
    theta = np.full(T, base)
    per_type = [_counts_at(scores[:, t], gold[:, t], np.array([base])) for t in range(T)]
    TP = sum(int(c[0][0]) for c in per_type)
    FP = sum(int(c[1][0]) for c in per_type)
    FN = sum(int(c[2][0]) for c in per_type)
    for t in range(T):
        if not gold[:, t].any():
            log.warning("type %d has no dev positives; threshold stays at %.2f", t, base)
            continue
        tp0, fp0, fn0 = (int(x[0]) for x in per_type[t])
        uniq = np.unique(scores[:, t])
        cands = np.concatenate([[base], [np.nextafter(uniq[0], -np.inf)], uniq])
        tp, fp, fn = _counts_at(scores[:, t], gold[:, t], cands)
        micro = _f1(TP - tp0 + tp, FP - fp0 + fp, FN - fn0 + fn)
        best = int(np.argmax(micro))  # first maximum: base wins ties
        theta[t] = cands[best]
        TP += int(tp[best]) - tp0
        FP += int(fp[best]) - fp0
        FN += int(fn[best]) - fn0
    return theta


def micro_f1(scores, gold, thresholds, mask=None) -> float | None:
    """Micro-F1 over all entity-type decisions ``score > threshold``.

    ``mask`` selects entity rows (e.g. a frequency bucket); an empty
    selection gives ``None``.
    """
    scores = np.asarray(scores, dtype=float)
    gold = np.asarray(gold).astype(bool)
    if mask is not None:
        scores, gold = scores[mask], gold[mask]
    if len(scores) == 0:
        return None
    pred = scores > np.asarray(thresholds)[None, :]
    tp = int((pred & gold).sum())
    fp = int((pred & ~gold).sum())
    fn = int((~pred & gold).sum())
    return float(_f1(tp, fp, fn))


def average_precision(scores_t, gold_t) -> float:
    scores_t = np.asarray(scores_t, dtype=float)
    gold_t = np.asarray(gold_t).astype(bool)
    order = np.argsort(-scores_t, kind="stable")
    hits = gold_t[order]
    ranks = np.flatnonzero(hits) + 1
    return math.fsum(np.arange(1, len(ranks) + 1) / ranks) / len(ranks)


def mean_average_precision(scores, gold) -> float:
    """Unweighted mean of per-type AP over types with at least one positive."""
    scores = np.asarray(scores, dtype=float)
    gold = np.asarray(gold).astype(bool)
    aps = []
    for t in range(scores.shape[1]):
        if not gold[:, t].any():
            log.warning("type %d has no positives; excluded from MAP", t)
            continue
        aps.append(average_precision(scores[:, t], gold[:, t]))
    return math.fsum(aps) / len(aps) if aps else 0.0


def pr_curve(scores, correct, n_gold: int):
    """Precision/recall after each prefix of the score-descending ranking.

    Returns ``(recall, precision, area)``; the area is the step-function sum
    of precision times recall increment.  Sums use ``math.fsum`` so the
    result does not depend on summation order.
    """
    if n_gold <= 0:
        raise MetricError("recall is undefined without gold positives")
    scores = np.asarray(scores, dtype=float)
    correct = np.asarray(correct).astype(bool)
    order = np.argsort(-scores, kind="stable")
    hits = correct[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    recall = tp / n_gold
    area = math.fsum(precision[hits]) / n_gold
    return recall, precision, area


def relation_pr(probs: np.ndarray, gold: np.ndarray, na_id: int):
    """Corpus-level PR over (pair, relation) triples, NA never a positive."""
    probs = np.asarray(probs, dtype=float)
    gold = np.asarray(gold)
    rels = [r for r in range(probs.shape[1]) if r != na_id]
    scores = probs[:, rels].ravel()
    correct = (gold[:, None] == np.array(rels)[None, :]).ravel()
    return pr_curve(scores, correct, int((gold != na_id).sum()))


def per_relation_f1(probs, gold, names: list[str], na_id: int) -> dict[str, float]:
    pred = np.argmax(probs, axis=1)
    gold = np.asarray(gold)
    out = {}
    for r, name in enumerate(names):
        if r == na_id:
            continue
        tp = int(((pred == r) & (gold == r)).sum())
        fp = int(((pred == r) & (gold != r)).sum())
        fn = int(((pred != r) & (gold == r)).sum())
        out[name] = float(_f1(tp, fp, fn))
    return out


# ------------------------------------------------------------------ reports

@dataclass
class EvalReport:
    p_at_1: float | None = None
    micro_f1: dict[str, float | None] = field(default_factory=dict)
    map: float | None = None
    thresholds: list[float] = field(default_factory=list)
    per_relation_f1: dict[str, float] = field(default_factory=dict)
    pr_points: list[tuple[float, float]] = field(default_factory=list)
    area: float | None = None
    extra: dict[str, float] = field(default_factory=dict)

    def scalars(self) -> dict:
        d = asdict(self)
        d.pop("pr_points")
        d.pop("thresholds")
        return d


def typing_report(dev_scores, dev_gold, test_scores, test_gold, buckets=None) -> EvalReport:
    """Thresholds tuned on dev, every metric computed on the test side.

    ``buckets`` maps a bucket name to a row mask over the test entities.
    """
    theta = tune_thresholds(dev_scores, dev_gold)
    f1 = {"all": micro_f1(test_scores, test_gold, theta)}
    for name, mask in (buckets or {}).items():
        f1[name] = micro_f1(test_scores, test_gold, theta, mask)
    return EvalReport(
        p_at_1=precision_at_1(test_scores, test_gold),
        micro_f1=f1,
        map=mean_average_precision(test_scores, test_gold),
        thresholds=[float(x) for x in theta],
    )


def relation_report(probs, gold, names, na_id) -> EvalReport:
    recall, precision, area = relation_pr(probs, gold, na_id)
    return EvalReport(
        per_relation_f1=per_relation_f1(probs, gold, names, na_id),
        pr_points=[(float(r), float(p)) for r, p in zip(recall, precision)],
        area=area,
    )


def write_report(report: EvalReport, out_dir, type_names: list[str] | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.scalars(), indent=2, sort_keys=True) + "\n")
    if report.pr_points:
        with open(out / "pr_curve.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["recall", "precision"])
            w.writerows((repr(r), repr(p)) for r, p in report.pr_points)
    if report.thresholds:
        names = type_names or [str(i) for i in range(len(report.thresholds))]
        (out / "thresholds.tsv").write_text(
            "".join(f"{n}\t{t!r}\n" for n, t in zip(names, report.thresholds)))
