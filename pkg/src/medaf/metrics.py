"""Open-set evaluation metrics.

Convention throughout: higher score means "more known". Knowns are accepted
when ``score >= tau``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ArgumentError
from .scoring import UNKNOWN, calibrate_threshold


def _pair(known, unknown) -> tuple[np.ndarray, np.ndarray]:
    k = np.asarray(known, dtype=np.float64).ravel()
    u = np.asarray(unknown, dtype=np.float64).ravel()
    if k.size == 0 or u.size == 0:
        raise ArgumentError("both score lists must be nonempty")
    return k, u


def auroc(known_scores, unknown_scores) -> float:
    """P(known > unknown) + 0.5 * P(tie), from rank counts."""
    k, u = _pair(known_scores, unknown_scores)
    u = np.sort(u)
    below = np.searchsorted(u, k, side="left")
    at_or_below = np.searchsorted(u, k, side="right")
    # integer counts keep the statistic exact before the final division
    twice = 2 * int(below.sum()) + int((at_or_below - below).sum())
    return twice / (2.0 * k.size * u.size)


def tnr_at_tpr(known_scores, unknown_scores, tpr_target: float = 0.95) -> float:
    k, u = _pair(known_scores, unknown_scores)
    tau = calibrate_threshold(k, tpr_target).tau
    return float(np.count_nonzero(u < tau)) / u.size


def dtacc(known_scores, unknown_scores, balanced: bool = True) -> float:
    """Best detection accuracy over thresholds (all observed scores plus +-inf).

    ``balanced=False`` weights by sample counts instead of 0.5/0.5.
    """
    k, u = _pair(known_scores, unknown_scores)
    cand = np.concatenate(([-np.inf], np.unique(np.concatenate([k, u])), [np.inf]))
    ks, us = np.sort(k), np.sort(u)
    tp = k.size - np.searchsorted(ks, cand, side="left")  # known >= t
    tn = np.searchsorted(us, cand, side="left")  # unknown < t
    if balanced:
        acc = 0.5 * (tp / k.size + tn / u.size)
    else:
        acc = (tp + tn) / (k.size + u.size)
    return float(acc.max())


def aupr(positive_scores, negative_scores) -> float:
    """Step-wise area under precision-recall: sum of precision * recall increment.

    Tied scores form one threshold step.
    """
    pos, neg = _pair(positive_scores, negative_scores)
    scores = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    order = np.argsort(-scores, kind="mergesort")
    scores, is_pos = scores[order], is_pos[order]
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(scores))[0], scores.size - 1]
    tp = np.cumsum(is_pos)[ends]
    n_pred = ends + 1
    precision = tp / n_pred
    recall_step = np.diff(np.r_[0.0, tp]) / pos.size
    return float((precision * recall_step).sum())


def auin(known_scores, unknown_scores) -> float:
    return aupr(known_scores, unknown_scores)


def auout(known_scores, unknown_scores) -> float:
    k, u = _pair(known_scores, unknown_scores)
    return aupr(-u, -k)


def macro_f1_k_plus_1(decisions, truths, num_classes: int) -> float:
    """Unweighted mean F1 over the K known classes plus UNKNOWN.

    A class with no true and no predicted members scores 0.
    """
    pred = np.asarray(decisions, dtype=np.int64).ravel()
    true = np.asarray(truths, dtype=np.int64).ravel()
    if pred.shape != true.shape:
        raise ArgumentError(f"{pred.size} decisions for {true.size} truths")
    for arr in (pred, true):
        bad = (arr != UNKNOWN) & ((arr < 0) | (arr >= num_classes))
        if bad.any():
            raise ArgumentError(f"label {arr[bad][0]} outside 0..{num_classes - 1} and UNKNOWN")
    f1s = []
    for c in list(range(num_classes)) + [UNKNOWN]:
        tp = np.count_nonzero((pred == c) & (true == c))
        fp = np.count_nonzero((pred == c) & (true != c))
        fn = np.count_nonzero((pred != c) & (true == c))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(f1s))


@dataclass
class MetricsReport:
    n_known: int
    n_unknown: int
    auroc: float | None = None
    tnr_at_tpr95: float | None = None
    dtacc: float | None = None
    auin: float | None = None
    auout: float | None = None
    macro_f1: float | None = None
    closed_set_accuracy: float | None = None
    known_acceptance: float | None = None
    tau: float | None = None
    gamma: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        """``key = value`` lines; absent metrics are written as ``NA``."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'NA' if v is None else repr(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        kv = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, val = line.partition(" = ")
            kv[key] = None if val == "NA" else (int(val) if key.startswith("n_") else float(val))
        return cls(**kv)


def build_report(known_scores, unknown_scores=None, *, tpr_target: float = 0.95,
                 decisions=None, truths=None, num_classes: int | None = None,
                 **extra) -> MetricsReport:
    """All metrics for one run; unknown-side metrics stay ``None`` without unknowns."""
    k = np.asarray(known_scores, dtype=np.float64).ravel()
    u = None if unknown_scores is None else np.asarray(unknown_scores, dtype=np.float64).ravel()
    rep = MetricsReport(n_known=int(k.size), n_unknown=0 if u is None else int(u.size), **extra)
    if u is not None and u.size and k.size:
        rep.auroc = auroc(k, u)
        rep.tnr_at_tpr95 = tnr_at_tpr(k, u, tpr_target)
        rep.dtacc = dtacc(k, u)
        rep.auin = auin(k, u)
        rep.auout = auout(k, u)
    if decisions is not None and num_classes is not None:
        rep.macro_f1 = macro_f1_k_plus_1(decisions, truths, num_classes)
    return rep
