"""Unknown-sample scoring, threshold calibration and the accept/reject rule."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ArgumentError, DimensionError
from .network import ForwardBundle

UNKNOWN = -1
SCORE_DUMP_HEADER = ("sample_id", "true_label", "s_lg", "s_ft", "s_total", "decision")


@dataclass(frozen=True)
class OsrScore:
    s_lg: float
    s_ft: float
    s_total: float
    gamma: float


@dataclass(frozen=True)
class ThresholdCalibration:
    tau: float
    target_tpr: float
    n_known_used: int
    achieved_acceptance: float


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def feature_score(expert_feature_maps: Sequence) -> float:
    """Euclidean norm of the flattened across-expert average of ``[K,H,W]`` maps."""
    maps = [_as_array(m) for m in expert_feature_maps]
    if not maps:
        raise DimensionError("feature_score needs at least one map")
    for m in maps[1:]:
        if m.shape != maps[0].shape:
            raise DimensionError(f"feature map shapes differ: {maps[0].shape} vs {m.shape}")
    avg = np.mean(maps, axis=0)
    return float(np.linalg.norm(avg.ravel()))


def logit_score(fused_logits) -> float:
    return float(np.max(_as_array(fused_logits)))


def batch_scores(bundle: ForwardBundle, gamma: float,
                 experts: Sequence[int] | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised ``(s_lg, s_ft, s_total)`` over a batched bundle.

    ``experts`` restricts the feature average to a subset (single-expert fusion).
    """
    chosen = bundle.feature_maps if experts is None else [bundle.feature_maps[i] for i in experts]
    maps = np.stack([fm.data for fm in chosen])  # [N, B, K, H, W]
    avg = maps.mean(axis=0)
    s_ft = np.sqrt((avg.reshape(avg.shape[0], -1) ** 2).sum(axis=1))
    s_lg = bundle.fused_logits.data.max(axis=-1)
    return s_lg, s_ft, s_lg + gamma * s_ft


def combined_score(bundle: ForwardBundle, gamma: float, index: int = 0) -> OsrScore:
    """Score of sample ``index`` of a batched bundle."""
    s_lg = logit_score(bundle.fused_logits.data[index])
    s_ft = feature_score([fm.data[index] for fm in bundle.feature_maps])
    return OsrScore(s_lg, s_ft, s_lg + gamma * s_ft, gamma)


def calibrate_threshold(known_scores, target_tpr: float = 0.95) -> ThresholdCalibration:
    """Largest observed score ``tau`` such that a ``target_tpr`` share of knowns has ``score >= tau``."""
    scores = np.sort(np.asarray(known_scores, dtype=np.float64).ravel())
    n = scores.size
    if n == 0:
        raise ArgumentError("cannot calibrate on an empty score list")
    if not 0 < target_tpr <= 1:
        raise ArgumentError(f"target_tpr must be in (0, 1], got {target_tpr}")
    values, first = np.unique(scores, return_index=True)
    accepted = (n - first) / n
    ok = np.nonzero(accepted >= target_tpr)[0]
    j = ok[-1]  # accepted is decreasing; values[0] always qualifies
    return ThresholdCalibration(float(values[j]), float(target_tpr), int(n), float(accepted[j]))


def decide(score, tau: float, fused_logits) -> int:
    """Argmax class if ``s_total >= tau`` (lowest index on ties), else ``UNKNOWN``."""
    s = score.s_total if isinstance(score, OsrScore) else float(score)
    if s >= tau:
        return int(np.argmax(_as_array(fused_logits)))
    return UNKNOWN


def decide_batch(s_total, tau: float, fused_logits) -> np.ndarray:
    s_total = np.asarray(s_total, dtype=np.float64)
    pred = np.argmax(_as_array(fused_logits), axis=-1)
    return np.where(s_total >= tau, pred, UNKNOWN).astype(np.int64)


def format_label(label: int) -> str:
    return "UNKNOWN" if label == UNKNOWN else str(int(label))


def parse_label(text: str) -> int:
    return UNKNOWN if text == "UNKNOWN" else int(text)


def write_score_dump(rows, fh) -> None:
    """Rows of ``(sample_id, true_label, s_lg, s_ft, s_total, decision)`` as CSV."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SCORE_DUMP_HEADER)
    for sid, truth, s_lg, s_ft, s_total, dec in rows:
        w.writerow([int(sid), format_label(truth), repr(float(s_lg)), repr(float(s_ft)),
                    repr(float(s_total)), format_label(dec)])


def score_dump_text(rows) -> str:
    buf = io.StringIO()
    write_score_dump(rows, buf)
    return buf.getvalue()


@dataclass
class ScoreDump:
    sample_id: np.ndarray
    true_label: np.ndarray
    s_lg: np.ndarray
    s_ft: np.ndarray
    s_total: np.ndarray
    decision: np.ndarray

    @property
    def is_unknown(self) -> np.ndarray:
        return self.true_label == UNKNOWN


def read_score_dump(fh) -> ScoreDump:
    reader = csv.reader(fh)
    header = tuple(next(reader))
    if header != SCORE_DUMP_HEADER:
        raise ArgumentError(f"unexpected score dump header {header}")
    cols: list[list] = [[] for _ in SCORE_DUMP_HEADER]
    for row in reader:
        cols[0].append(int(row[0]))
        cols[1].append(parse_label(row[1]))
        for c in (2, 3, 4):
            cols[c].append(float(row[c]))
        cols[5].append(parse_label(row[5]))
    return ScoreDump(np.array(cols[0], dtype=np.int64), np.array(cols[1], dtype=np.int64),
                     np.array(cols[2]), np.array(cols[3]), np.array(cols[4]),
                     np.array(cols[5], dtype=np.int64))
