"""Evaluation metrics: partial ROC-AUC, segment-pooled mpAUC and intersection-based event F1."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class UndefinedMetricError(ValueError):
    """The metric has no value for this input (e.g. only one label class present)."""


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """ROC vertices (fpr, tpr) from (0, 0) to (1, 1); tied scores form one step."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores vs {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"need both label values, got {n_pos} positives and {n_neg} negatives")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tps = np.cumsum(y)[last_of_group]
    fps = last_of_group + 1 - tps
    return np.r_[0.0, fps / n_neg], np.r_[0.0, tps / n_pos]


def partial_auc(scores, labels, max_fpr: float = 0.1) -> float:
    """Area under the ROC for FPR in [0, max_fpr], divided by max_fpr."""
    if not 0 < max_fpr <= 1:
        raise ValueError(f"max_fpr must lie in (0, 1], got {max_fpr}")
    fpr, tpr = roc_points(scores, labels)
    stop = int(np.searchsorted(fpr, max_fpr, side="right"))
    x, y = fpr[:stop], tpr[:stop]
    if x[-1] < max_fpr:
        x0, x1, y0, y1 = fpr[stop - 1], fpr[stop], tpr[stop - 1], tpr[stop]
        x = np.r_[x, max_fpr]
        y = np.r_[y, y0 + (y1 - y0) * (max_fpr - x0) / (x1 - x0)]
    area = float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2))
    return area / max_fpr


def mcclish(pauc_normalised: float, max_fpr: float) -> float:
    """Rescale so a chance-level ROC scores 0.5 and a perfect one 1.0."""
    area = pauc_normalised * max_fpr
    lo = max_fpr**2 / 2
    return 0.5 * (1 + (area - lo) / (max_fpr - lo))


@dataclass
class MpaucResult:
    value: float
    per_class: dict[int, float] = field(default_factory=dict)
    excluded: list[int] = field(default_factory=list)

    def __float__(self) -> float:
        return self.value


def segment_pool(x: np.ndarray, seg_frames: int) -> np.ndarray:
    """Mean over consecutive blocks of ``seg_frames`` rows; the last block may be short."""
    t = x.shape[0]
    starts = np.arange(0, t, seg_frames)
    return np.add.reduceat(x, starts, axis=0) / np.diff(np.r_[starts, t])[:, None]


def mpauc(
    frame_scores: Sequence[np.ndarray] | np.ndarray,
    soft_targets: Sequence[np.ndarray] | np.ndarray,
    segment_s: float = 1.0,
    frame_hop_s: float = 0.2,
    gt_threshold: float = 0.5,
    max_fpr: float = 0.1,
    standardise: bool = True,
) -> MpaucResult:
    """Mean over classes of the segment-level partial AUC.

    Inputs are one [t, K] array per clip (or a single [t, K] array). Scores
    and targets are mean-pooled over segments, targets are binarised at
    ``gt_threshold``, and classes with a single label value are excluded.
    With ``standardise`` each class's pAUC is McClish-rescaled.
    """
    if isinstance(frame_scores, np.ndarray) and frame_scores.ndim == 2:
        frame_scores, soft_targets = [frame_scores], [soft_targets]
    seg = max(1, int(round(segment_s / frame_hop_s)))
    s = np.concatenate([segment_pool(np.asarray(x, dtype=np.float64), seg) for x in frame_scores])
    y = np.concatenate([segment_pool(np.asarray(x, dtype=np.float64), seg) for x in soft_targets])
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} vs targets {y.shape}")
    gt = y >= gt_threshold
    per_class, excluded = {}, []
    for k in range(s.shape[1]):
        try:
            p = partial_auc(s[:, k], gt[:, k], max_fpr)
        except UndefinedMetricError:
            excluded.append(k)
            continue
        per_class[k] = mcclish(p, max_fpr) if standardise else p
    if not per_class:
        raise UndefinedMetricError(f"no class has both label values (excluded {excluded})")
    return MpaucResult(float(np.mean(list(per_class.values()))), per_class, excluded)


def event_f1_intersection(pred_events, ref_events, dtc: float = 0.7, gtc: float = 0.7) -> float:
    """Pooled F1 with an intersection criterion.

    Events are tuples ending in ``(onset, offset)``; all leading fields (class,
    optionally a clip id first) must agree for a match. Predictions are taken
    in onset order and greedily matched one-to-one against the earliest
    eligible reference.
    """
    pred = sorted(pred_events, key=lambda e: (e[-2], e[-1]))
    ref = sorted(ref_events, key=lambda e: (e[-2], e[-1]))
    if not pred and not ref:
        return 1.0
    used = [False] * len(ref)
    tp = 0
    for p in pred:
        plen = p[-1] - p[-2]
        for j, r in enumerate(ref):
            if used[j] or tuple(r[:-2]) != tuple(p[:-2]):
                continue
            inter = min(p[-1], r[-1]) - max(p[-2], r[-2])
            if inter <= 0:
                continue
            # tolerance absorbs rounding of frame indices converted to seconds
            if inter / plen >= dtc - 1e-9 and inter / (r[-1] - r[-2]) >= gtc - 1e-9:
                used[j] = True
                tp += 1
                break
    return 2 * tp / (len(pred) + len(ref))
