"""Verification scoring and detection metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class EvalMetrics:
    eer: float
    min_dcf_p01: float
    min_dcf_p001: float
    eer_threshold: float


def cosine_score(e1, e2) -> float:
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    n1, n2 = np.linalg.norm(e1), np.linalg.norm(e2)
    if n1 == 0 or n2 == 0:
        raise ValueError("cosine score of a zero-norm embedding")
    return float(np.clip(e1 @ e2 / (n1 * n2), -1.0, 1.0))


def error_rates(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Miss and false-alarm rates at every operating point.

    Operating point ``i`` accepts trials with score ``>= thresholds[i]``; the
    thresholds are the distinct scores in ascending order followed by ``+inf``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_tar = int(labels.sum())
    n_non = labels.size - n_tar
    if n_tar == 0 or n_non == 0:
        raise ValueError("need at least one target and one nontarget trial")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    lab = labels[order]
    # rejected trials at threshold u = those strictly below u
    uniq, first = np.unique(s, return_index=True)
    tar_below = np.concatenate([[0], np.cumsum(lab)])
    non_below = np.concatenate([[0], np.cumsum(~lab)])
    idx = np.append(first, s.size)
    p_miss = tar_below[idx] / n_tar
    p_fa = (n_non - non_below[idx]) / n_non
    return p_miss, p_fa, np.append(uniq, np.inf)


def compute_eer(scores, labels) -> tuple[float, float]:
    """Equal error rate and its threshold, interpolated between adjacent operating points."""
    p_miss, p_fa, thr = error_rates(scores, labels)
    diff = p_miss - p_fa
    i = int(np.argmax(diff >= 0))
    if diff[i] == 0 or i == 0:
        return float(p_miss[i]), float(thr[i])
    w = -diff[i - 1] / (diff[i] - diff[i - 1])
    eer = p_miss[i - 1] + w * (p_miss[i] - p_miss[i - 1])
    return float(eer), float(thr[i - 1])


def compute_min_dcf(scores, labels, p_target: float, c_miss: float = 1.0, c_fa: float = 1.0,
                    normalize: bool = True) -> float:
    p_miss, p_fa, _ = error_rates(scores, labels)
    dcf = c_miss * p_miss * p_target + c_fa * p_fa * (1 - p_target)
    best = float(dcf.min())
    if normalize:
        best /= min(c_miss * p_target, c_fa * (1 - p_target))
    return best


def evaluate(scores, labels) -> EvalMetrics:
    eer, thr = compute_eer(scores, labels)
    return EvalMetrics(eer, compute_min_dcf(scores, labels, 0.01), compute_min_dcf(scores, labels, 0.001), thr)


def format_metrics(m: EvalMetrics) -> str:
    return f"EER {100 * m.eer:.4f} DCF0.01 {m.min_dcf_p01:.6f} DCF0.001 {m.min_dcf_p001:.6f}"
