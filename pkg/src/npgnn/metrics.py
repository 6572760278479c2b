"""Ranking metrics for link prediction and multi-seed aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError


def _labels_scores(labels, scores):
    y = np.asarray(labels).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.shape != s.shape:
        raise InputError(f"{len(y)} labels but {len(s)} scores")
    if not np.all((y == 0) | (y == 1)):
        raise InputError("labels must be 0 or 1")
    if not np.all(np.isfinite(s)):
        raise InputError("scores must be finite")
    return y.astype(np.int64), s


def roc_auc(labels, scores) -> float:
    """P(score of a positive > score of a negative) + 0.5 P(tie).

    Computed from tie-averaged ranks with integer arithmetic (ranks are
    doubled), so the value is the exactly rounded ratio.
    """
    y, s = _labels_scores(labels, scores)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InputError("roc_auc needs both positive and negative labels")
    order = np.argsort(s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    # group boundaries of tied scores
    starts = np.flatnonzero(np.r_[True, s_sorted[1:] != s_sorted[:-1]])
    ends = np.r_[starts[1:], len(s_sorted)]
    pos_per_group = np.add.reduceat(y_sorted, starts)
    doubled_rank = starts + 1 + ends  # twice the average 1-based rank of the group
    rank_sum2 = int(np.dot(pos_per_group.astype(object), doubled_rank.astype(object)))
    u2 = rank_sum2 - n_pos * (n_pos + 1)
    return u2 / (2 * n_pos * n_neg)


def _exact_ratio_sum(nums, dens) -> float:
    """Correctly rounded sum of ``nums[k] / dens[k]`` for positive integers.

    Each quotient is split into its rounded float and the rounded residual
    (computed with exact integer arithmetic), so ``math.fsum`` sees every term
    to ~106 bits and the total is rounded once.
    """
    parts = []
    for a, d in zip(nums, dens):
        q = a / d
        qn, qd = q.as_integer_ratio()
        parts.append(q)
        parts.append((a * qd - qn * d) / (qd * d))
    return math.fsum(parts)


def average_precision(labels, scores) -> float:
    """Sum over the descending ranking of (R_k - R_{k-1}) * P_k.

    Tied scores keep their input order (stable sort), so the value depends on
    the order of tied items.  The result is the correctly rounded value of
    the exact rational sum.
    """
    y, s = _labels_scores(labels, scores)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise InputError("average_precision needs at least one positive label")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    ranks = (np.flatnonzero(hits) + 1).tolist()
    return _exact_ratio_sum(range(1, n_pos + 1), [r * n_pos for r in ranks])


def score_pairs(pos_scores, neg_scores) -> tuple[float, float]:
    """AUC and AP for positive vs negative pair scores."""
    labels = np.r_[np.ones(len(pos_scores)), np.zeros(len(neg_scores))]
    scores = np.r_[np.asarray(pos_scores, float), np.asarray(neg_scores, float)]
    return roc_auc(labels, scores), average_precision(labels, scores)


def standard_error(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return 0.0
    return float(v.std(ddof=1) / math.sqrt(len(v)))


@dataclass
class MetricsReport:
    """Per-seed test AUC/AP, their aggregates, and per-seed loss histories."""

    seeds: list = field(default_factory=list)
    auc: list = field(default_factory=list)
    ap: list = field(default_factory=list)
    history: list = field(default_factory=list)

    def __post_init__(self):
        for v in list(self.auc) + list(self.ap):
            if not 0.0 <= v <= 1.0:
                raise InputError(f"metric value {v} outside [0, 1]")

    @property
    def runs(self) -> int:
        return len(self.auc)

    @property
    def auc_mean(self) -> float:
        return float(np.mean(self.auc)) if self.auc else float("nan")

    @property
    def ap_mean(self) -> float:
        return float(np.mean(self.ap)) if self.ap else float("nan")

    @property
    def auc_se(self) -> float:
        return standard_error(self.auc)

    @property
    def ap_se(self) -> float:
        return standard_error(self.ap)

    @classmethod
    def combine(cls, reports) -> "MetricsReport":
        out = cls()
        for r in reports:
            out.seeds.extend(r.seeds)
            out.auc.extend(r.auc)
            out.ap.extend(r.ap)
            out.history.extend(r.history)
        return out

    def summary(self) -> dict:
        return {
            "runs": self.runs,
            "auc_mean": self.auc_mean,
            "auc_se": self.auc_se,
            "ap_mean": self.ap_mean,
            "ap_se": self.ap_se,
        }
