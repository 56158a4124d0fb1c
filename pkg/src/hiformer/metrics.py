"""Ranking metrics: AUC (rank statistic, ties count one half) and logloss."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import DataError

CLAMP = 1e-7


def logloss(p, y) -> float:
    """Mean binary cross entropy with ``p`` clamped to [1e-7, 1 - 1e-7]."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise DataError(f"logloss: {p.size} predictions vs {y.size} labels")
    if p.size == 0:
        raise DataError("logloss of an empty set")
    p = np.clip(p, CLAMP, 1.0 - CLAMP)
    return float(np.mean(-y * np.log(p) - (1.0 - y) * np.log1p(-p)))


def auc(scores, labels) -> float:
    """Mann-Whitney AUC from average ranks.

    Raises ``DataError`` when only one class is present.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise DataError(f"auc: {s.size} scores vs {y.size} labels")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs both positive and negative labels")
    ranks = rankdata(s, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
