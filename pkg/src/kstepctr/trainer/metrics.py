from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def compute_auc(scores, labels) -> float | None:
    """Rank-sum (Mann-Whitney) AUC with tied scores sharing their average rank.

    Returns None when the labels contain only one class, since AUC is
    undefined there.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
