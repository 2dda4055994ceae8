"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .trainer.data import Instance


def check_instances(X) -> list[tuple[int, ...]]:
    """Normalise sparse CTR inputs into per-row tuples of distinct feature ids.

    Accepts a scipy sparse matrix (non-zero columns are the active features),
    a sequence of :class:`Instance`, or a sequence of id sequences. Duplicate
    ids within a row are dropped, keeping first occurrence.
    """
    if sp.issparse(X):
        csr = sp.csr_matrix(X)
        csr.eliminate_zeros()
        rows = [tuple(int(c) for c in csr.indices[csr.indptr[r]:csr.indptr[r + 1]])
                for r in range(csr.shape[0])]
    else:
        if isinstance(X, (str, bytes)) or not isinstance(X, Sequence) and not hasattr(X, "__iter__"):
            raise TypeError("X must be a sparse matrix or a sequence of feature-id sequences")
        rows = []
        for r, row in enumerate(X):
            ids = row.feature_ids if isinstance(row, Instance) else row
            try:
                rows.append(tuple(dict.fromkeys(int(i) for i in np.asarray(ids).ravel())))
            except (TypeError, ValueError):
                raise TypeError(f"row {r}: feature ids must be integers") from None
    if not rows:
        raise ValueError("X has no rows")
    for r, ids in enumerate(rows):
        if not ids:
            raise ValueError(f"row {r} has no active features")
        if min(ids) < 0:
            raise ValueError(f"row {r} has a negative feature id")
    return rows


def check_labels(y, n_rows: int) -> np.ndarray:
    y = np.asarray(y).ravel()
    if y.shape[0] != n_rows:
        raise ValueError(f"y has {y.shape[0]} labels for {n_rows} rows")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return y.astype(np.int64)


def to_instances(X, y) -> list[Instance]:
    rows = check_instances(X)
    labels = check_labels(y, len(rows))
    return [Instance(ids, int(lab)) for ids, lab in zip(rows, labels)]
