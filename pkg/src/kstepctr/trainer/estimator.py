from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ..optimizer.kstep import AdamHyper
from ..validation import check_instances, to_instances
from .data import Instance, batched
from .model import ModelConfig
from .workflow import TrainerConfig, TrainingContext, online_eval, predict_proba, train_batch


class KStepCTRClassifier(ClassifierMixin, BaseEstimator):
    """Sparse CTR classifier trained with k-step Adam (dense) and AdaGrad (sparse).

    ``X`` is a scipy sparse matrix whose non-zero columns are active features,
    or a sequence of feature-id sequences. Rows are consumed in order, in
    batches of ``batch_size``; one ``fit`` call is a single online pass.

    Parameters mirror :class:`TrainerConfig`; ``k`` is the merge period in
    minibatch steps and ``n_workers`` the number of simulated workers.

    Examples
    --------
    >>> clf = KStepCTRClassifier(n_workers=2, k=4, batch_size=64, minibatch_size=16)
    >>> clf = clf.fit([[0, 3], [1], [2, 3]] * 40, [1, 0, 1] * 40)
    >>> clf.predict_proba([[0, 3]]).shape
    (1, 2)
    """

    def __init__(self, n_workers=4, k=1, alpha=0.01, beta1=0.0, beta2=0.999, epsilon=0.01,
                 reset_local_v=True, embedding_dim=8, hidden=(16,), activation="relu", pooling="sum",
                 sparse_lr=0.5, batch_size=1024, minibatch_size=128, cache_capacity=4096,
                 store_dir=None, random_state=0, topology=None):
        self.n_workers = n_workers
        self.k = k
        self.alpha = alpha
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.reset_local_v = reset_local_v
        self.embedding_dim = embedding_dim
        self.hidden = hidden
        self.activation = activation
        self.pooling = pooling
        self.sparse_lr = sparse_lr
        self.batch_size = batch_size
        self.minibatch_size = minibatch_size
        self.cache_capacity = cache_capacity
        self.store_dir = store_dir
        self.random_state = random_state
        self.topology = topology

    def _trainer_config(self) -> TrainerConfig:
        adam = AdamHyper(alpha=self.alpha, beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon,
                         k=self.k, reset_local_v=self.reset_local_v)
        model = ModelConfig(embedding_dim=self.embedding_dim, hidden=tuple(self.hidden),
                            activation=self.activation, pooling=self.pooling)
        return TrainerConfig(n_workers=self.n_workers, adam=adam, model=model, sparse_lr=self.sparse_lr,
                             minibatch_size=self.minibatch_size, cache_capacity=self.cache_capacity,
                             store_dir=self.store_dir, seed=int(self.random_state or 0))

    def _start(self) -> None:
        if getattr(self, "context_", None) is not None:
            self.context_.close()
        self.context_ = TrainingContext(self._trainer_config(), self.topology)
        self.classes_ = np.array([0, 1])
        self._next_batch = 0

    def _batches(self, X, y):
        instances = to_instances(X, y)
        for b in batched(instances, self.batch_size, first_id=self._next_batch):
            self._next_batch = b.batch_id + 1
            yield b

    def fit(self, X, y):
        self._start()
        for b in self._batches(X, y):
            train_batch(self.context_, b)
        return self

    def partial_fit(self, X, y, classes=None):
        if getattr(self, "context_", None) is None:
            self._start()
        for b in self._batches(X, y):
            train_batch(self.context_, b)
        return self

    def fit_online(self, X, y):
        """Predict-then-train pass; per-batch metrics land in ``online_metrics_``."""
        self._start()
        result = online_eval(self.context_, self._batches(X, y))
        self.online_metrics_ = result.batches
        self.online_auc_ = result.cumulative_auc
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "context_")
        rows = check_instances(X)
        p = predict_proba(self.context_, [Instance(ids, 0) for ids in rows])
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    @property
    def ledger_(self):
        check_is_fitted(self, "context_")
        return self.context_.ledger

    @property
    def trajectory_(self):
        check_is_fitted(self, "context_")
        return self.context_.trajectory()
