"""Scikit-learn estimator wrapping the full training and inference stack.

``ClidMuClassifier`` accepts a feature matrix and (possibly noisy) integer
labels, runs the bilevel reweighting loop, and predicts with the averaged
probabilities of the retained low-divergence snapshots. It follows the
usual estimator conventions (params in ``__init__``, ``fit`` returns
``self``, fitted attributes end in an underscore) so it composes with
pipelines, ``clone`` and grid search.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import LabeledDataset, MetaSet, select_meta_set
from .ensemble import ensemble_predict
from .metaloop import TrainConfig, run_training
from .numerics import make_rng


class ClidMuClassifier(BaseEstimator, ClassifierMixin):
    """MLP classifier trained with divergence-guided sample reweighting.

    Parameters mirror :class:`TrainConfig`; see the package README for the
    meaning of each. ``meta_objective`` picks what the weighting network is
    tuned against: the label-free divergence (default), or cross-entropy /
    MAE on the meta set's labels.
    """

    def __init__(self, hidden_sizes=(32, 32), meta_hidden=100, alpha=0.1, gamma=0.05,
                 tau=0.5, batch_size=100, meta_batch_size=100, epochs=30,
                 max_iters=None, snapshots=5, meta_objective="clid",
                 meta_set_strategy="random_noisy", meta_size=1000, warmup_epochs=10,
                 sg_mode="target_q", seed=0):
        self.hidden_sizes = hidden_sizes
        self.meta_hidden = meta_hidden
        self.alpha = alpha
        self.gamma = gamma
        self.tau = tau
        self.batch_size = batch_size
        self.meta_batch_size = meta_batch_size
        self.epochs = epochs
        self.max_iters = max_iters
        self.snapshots = snapshots
        self.meta_objective = meta_objective
        self.meta_set_strategy = meta_set_strategy
        self.meta_size = meta_size
        self.warmup_epochs = warmup_epochs
        self.sg_mode = sg_mode
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(alpha=self.alpha, gamma=self.gamma, tau=self.tau,
                           batch_size=self.batch_size,
                           meta_batch_size=self.meta_batch_size, epochs=self.epochs,
                           max_iters=self.max_iters, snapshots=self.snapshots,
                           meta_objective=self.meta_objective,
                           meta_set_strategy=self.meta_set_strategy,
                           meta_size=self.meta_size, warmup_epochs=self.warmup_epochs,
                           sg_mode=self.sg_mode, seed=self.seed,
                           hidden_sizes=tuple(self.hidden_sizes),
                           meta_hidden=self.meta_hidden)

    def fit(self, X, y, y_clean=None):
        """Train on features ``X`` and (noisy) labels ``y``.

        ``y_clean`` is only consulted by the ``oracle_clean`` meta-set
        strategy, the ceiling baseline that assumes trustworthy labels.
        """
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least 2 classes")
        if y_clean is not None:
            y_clean = np.asarray(y_clean)
            clean_idx = np.searchsorted(self.classes_, y_clean)
            if np.any(self.classes_[np.clip(clean_idx, 0, len(self.classes_) - 1)] != y_clean):
                raise ValueError("y_clean contains labels unseen in y")
        else:
            if self.meta_set_strategy == "oracle_clean":
                raise ValueError("oracle_clean strategy needs y_clean passed to fit")
            clean_idx = y_idx
        ds = LabeledDataset(X, clean_idx, y_idx, len(self.classes_))
        config = self._config()
        config.validate()
        meta_size = min(config.meta_size, ds.n_samples)
        meta_set = None
        if config.meta_set_strategy != "pseudo_clean_gmm":
            meta_set = select_meta_set(ds, meta_size, config.meta_set_strategy,
                                       make_rng(config.seed + 1))
        self.store_, self.history_ = run_training(config, ds, meta_set=meta_set)
        self.meta_set_ = meta_set
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        """Snapshot-averaged class probabilities."""
        check_is_fitted(self, "store_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return ensemble_predict(self.store_, X)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
