"""scikit-learn compatible front end for the sequence classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .inference import evaluate, predict_cases
from .preprocessing import select_tau
from .training import TrainConfig, fit_prepared, prepare_cases
from .validation import check_labels, check_sequences


class SequenceAttentionClassifier(ClassifierMixin, BaseEstimator):
    """Weakly supervised classifier for variable-length feature sequences.

    ``X`` is a list of ``n_i x d`` arrays (one per case) and ``y`` holds one
    class index per case, class 0 being the background class.  Fitting
    calibrates the deduplication threshold, trains the attention and pooling
    heads jointly, and keeps the training-set trajectories as the KNN bank.
    ``predict`` returns the majority vote of the pooled, DTW-distance and
    KNN strategies.

    Hyperparameters mirror :class:`microseq.training.TrainConfig`.
    """

    def __init__(self, n_classes=None, lr=1e-4, beta1=0.9, beta2=0.999, epsilon=1e-8, epochs=50,
                 accumulation_size=8, patience=10, target_len=75, target_kind="implicit",
                 lambda_dtw=1.0, lambda_ap=10.0, lambda_align=10.0, gamma=0.1, align_mode="soft_argmax",
                 align_temperature=0.1, seed=0, d_k=192, h=96, ap_input="ca_output", ca_separate_kv=False,
                 knn_k=5, duplicate_fraction=0.25, tau=None, use_wavelet=True, use_implicit_target=True,
                 use_ideal_reference=True, use_align=True, use_attention=True, use_ap=True, n_jobs=1):
        self.n_classes = n_classes
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.epochs = epochs
        self.accumulation_size = accumulation_size
        self.patience = patience
        self.target_len = target_len
        self.target_kind = target_kind
        self.lambda_dtw = lambda_dtw
        self.lambda_ap = lambda_ap
        self.lambda_align = lambda_align
        self.gamma = gamma
        self.align_mode = align_mode
        self.align_temperature = align_temperature
        self.seed = seed
        self.d_k = d_k
        self.h = h
        self.ap_input = ap_input
        self.ca_separate_kv = ca_separate_kv
        self.knn_k = knn_k
        self.duplicate_fraction = duplicate_fraction
        self.tau = tau
        self.use_wavelet = use_wavelet
        self.use_implicit_target = use_implicit_target
        self.use_ideal_reference = use_ideal_reference
        self.use_align = use_align
        self.use_attention = use_attention
        self.use_ap = use_ap
        self.n_jobs = n_jobs

    def to_config(self) -> TrainConfig:
        params = self.get_params()
        params.pop("n_classes")
        params.pop("n_jobs")
        return TrainConfig(**params).validate()

    def fit(self, X, y, eval_set=None):
        """Train on ``(X, y)``; ``eval_set=(X_val, y_val)`` enables early stopping."""
        cfg = self.to_config()
        X = check_sequences(X)
        y = check_labels(y, len(X), self.n_classes)
        n_classes = self.n_classes or max(2, int(y.max()) + 1)
        X_val, y_val = [], []
        if eval_set is not None:
            X_val = check_sequences(eval_set[0], dim=X[0].shape[1])
            y_val = check_labels(eval_set[1], len(X_val), n_classes)
        tau = cfg.tau if cfg.tau is not None else select_tau(list(X) + list(X_val), cfg.duplicate_fraction)
        train_cases = prepare_cases(X, y, tau, cfg)
        val_cases = prepare_cases(X_val, y_val, tau, cfg)
        result = fit_prepared(train_cases, val_cases, n_classes, cfg, tau)
        self.params_ = result.params
        self.tau_ = tau
        self.bank_ = result.bank
        self.history_ = [s.to_dict() for s in result.history]
        self.best_epoch_ = result.best_epoch
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = X[0].shape[1]
        return self

    def _predictions(self, X):
        check_is_fitted(self, "params_")
        cfg = self.to_config()
        X = check_sequences(X, dim=self.n_features_in_)
        cases = prepare_cases(X, [None] * len(X), self.tau_, cfg)
        return predict_cases(self.params_, cases, self.bank_, target_len=cfg.target_len, gamma=cfg.gamma,
                             target_kind=cfg.effective_target_kind, k=cfg.knn_k, jobs=self.n_jobs)

    def predict_strategies(self, X):
        """Per-case StrategyPrediction objects (pooled, DTW, KNN and vote)."""
        return self._predictions(X)

    def predict(self, X):
        return np.array([p.vote_class for p in self._predictions(X)])

    def predict_proba(self, X):
        """Pooled-head class probabilities; only available when the pooling module is on."""
        if not self.use_ap:
            raise AttributeError("predict_proba needs the attention-pooling head (use_ap=True)")
        return np.array([p.y_ap for p in self._predictions(X)])

    def evaluate(self, X, y):
        """EvalReport with per-strategy accuracy and F1."""
        preds = self._predictions(X)
        return evaluate(preds, check_labels(y, len(preds)), len(self.classes_))
