"""scikit-learn wrapper around the toy attention classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from sosd.config import RunConfig
from sosd.model import Batch, ModelConfig, ModelState, forward
from sosd.optim import OptimizerSpec, ScheduleSpec
from sosd.training import train

__all__ = ["ToyAttentionClassifier"]


class ToyAttentionClassifier(ClassifierMixin, BaseEstimator):
    """Single-head attention classifier trained full-batch on one token sequence.

    ``X`` is one sequence: each row is a token, and every token attends to all
    tokens passed in the same call. ``fit`` trains on that sequence and keeps
    the per-step telemetry in ``trace_``; ``predict`` labels each row of a new
    sequence.

    Parameters mirror the run config: ``learning_rate``, ``schedule`` (one of
    constant, step, wsd, cosine, with ``warmup``/``decay`` as fractions of
    ``max_steps`` and ``milestones`` for the step schedule), ``optimizer`` (gd,
    adamw, muon), ``weight_decay``, ``init_sigma`` and ``random_state``.

    Fitted attributes: ``classes_``, ``n_features_in_``, ``state_``,
    ``trace_``, ``phase_report_``, ``thresholds_``.
    """

    def __init__(
        self,
        learning_rate=0.05,
        max_steps=1000,
        optimizer="gd",
        schedule="constant",
        weight_decay=0.0,
        init_sigma=0.01,
        warmup=0.05,
        decay=0.2,
        milestones=(0.5,),
        window=50,
        random_state=0,
    ):
        self.learning_rate = learning_rate
        self.max_steps = max_steps
        self.optimizer = optimizer
        self.schedule = schedule
        self.weight_decay = weight_decay
        self.init_sigma = init_sigma
        self.warmup = warmup
        self.decay = decay
        self.milestones = milestones
        self.window = window
        self.random_state = random_state

    def _schedule_spec(self) -> ScheduleSpec:
        T = int(self.max_steps)
        if self.schedule == "wsd":
            w, dcy = int(round(self.warmup * T)), int(round(self.decay * T))
            return ScheduleSpec("wsd", self.learning_rate, warmup=w, stable=T - w - dcy, decay=dcy)
        if self.schedule == "cosine":
            return ScheduleSpec("cosine", self.learning_rate, warmup=int(round(self.warmup * T)))
        if self.schedule == "step":
            return ScheduleSpec("step", self.learning_rate, milestones=tuple(self.milestones))
        return ScheduleSpec(self.schedule, self.learning_rate)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, codes = np.unique(y, return_inverse=True)
        n, d = X.shape
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        if n < 2 or d < 2:
            raise ValueError("need at least two tokens and two features")
        self.n_features_in_ = d
        seed = 0 if self.random_state is None else int(self.random_state)
        cfg = RunConfig(
            model=ModelConfig(n=n, d=d, C=len(self.classes_), init_sigma=self.init_sigma, seed=seed),
            schedule=self._schedule_spec(),
            optimizer=OptimizerSpec(self.optimizer, weight_decay=self.weight_decay),
            total_steps=int(self.max_steps),
            window=int(self.window),
        )
        result = train(cfg, batch=Batch(X, codes))
        self.state_: ModelState = result.state
        self.trace_ = result.records
        self.phase_report_ = result.phases
        self.thresholds_ = result.constants
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        if X.shape[0] < 1:
            raise ValueError("X must contain at least one token")
        labels = np.zeros(X.shape[0], dtype=np.int64)
        return forward(self.state_, Batch(X, labels)).P

    def predict(self, X):
        P = self.predict_proba(X)
        return self.classes_[np.argmax(P, axis=1)]
