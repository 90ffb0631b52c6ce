"""Shared estimator plumbing: measurement validation and the fit/transform mixin."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import DimensionMismatch


def check_measurements(Y, q):
    """Coerce a measurement sequence to a finite (T, q) float array."""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        if q != 1:
            raise DimensionMismatch(f"1-D measurements are only accepted for q = 1 (model has q = {q})")
        Y = Y[:, None]
    Y = check_array(Y, dtype=float, ensure_2d=True, ensure_min_samples=1)
    if Y.shape[1] != q:
        raise DimensionMismatch(f"measurements have {Y.shape[1]} columns, model has q = {q}")
    return Y


class SequentialEstimatorMixin(TransformerMixin, BaseEstimator):
    """fit/transform over a measurement sequence ``Y`` of shape (T, q).

    Subclasses provide ``_start()`` returning a fresh internal state and
    ``_advance(state, y)`` returning ``(record, new_state)``.  Records must
    expose ``x_hat``.  ``fit`` filters the whole sequence from the model
    prior, ``partial_fit`` continues from the current state, and
    ``transform`` re-runs from the prior and returns the estimates.
    """

    def _prepare(self):
        raise NotImplementedError

    def _start(self):
        raise NotImplementedError

    def _advance(self, state, y):
        raise NotImplementedError

    def fit(self, Y, y=None):
        self._prepare()
        self.state_ = self._start()
        self.records_ = []
        return self.partial_fit(Y)

    def partial_fit(self, Y, y=None):
        if not hasattr(self, "state_"):
            self._prepare()
            self.state_ = self._start()
            self.records_ = []
        Y = check_measurements(Y, self.model_.q)
        for row in Y:
            record, self.state_ = self._advance(self.state_, row)
            self.records_.append(record)
        self.n_steps_ = len(self.records_)
        return self

    def transform(self, Y):
        check_is_fitted(self, "state_")
        Y = check_measurements(Y, self.model_.q)
        state = self._start()
        out = np.empty((Y.shape[0], self.model_.d))
        for i, row in enumerate(Y):
            record, state = self._advance(state, row)
            out[i] = record.x_hat
        return out

    @property
    def estimates_(self):
        check_is_fitted(self, "records_")
        return np.array([r.x_hat for r in self.records_])
