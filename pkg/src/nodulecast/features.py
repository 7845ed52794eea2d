"""Encoding of nodule metadata into fixed-width numeric feature vectors."""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .ehr import ATTENUATIONS, LOCATIONS, MARGINS, EhrRecord

FEATURE_SCHEMA_VERSION = 1

# Field layout of the encoded vector, in order. One-hot blocks are scaled by
# 1/sqrt(block size) so categorical and continuous coordinates contribute
# comparably to Euclidean distances.
_CATEGORICAL = {"att": ATTENUATIONS, "loc": LOCATIONS, "margins": MARGINS}
_CONTINUOUS = ("long_dia", "perp_dia")
_LAYOUT = ("att", "loc", "long_dia", "perp_dia", "margins")


def feature_width() -> int:
    width = 0
    for name in _LAYOUT:
        width += len(_CATEGORICAL[name]) if name in _CATEGORICAL else 1
    return width


class FeatureEncoder(BaseEstimator, TransformerMixin):
    """Encode nodule-level fields into a width-stable real vector.

    Continuous fields are z-scored against statistics of the records seen in
    :meth:`fit` (the training split); categorical fields become one-hot
    blocks scaled by ``1/sqrt(block size)``. Transforming is a pure function
    of (record, fitted statistics).
    """

    def fit(self, ehrs: list[EhrRecord], y=None):
        values = {name: np.array([getattr(e, name) for e in ehrs], dtype=np.float64)
                  for name in _CONTINUOUS}
        self.mean_ = {name: float(v.mean()) for name, v in values.items()}
        std = {name: float(v.std()) for name, v in values.items()}
        self.std_ = {name: (s if s > 0 else 1.0) for name, s in std.items()}
        self.schema_version_ = FEATURE_SCHEMA_VERSION
        self.n_features_out_ = feature_width()
        return self

    def transform(self, ehrs: list[EhrRecord]) -> np.ndarray:
        check_is_fitted(self, "mean_")
        out = np.zeros((len(ehrs), self.n_features_out_), dtype=np.float64)
        for i, ehr in enumerate(ehrs):
            out[i] = self._encode_one(ehr)
        return out

    def _encode_one(self, ehr: EhrRecord) -> np.ndarray:
        parts = []
        for name in _LAYOUT:
            if name in _CATEGORICAL:
                values = _CATEGORICAL[name]
                value = getattr(ehr, name)
                if value not in values:
                    raise ValueError(f"unknown value {value!r} for field {name!r}")
                block = np.zeros(len(values))
                block[values.index(value)] = 1.0 / math.sqrt(len(values))
                parts.append(block)
            else:
                z = (getattr(ehr, name) - self.mean_[name]) / self.std_[name]
                parts.append(np.array([z]))
        return np.concatenate(parts)

    def get_state(self) -> dict:
        check_is_fitted(self, "mean_")
        return {
            "mean": self.mean_,
            "std": self.std_,
            "schema_version": self.schema_version_,
        }

    @classmethod
    def from_state(cls, state: dict) -> "FeatureEncoder":
        enc = cls()
        enc.mean_ = {k: float(v) for k, v in state["mean"].items()}
        enc.std_ = {k: float(v) for k, v in state["std"].items()}
        enc.schema_version_ = int(state["schema_version"])
        enc.n_features_out_ = feature_width()
        return enc
