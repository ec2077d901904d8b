"""Post-hoc reliability: predict from saliency features whether the model's
segmentation would reach a ground-truth Dice threshold."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit as _sigmoid
from scipy.stats import rankdata
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DegenerateFeatureError, DegenerateLabelsError, RecordError

FEATURE_NAMES = ("n_dilations", "dice_msr_vs_pred", "nonzero_ratio")


@dataclass(frozen=True)
class ReliabilityFeatures:
    n_dilations: int
    dice_msr_vs_pred: float
    nonzero_ratio: float

    def __post_init__(self):
        if not all(np.isfinite(v) for v in self.as_array()):
            raise RecordError("features must be finite")

    def as_array(self):
        return np.array([self.n_dilations, self.dice_msr_vs_pred, self.nonzero_ratio], dtype=float)


def _field(record, name):
    value = record.get(name) if isinstance(record, dict) else getattr(record, name, None)
    if value is None or value == "":
        raise RecordError(f"record is missing {name!r}")
    return value


def extract_features(record):
    """Three features from a MiSuRe record: dilation count, Dice explained of
    the minimal region and its nonzero-pixel ratio to the prediction."""
    try:
        return ReliabilityFeatures(
            n_dilations=int(_field(record, "n_dilations")),
            dice_msr_vs_pred=float(_field(record, "dice_explained")),
            nonzero_ratio=float(_field(record, "perturbation_ratio")),
        )
    except (TypeError, ValueError) as exc:
        raise RecordError(f"malformed record: {exc}") from exc


class ReliabilityClassifier(ClassifierMixin, BaseEstimator):
    """L2-penalized logistic regression on standardized features, fitted by
    Newton's method.

    Parameters
    ----------
    l2 : float
        Penalty on the weights (the bias is not penalized), applied to the
        mean log-loss as ``l2 / 2 * ||w||^2``.
    max_iter : int
    tol : float
        Stop once the max-norm of the gradient falls below ``tol``.
    label_threshold : float
        Ground-truth Dice at or above which a prediction counts as reliable.
        Only used by :meth:`fit_dice`.
    """

    def __init__(self, l2=1e-3, max_iter=100, tol=1e-6, label_threshold=0.9):
        self.l2 = l2
        self.max_iter = max_iter
        self.tol = tol
        self.label_threshold = label_threshold

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y).astype(int).ravel()
        if X.ndim != 2 or len(X) != len(y):
            raise ValueError("X must be 2-D with one row per label")
        counts = np.bincount(y, minlength=2)
        if len(counts) > 2 or counts.min() < 2:
            raise DegenerateLabelsError(f"need at least 2 samples of each class, got {counts.tolist()}")
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        if np.any(std <= 0):
            bad = [FEATURE_NAMES[i] if X.shape[1] == 3 else str(i) for i in np.flatnonzero(std <= 0)]
            raise DegenerateFeatureError(f"constant feature(s): {bad}")
        Z = np.hstack([(X - mean) / std, np.ones((len(X), 1))])
        n, d = Z.shape
        theta = np.zeros(d)
        penalty = np.full(d, self.l2)
        penalty[-1] = 0.0
        for it in range(1, self.max_iter + 1):
            p = _sigmoid(Z @ theta)
            grad = Z.T @ (p - y) / n + penalty * theta
            if np.max(np.abs(grad)) < self.tol:
                break
            H = (Z * (p * (1 - p))[:, None]).T @ Z / n + np.diag(penalty) + 1e-12 * np.eye(d)
            theta = theta - np.linalg.solve(H, grad)
        self.coef_ = theta[:-1].copy()
        self.intercept_ = float(theta[-1])
        self.mean_ = mean
        self.scale_ = std
        self.classes_ = np.array([0, 1])
        self.n_iter_ = it
        self.n_features_in_ = X.shape[1]
        return self

    def fit_dice(self, X, gt_dice):
        """Fit with labels ``gt_dice >= label_threshold``."""
        return self.fit(X, np.asarray(gt_dice) >= self.label_threshold)

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return ((X - self.mean_) / self.scale_) @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        p = _sigmoid(self.decision_function(X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)

    def to_dict(self):
        check_is_fitted(self, "coef_")
        return {
            "format": "misure-reliability/1",
            "features": list(FEATURE_NAMES),
            "weights": self.coef_.tolist(),
            "bias": self.intercept_,
            "standardization": {"mean": self.mean_.tolist(), "std": self.scale_.tolist()},
            "label_threshold": self.label_threshold,
            "params": self.get_params(),
            "n_iter": int(self.n_iter_),
        }

    @classmethod
    def from_dict(cls, data):
        model = cls(**data.get("params", {}))
        model.coef_ = np.asarray(data["weights"], dtype=float)
        model.intercept_ = float(data["bias"])
        model.mean_ = np.asarray(data["standardization"]["mean"], dtype=float)
        model.scale_ = np.asarray(data["standardization"]["std"], dtype=float)
        model.label_threshold = data.get("label_threshold", model.label_threshold)
        model.classes_ = np.array([0, 1])
        model.n_iter_ = data.get("n_iter", 0)
        model.n_features_in_ = len(model.coef_)
        return model

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _feature_matrix(features):
    rows = [f.as_array() if isinstance(f, ReliabilityFeatures) else np.asarray(f, dtype=float)
            for f in features]
    return np.vstack(rows)


def train(features, gt_dice, threshold=0.9, l2=1e-3, max_iter=100):
    """Fit a :class:`ReliabilityClassifier` with labels ``gt_dice >= threshold``."""
    model = ReliabilityClassifier(l2=l2, max_iter=max_iter, label_threshold=threshold)
    return model.fit_dice(_feature_matrix(features), gt_dice)


def predict_proba(model, features):
    """Probability that the prediction is reliable, for one feature vector."""
    X = _feature_matrix([features])
    return float(model.predict_proba(X)[0, 1])


def roc_auc(scores, labels):
    """AUC via the rank statistic (ties count one half) and the ROC curve
    sampled at every distinct score, as ``(auc, [(fpr, tpr), ...])``."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError("ROC needs both classes")
    ranks = rankdata(s)
    auc = (ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
    curve = [(0.0, 0.0)]
    for t in np.unique(s)[::-1]:
        pred = s >= t
        curve.append((float(np.sum(pred & ~y) / n_neg), float(np.sum(pred & y) / n_pos)))
    return float(auc), curve
