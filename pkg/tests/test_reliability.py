import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.linear_model import LogisticRegression

from misure.exceptions import DegenerateFeatureError, DegenerateLabelsError, RecordError
from misure.reliability import (
    ReliabilityClassifier,
    ReliabilityFeatures,
    extract_features,
    predict_proba,
    roc_auc,
    train,
)


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def separable(n=40, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    X = rng.normal(size=(n, 3))
    X[:, 2] += np.where(y == 1, 5.0, -5.0)
    return X, y


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=50))
def test_auc_matches_pairwise_count(pairs):
    scores = [float(s) for s, _ in pairs]
    labels = [y for _, y in pairs]
    if all(labels) or not any(labels):
        with pytest.raises(DegenerateLabelsError):
            roc_auc(scores, labels)
        return
    auc, curve = roc_auc(scores, labels)
    assert abs(auc - pairwise_auc(scores, labels)) < 1e-9
    assert curve[0] == (0.0, 0.0) and curve[-1] == (1.0, 1.0)
    assert all(b[0] >= a[0] and b[1] >= a[1] for a, b in zip(curve, curve[1:]))


def test_auc_perfect_and_reversed():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])[0] == 1.0
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1])[0] == 0.0
    assert roc_auc([0.5] * 4, [0, 1, 0, 1])[0] == 0.5


def test_separable_data_is_classified_perfectly():
    X, y = separable()
    model = ReliabilityClassifier().fit(X, y)
    assert np.mean(model.predict(X) == y) == 1.0
    assert roc_auc(model.predict_proba(X)[:, 1], y)[0] == 1.0


def test_matches_sklearn_logistic_regression():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(120, 3)) * [1.0, 10.0, 0.1] + [0, 5, 1]
    y = (X @ [1.0, 0.1, 3.0] + rng.normal(size=120) > 1.3).astype(int)
    l2 = 0.05
    model = ReliabilityClassifier(l2=l2, tol=1e-12).fit(X, y)
    Z = (X - X.mean(0)) / X.std(0)
    # sklearn minimizes C*sum(loss) + ||w||^2/2, i.e. mean loss + ||w||^2 / (2 C n)
    ref = LogisticRegression(C=1.0 / (l2 * len(y)), tol=1e-12, max_iter=10000).fit(Z, y)
    np.testing.assert_allclose(model.coef_, ref.coef_[0], atol=1e-6)
    assert model.intercept_ == pytest.approx(ref.intercept_[0], abs=1e-6)


def test_permuted_labels_give_chance_auc():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(400, 3))
    y = (X[:, 0] + 0.5 * rng.normal(size=400) > 0).astype(int)
    aucs = []
    for k in range(10):
        yp = rng.permutation(y)
        half = 200
        model = ReliabilityClassifier().fit(X[:half], yp[:half])
        aucs.append(roc_auc(model.predict_proba(X[half:])[:, 1], yp[half:])[0])
    assert abs(np.mean(aucs) - 0.5) <= 0.1


def test_degenerate_labels_and_features():
    X, y = separable()
    with pytest.raises(DegenerateLabelsError):
        ReliabilityClassifier().fit(X, np.ones_like(y))
    with pytest.raises(DegenerateLabelsError):
        ReliabilityClassifier().fit(X[:3], [0, 1, 1])
    Xc = X.copy()
    Xc[:, 1] = 2.0
    with pytest.raises(DegenerateFeatureError, match="dice_msr_vs_pred"):
        ReliabilityClassifier().fit(Xc, y)


def test_extract_features_and_record_errors():
    rec = {"n_dilations": "2", "dice_explained": "0.95", "perturbation_ratio": "0.4"}
    f = extract_features(rec)
    np.testing.assert_array_equal(f.as_array(), [2, 0.95, 0.4])
    with pytest.raises(RecordError):
        extract_features({"n_dilations": "2", "dice_explained": "0.9"})
    with pytest.raises(RecordError):
        extract_features({**rec, "perturbation_ratio": "abc"})
    with pytest.raises(RecordError):
        ReliabilityFeatures(1, float("nan"), 0.1)


def test_json_round_trip(tmp_path):
    X, y = separable(seed=4)
    model = ReliabilityClassifier(l2=0.01).fit(X, y)
    path = tmp_path / "m.json"
    model.save(path)
    data = json.loads(path.read_text())
    assert data["features"] == ["n_dilations", "dice_msr_vs_pred", "nonzero_ratio"]
    back = ReliabilityClassifier.load(path)
    np.testing.assert_array_equal(back.predict_proba(X), model.predict_proba(X))
    assert back.get_params() == model.get_params()


def test_sklearn_protocol():
    model = ReliabilityClassifier(l2=0.2, max_iter=7)
    assert clone(model).get_params() == {"l2": 0.2, "max_iter": 7, "tol": 1e-6, "label_threshold": 0.9}
    X, y = separable()
    assert model.score(X, y) == 1.0 if model.fit(X, y) else False


def test_train_helper_uses_dice_threshold():
    rng = np.random.default_rng(1)
    feats = [ReliabilityFeatures(int(k % 3), float(d), float(r))
             for k, d, r in zip(range(30), rng.random(30), rng.random(30))]
    gt = np.array([f.nonzero_ratio for f in feats])  # label follows the ratio
    model = train(feats, gt, threshold=0.5)
    assert np.mean(model.predict(np.vstack([f.as_array() for f in feats])) == (gt >= 0.5)) == 1.0
    p = predict_proba(model, feats[0])
    assert 0.0 <= p <= 1.0
