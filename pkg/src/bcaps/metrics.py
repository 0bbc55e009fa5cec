"""Reconstruction metrics, classification metrics and the reconstruction classifier."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

K1, K2 = 0.01, 0.03
DATA_RANGE = 1.0
C1 = (K1 * DATA_RANGE) ** 2
C2 = (K2 * DATA_RANGE) ** 2
NUM_CLASSES = 10


def ssim(a, b) -> float:
    """Single-window SSIM over the whole image, population (co)variances."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes {a.shape} and {b.shape} differ")
    ma, mb = a.mean(), b.mean()
    da, db = a - ma, b - mb
    va, vb, cov = (da * da).mean(), (db * db).mean(), (da * db).mean()
    return float(((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2)))


def ssim_batch(A, B) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise ValueError(f"ssim: shapes {A.shape} and {B.shape} differ")
    A = A.reshape(len(A), -1)
    B = B.reshape(len(B), -1)
    ma, mb = A.mean(axis=1, keepdims=True), B.mean(axis=1, keepdims=True)
    da, db = A - ma, B - mb
    va, vb, cov = (da * da).mean(1), (db * db).mean(1), (da * db).mean(1)
    ma, mb = ma[:, 0], mb[:, 0]
    return ((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))


def mse_metric(a, b) -> float:
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"mse: shapes {a.shape} and {b.shape} differ")
    d = a - b
    # sum then divide, the same arithmetic as the training loss
    return float((d * d).sum() / d.size)


def mse_batch(A, B) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise ValueError(f"mse: shapes {A.shape} and {B.shape} differ")
    d = (A - B).reshape(len(A), -1)
    return (d * d).sum(axis=1) / d.shape[1]


@dataclass
class MetricsReport:
    mse: np.ndarray
    ssim: np.ndarray

    @property
    def n(self) -> int:
        return len(self.mse)

    @property
    def mse_mean(self) -> float:
        return float(np.mean(self.mse))

    @property
    def mse_std(self) -> float:
        return float(np.std(self.mse))

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self.ssim))

    @property
    def ssim_std(self) -> float:
        return float(np.std(self.ssim))

    def per_image_rows(self):
        return [(i, m, s) for i, (m, s) in enumerate(zip(self.mse, self.ssim))]

    def summary_rows(self):
        return [("mse", self.mse_mean, self.mse_std, self.n),
                ("ssim", self.ssim_mean, self.ssim_std, self.n)]


def reconstruction_report(originals, reconstructions) -> MetricsReport:
    return MetricsReport(mse_batch(originals, reconstructions), ssim_batch(originals, reconstructions))


# ------------------------------------------------------------ classification

def confusion(true_labels, predicted_labels, num_classes=NUM_CLASSES) -> np.ndarray:
    """counts[t, p]; rows are true classes, columns predictions."""
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError("label arrays differ in length")
    for arr in (t, p):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"label out of range 0..{num_classes - 1}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def f1_from_confusion(cm: np.ndarray) -> float:
    """Macro F1 over classes that occur as a true or predicted label."""
    tp = np.diag(cm).astype(np.float64)
    pred = cm.sum(axis=0)
    true = cm.sum(axis=1)
    present = (pred + true) > 0
    f1 = np.zeros(len(cm))
    ok = tp > 0
    precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    recall = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    f1[ok] = 2 * precision[ok] * recall[ok] / (precision[ok] + recall[ok])
    return float(f1[present].mean())


def f1_macro(true_labels, predicted_labels, num_classes=NUM_CLASSES) -> float:
    if len(true_labels) == 0:
        raise ValueError("f1 of an empty label set is undefined")
    return f1_from_confusion(confusion(true_labels, predicted_labels, num_classes))


class SoftmaxClassifier:
    """Multinomial logistic regression fit with mini-batch Adam.

    Small training sets get extra epochs so that at least ``min_steps``
    updates happen.
    """

    def __init__(self, epochs=15, batch_size=128, learning_rate=1e-3, l2=1e-4, seed=0, min_steps=500):
        self.epochs = epochs
        self.min_steps = min_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.l2 = l2
        self.seed = seed

    def fit(self, X, y):
        from .training import AdamState, adam_step

        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if len(X) == 0:
            raise ValueError("cannot train a classifier on an empty set")
        self.classes_ = np.unique(y)
        k = len(self.classes_)
        self.W = Tensor(np.zeros((X.shape[1], k)))
        self.b = Tensor(np.zeros(k))
        if k == 1:
            return self
        onehot = np.eye(k)[np.searchsorted(self.classes_, y)]
        rng = np.random.default_rng(self.seed)
        state = AdamState()
        params = {"W": self.W, "b": self.b}
        bs = min(self.batch_size, len(X))
        per_epoch = -(-len(X) // bs)
        for _ in range(max(self.epochs, -(-self.min_steps // per_epoch))):
            perm = rng.permutation(len(X))
            for i in range(0, len(X), bs):
                idx = perm[i:i + bs]
                xb = X[idx]
                p = self._proba(xb)
                d = (p - onehot[idx]) / len(idx)
                grads = {"W": xb.T @ d + self.l2 * self.W.data, "b": d.sum(axis=0)}
                adam_step(params, grads, state, self.learning_rate)
        return self

    def _proba(self, X):
        logits = X @ self.W.data + self.b.data
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        if len(self.classes_) == 1:
            return np.full(len(X), self.classes_[0])
        return self.classes_[np.argmax(self._proba(X), axis=1)]


class RbfSvmClassifier:
    """One-vs-rest RBF kernel SVM on a bounded random subset of the training set."""

    def __init__(self, C=100.0, gamma=0.01, max_train=5000, seed=0):
        self.C, self.gamma, self.max_train, self.seed = C, gamma, max_train, seed

    def fit(self, X, y):
        from sklearn.multiclass import OneVsRestClassifier
        from sklearn.svm import SVC

        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if len(X) == 0:
            raise ValueError("cannot train a classifier on an empty set")
        if len(X) > self.max_train:
            idx = np.random.default_rng(self.seed).choice(len(X), self.max_train, replace=False)
            X, y = X[idx], y[idx]
        self.classes_ = np.unique(y)
        if len(self.classes_) == 1:
            self.model = None
            return self
        self.model = OneVsRestClassifier(SVC(C=self.C, gamma=self.gamma, kernel="rbf")).fit(X, y)
        return self

    def predict(self, X):
        if self.model is None:
            return np.full(len(X), self.classes_[0])
        return self.model.predict(np.asarray(X, dtype=np.float64))


# SVM regularization per dataset, from the grid search the evaluation protocol reports
SVM_C = {"mnist": 100.0, "fashion-mnist": 10.0}


def train_classifier(images, labels, kind="softmax_linear", dataset="mnist", seed=0):
    if kind == "softmax_linear":
        return SoftmaxClassifier(seed=seed).fit(images, labels)
    if kind == "rbf_svm_subset":
        return RbfSvmClassifier(C=SVM_C.get(dataset, 100.0), seed=seed).fit(images, labels)
    raise ValueError(f"unknown classifier kind {kind!r}")


def classify(classifier, images):
    return classifier.predict(images)
