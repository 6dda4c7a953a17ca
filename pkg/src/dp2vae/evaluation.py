"""Synthetic-data quality: Frechet distance between feature Gaussians and
train-on-synthetic / test-on-real classifier accuracy.

Features are a PCA projection fitted on real images, not Inception
activations, so distances here are only meaningful relative to each other.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data_io import LabeledDataset, N_CLASSES
from .errors import (DegenerateDataError, InsufficientDataError, InvalidParameterError,
                     ShapeError)
from .nn import AdamState, DenseNet, adam_update, backward, forward
from .numerics import RngStream, sqrtm_psd, sym_eig_psd

MLP_STREAM_BASE = 3 << 32


@dataclass
class FeatureMap:
    kind: str
    mean: np.ndarray | None = None
    projection: np.ndarray | None = None

    @property
    def dim(self) -> int | None:
        return None if self.projection is None else self.projection.shape[1]

    def transform(self, images) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if self.kind == "raw_pixels":
            return images
        return (images - self.mean) @ self.projection


def fit_features(real_images, kind: str = "pca", d_f: int = 64) -> FeatureMap:
    """Fit the feature map on real images only."""
    x = np.asarray(real_images, dtype=np.float64)
    if kind == "raw_pixels":
        return FeatureMap("raw_pixels")
    if kind != "pca":
        raise InvalidParameterError(f"unknown feature kind {kind!r}")
    if d_f < 1 or len(x) < d_f:
        raise InvalidParameterError(f"pca needs 1 <= d_f <= N, got d_f={d_f}, N={len(x)}")
    mean = x.mean(axis=0)
    _, _, vt = np.linalg.svd(x - mean, full_matrices=False)
    proj = vt[:d_f].T.copy()
    # sign convention: largest-magnitude entry of each direction is positive
    signs = np.sign(proj[np.argmax(np.abs(proj), axis=0), np.arange(d_f)])
    proj *= np.where(signs == 0, 1.0, signs)
    return FeatureMap("pca", mean, proj)


@dataclass
class GaussianFit:
    mu: np.ndarray
    sigma: np.ndarray


def gaussian_fit(features) -> GaussianFit:
    """Sample mean and unbiased covariance, symmetrized, negative eigenvalues clamped."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if len(f) < 2:
        raise InsufficientDataError(f"need at least 2 samples for a covariance, got {len(f)}")
    mu = f.mean(axis=0)
    centered = f - mu
    sigma = centered.T @ centered / (len(f) - 1)
    sigma = 0.5 * (sigma + sigma.T)
    w = np.linalg.eigvalsh(sigma)
    if w.size and w[0] < 0:
        eig = sym_eig_psd(sigma, tol=max(1e-8, 1e-8 * float(np.max(np.abs(w)))))
        sigma = eig.reconstruct()
        sigma = 0.5 * (sigma + sigma.T)
    return GaussianFit(mu, sigma)


def frechet_distance(a: GaussianFit, b: GaussianFit) -> float:
    """``||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})``.

    The cross term ``Tr((S_a^{1/2} S_b S_a^{1/2})^{1/2})`` equals the sum of the
    singular values of ``S_b^{1/2} S_a^{1/2}``. Taking it from an SVD avoids a
    second square root, which would amplify rounding near singular covariances,
    and is symmetric in ``a`` and ``b`` since swapping them transposes the product.
    """
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise ShapeError(f"fits have different dimensions: {a.mu.shape} vs {b.mu.shape}")
    diff = a.mu - b.mu
    root_a = sqrtm_psd(a.sigma, tol=1e-8 * max(1.0, float(np.abs(a.sigma).max())))
    root_b = sqrtm_psd(b.sigma, tol=1e-8 * max(1.0, float(np.abs(b.sigma).max())))
    cross = float(np.sum(np.linalg.svd(root_b @ root_a, compute_uv=False)))
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * cross)
    if value < 0:
        if value < -1e-8 * max(1.0, float(np.trace(a.sigma) + np.trace(b.sigma))):
            raise ArithmeticError(f"Frechet distance came out negative: {value}")
        value = 0.0
    return value


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_train_set(train: LabeledDataset):
    if len(train) == 0:
        raise InsufficientDataError("empty training set")
    if len(np.unique(train.labels)) < 2:
        raise DegenerateDataError("training set holds a single class")


class SoftmaxRegression:
    """Multinomial logistic regression by full-batch gradient descent.

    L2 penalty ``||W||^2 / (2 N)`` (bias unpenalized), step ``1/L`` from the
    Hessian bound, stopping at gradient norm ``tol`` or ``max_epochs``.
    """

    kind = "logreg"

    def __init__(self, n_classes=N_CLASSES, max_epochs=500, tol=1e-5):
        self.n_classes = n_classes
        self.max_epochs = max_epochs
        self.tol = tol
        self.weights = None
        self.epochs_run = 0

    def fit(self, x, y):
        x = np.hstack([np.asarray(x, dtype=np.float64), np.ones((len(x), 1))])
        n, d = x.shape
        target = np.zeros((n, self.n_classes))
        target[np.arange(n), y] = 1.0
        reg = 1.0 / n
        mask = np.ones((d, 1))
        mask[-1] = 0.0
        lipschitz = 0.5 * np.linalg.norm(x, 2) ** 2 / n + reg
        step = 1.0 / lipschitz
        w = np.zeros((d, self.n_classes))
        for epoch in range(self.max_epochs):
            grad = x.T @ (_softmax(x @ w) - target) / n + reg * mask * w
            if np.linalg.norm(grad) < self.tol:
                break
            w -= step * grad
        self.epochs_run = epoch + 1 if self.max_epochs else 0
        self.weights = w
        return self

    def predict_proba(self, x):
        x = np.asarray(x, dtype=np.float64)
        return _softmax(x @ self.weights[:-1] + self.weights[-1])

    def predict(self, x):
        return np.argmax(self.predict_proba(x), axis=1)


class MLPClassifier:
    """``linear(d, 100) -> ReLU -> linear(100, classes) -> softmax``, Adam with default settings."""

    kind = "mlp"

    def __init__(self, seed=0, n_classes=N_CLASSES, hidden=100, epochs=30, batch_size=64, lr=1e-3):
        self.seed = seed
        self.n_classes = n_classes
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.net = None

    def fit(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        rng = RngStream(self.seed, MLP_STREAM_BASE)
        self.net = DenseNet.init((x.shape[1], self.hidden, self.n_classes), ("relu", "identity"), rng)
        adam = AdamState.zeros(self.net.n_params)
        onehot = np.eye(self.n_classes)[y]
        for _ in range(self.epochs):
            order = rng.permutation(len(x))
            for start in range(0, len(x), self.batch_size):
                idx = order[start:start + self.batch_size]
                logits, tape = forward(self.net, x[idx])
                grad, _ = backward(self.net, tape, (_softmax(logits) - onehot[idx]) / len(idx))
                adam_update(self.net.params, grad, adam, self.lr)
                self.net.mark_updated()
        return self

    def predict_proba(self, x):
        logits, _ = forward(self.net, np.asarray(x, dtype=np.float64))
        return _softmax(logits)

    def predict(self, x):
        return np.argmax(self.predict_proba(x), axis=1)


def train_classifier(kind: str, train: LabeledDataset, seed: int = 0, **kwargs):
    _check_train_set(train)
    if kind == "logreg":
        model = SoftmaxRegression(**kwargs)
    elif kind == "mlp":
        model = MLPClassifier(seed=seed, **kwargs)
    else:
        raise InvalidParameterError(f"unknown classifier kind {kind!r}")
    return model.fit(train.images, train.labels)


@dataclass
class AccuracyResult:
    accuracy: float
    per_class: dict
    counts: dict


def evaluate_accuracy(classifier, test: LabeledDataset) -> AccuracyResult:
    """Fraction of correct argmax predictions, overall and per true class."""
    if len(test) == 0:
        raise InsufficientDataError("empty test set")
    pred = np.asarray(classifier.predict(test.images))
    correct = pred == test.labels
    per_class, counts = {}, {}
    for c in np.unique(test.labels):
        mask = test.labels == c
        per_class[int(c)] = float(correct[mask].mean())
        counts[int(c)] = int(mask.sum())
    return AccuracyResult(float(correct.mean()), per_class, counts)


@dataclass
class ClassifierReport:
    kind: str
    train_provenance: str
    accuracies: list = field(default_factory=list)
    seeds: list = field(default_factory=list)
    per_class: dict = field(default_factory=dict)

    @property
    def runs(self) -> int:
        return len(self.accuracies)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies))


def classifier_report(kind: str, train: LabeledDataset, test: LabeledDataset,
                      runs: int = 5, seed: int = 0, **kwargs) -> ClassifierReport:
    """Train/evaluate ``runs`` times with seeds ``seed .. seed+runs-1``."""
    report = ClassifierReport(kind, train.provenance)
    per_class = []
    for s in range(seed, seed + runs):
        result = evaluate_accuracy(train_classifier(kind, train, s, **kwargs), test)
        report.accuracies.append(result.accuracy)
        report.seeds.append(s)
        per_class.append(result.per_class)
    for c in per_class[0]:
        report.per_class[c] = float(np.mean([p[c] for p in per_class]))
    return report


def report_lines(frechet: float | None, reports) -> list:
    """CSV rows ``metric,value,seed`` followed by one JSON summary line per run."""
    lines = ["metric,value,seed"]
    if frechet is not None:
        lines.append(f"frechet_pca,{frechet!r},")
    for rep in reports:
        for s, acc in zip(rep.seeds, rep.accuracies):
            lines.append(f"{rep.kind}_accuracy,{acc!r},{s}")
        lines.append(f"{rep.kind}_accuracy_mean,{rep.mean_accuracy!r},")
    for rep in reports:
        for s, acc in zip(rep.seeds, rep.accuracies):
            lines.append("# " + json.dumps({"classifier": rep.kind, "seed": s, "accuracy": acc,
                                            "train": rep.train_provenance}, sort_keys=True))
    return lines
