"""Weighted-ensemble prediction and evaluation metrics (accuracy, NLL, ECE, energy OOD)."""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp, softmax
from scipy.stats import rankdata

from .core import normalize_log_weights
from .errors import ConfigError, EmptyInput, InsufficientData, ShapeError

DEFAULT_ECE_BINS = 15


class WeightedEnsemble:
    """Posterior predictive ``sum_j w_j softmax(f(x; theta_j))``.

    Members with zero weight are dropped at construction.
    """

    def __init__(self, model, params, weights):
        params = np.atleast_2d(np.asarray(params, dtype=np.float64))
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        if len(params) == 0:
            raise EmptyInput("ensemble has no members")
        if params.shape != (len(weights), model.dim):
            raise ShapeError(f"params {params.shape} incompatible with {len(weights)} weights and dim {model.dim}")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ConfigError("ensemble weights must be non-negative and sum to 1")
        keep = weights > 0
        self.model = model
        self.params = params[keep]
        self.weights = weights[keep]

    @classmethod
    def from_log_weights(cls, model, params, log_weights):
        return cls(model, params, normalize_log_weights(log_weights)[0])

    @classmethod
    def from_store(cls, model, store, normalization="global"):
        return cls(model, store.params, store.normalized_weights(normalization))

    @classmethod
    def single(cls, model, params):
        return cls(model, np.asarray(params)[None, :], np.ones(1))

    def __len__(self):
        return len(self.weights)

    def predict_proba(self, inputs):
        inputs = np.atleast_2d(inputs)
        out = np.zeros((len(inputs), self.model.n_classes))
        for w, theta in zip(self.weights, self.params):
            out += w * self.model.predict_proba(theta, inputs)
        return out

    def predict(self, inputs):
        return np.argmax(self.predict_proba(inputs), axis=1)

    def energy(self, inputs, temperature=1.0):
        """Weight-averaged member energy scores."""
        inputs = np.atleast_2d(inputs)
        out = np.zeros(len(inputs))
        for w, theta in zip(self.weights, self.params):
            out += w * energy_score(self.model.logits(theta, inputs), temperature)
        return out


def ensemble_predict(ensemble, inputs):
    return ensemble.predict_proba(inputs)


def accuracy(probs, labels):
    probs = np.asarray(probs)
    if len(probs) == 0:
        raise EmptyInput("no predictions")
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


def nll(probs, labels, eps=1e-300):
    """Mean negative log predictive probability of the true labels."""
    probs = np.asarray(probs)
    if len(probs) == 0:
        raise EmptyInput("no predictions")
    p = probs[np.arange(len(probs)), np.asarray(labels)]
    return float(-np.mean(np.log(np.maximum(p, eps))))


def ece(probs, labels, bins=DEFAULT_ECE_BINS):
    """Expected calibration error with equal-width bins on max-probability.

    Bin ``b`` covers ``((b-1)/bins, b/bins]``; a confidence of exactly 0
    falls into the first bin.
    """
    if bins < 1:
        raise ConfigError("bins must be >= 1")
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or len(probs) == 0:
        raise EmptyInput("ece needs a non-empty (n, C) probability array")
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    edges = np.linspace(0.0, 1.0, bins + 1)
    which = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, bins - 1)
    n = len(conf)
    total = 0.0
    for b in range(bins):
        m = which == b
        if m.any():
            total += m.sum() / n * abs(correct[m].mean() - conf[m].mean())
    return float(total)


def energy_score(logits, temperature=1.0):
    """``-log sum_c exp(z_c / T)`` along the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    return -logsumexp(z / temperature, axis=-1)


def energy_score_t(logits, temperature):
    return energy_score(logits, temperature)


def fpr95_threshold(id_scores, tpr=0.95, min_samples=20):
    """Energy threshold below which a fraction ``tpr`` of ID scores fall.

    Uses linear interpolation between order statistics (Hyndman-Fan type 7,
    numpy's default ``linear`` method).
    """
    s = np.asarray(id_scores, dtype=np.float64).reshape(-1)
    if len(s) < min_samples:
        raise InsufficientData(f"need at least {min_samples} ID scores, got {len(s)}")
    return float(np.quantile(s, tpr, method="linear"))


def auroc(id_scores, ood_scores):
    """P(OOD score > ID score) + 0.5 P(tie), via the Mann-Whitney rank statistic."""
    a = np.asarray(id_scores, dtype=np.float64).reshape(-1)
    b = np.asarray(ood_scores, dtype=np.float64).reshape(-1)
    if len(a) == 0 or len(b) == 0:
        raise EmptyInput("auroc needs both ID and OOD scores")
    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[len(a):].sum() - len(b) * (len(b) + 1) / 2.0
    return float(u / (len(a) * len(b)))


def _ratio(num, den):
    return float(num / den) if den else 0.0


def ood_metrics(id_scores, ood_scores, tau):
    """Confusion-matrix metrics with OOD as the positive class (``E > tau`` => OOD)."""
    a = np.asarray(id_scores, dtype=np.float64)
    b = np.asarray(ood_scores, dtype=np.float64)
    tp = int(np.sum(b > tau))
    fn = len(b) - tp
    fp = int(np.sum(a > tau))
    tn = len(a) - fp
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    return {
        "accuracy": _ratio(tp + tn, tp + tn + fp + fn),
        "precision": precision,
        "recall": recall,
        "f1": _ratio(2 * precision * recall, precision + recall),
        "specificity": _ratio(tn, tn + fp),
        "auroc": auroc(a, b),
        "tp": tp, "fp": fp, "tn": tn, "fn": fn,
    }


def ood_report(ensemble, id_inputs, ood_inputs, tau):
    return ood_metrics(ensemble.energy(id_inputs), ensemble.energy(ood_inputs), tau)


def classification_report(ensemble, dataset, bins=DEFAULT_ECE_BINS):
    probs = ensemble.predict_proba(dataset.features)
    return {
        "accuracy": accuracy(probs, dataset.labels),
        "nll": nll(probs, dataset.labels),
        "ece": ece(probs, dataset.labels, bins),
    }


def softmax_probs(logits):
    return softmax(np.asarray(logits, dtype=np.float64), axis=-1)
