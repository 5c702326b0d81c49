"""Dense feed-forward classifiers with hand-written backprop, and the Gaussian prior.

The negative log-posterior for a mini-batch ``S`` of size ``M`` drawn from a
dataset of size ``N`` is estimated as::

    grad U~(theta) = -(N / M) * sum_{i in S} grad log p(y_i | x_i, theta) - grad log q0(theta)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from .core import ParamLayout
from .errors import ConfigError, EmptyBatch, NumericalError, ShapeError

ACTIVATIONS = ("relu", "tanh")


class MlpModel:
    """Multi-layer perceptron ``layer_sizes[0] -> ... -> layer_sizes[-1]``.

    Hidden layers use ``activation``; the last layer emits raw logits.
    Parameters live in one flat vector ordered ``W0, b0, W1, b1, ...`` with
    ``W_i`` of shape ``(fan_in, fan_out)``.
    """

    def __init__(self, layer_sizes, activation="relu"):
        layer_sizes = [int(s) for s in layer_sizes]
        if len(layer_sizes) < 2 or min(layer_sizes) < 1:
            raise ConfigError(f"invalid layer sizes {layer_sizes}")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
        self.layer_sizes = layer_sizes
        self.activation = activation
        shapes = []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        self.layout = ParamLayout(shapes)

    def __repr__(self):
        return f"MlpModel({self.layer_sizes}, activation={self.activation!r})"

    @property
    def dim(self):
        return self.layout.dim

    @property
    def n_classes(self):
        return self.layer_sizes[-1]

    @property
    def n_layers(self):
        return len(self.layer_sizes) - 1

    def init_params(self, rng):
        """He-style random initialization with zero biases."""
        arrays = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            scale = math.sqrt(2.0 / fan_in) if self.activation == "relu" else math.sqrt(1.0 / fan_in)
            arrays += [rng.normal(0.0, scale, size=(fan_in, fan_out)), np.zeros(fan_out)]
        return self.layout.flatten(arrays)

    def _act(self, z):
        return np.maximum(z, 0.0) if self.activation == "relu" else np.tanh(z)

    def _check(self, params, inputs):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.dim,):
            raise ShapeError(f"params must have shape ({self.dim},), got {params.shape}")
        inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        if inputs.shape[1] != self.layer_sizes[0]:
            raise ShapeError(f"inputs have {inputs.shape[1]} features, expected {self.layer_sizes[0]}")
        return params, inputs

    def _forward(self, params, inputs):
        arrays = self.layout.unflatten(params)
        hidden = [inputs]
        h = inputs
        for i in range(self.n_layers):
            with np.errstate(over="ignore", invalid="ignore"):
                z = h @ arrays[2 * i] + arrays[2 * i + 1]
            if i < self.n_layers - 1:
                h = self._act(z)
                hidden.append(h)
            else:
                h = z
        return h, hidden, arrays

    def logits(self, params, inputs):
        params, inputs = self._check(params, inputs)
        return self._forward(params, inputs)[0]

    def predict_proba(self, params, inputs):
        return softmax(self.logits(params, inputs), axis=1)

    def log_likelihoods(self, params, inputs, labels):
        """Per-example ``log p(y_n | x_n, theta)``."""
        z = self.logits(params, inputs)
        if not np.all(np.isfinite(z)):
            raise NumericalError("non-finite forward activations")
        labels = np.asarray(labels, dtype=np.int64)
        return log_softmax(z, axis=1)[np.arange(len(labels)), labels]

    def log_likelihood(self, params, inputs, labels):
        """Sum of per-example log-likelihoods over the given data."""
        return float(np.sum(self.log_likelihoods(params, inputs, labels)))

    def grad_log_likelihood(self, params, inputs, labels):
        """Return ``(sum log p, grad of sum log p)`` by reverse-mode backprop."""
        params, inputs = self._check(params, inputs)
        labels = np.asarray(labels, dtype=np.int64)
        z, hidden, arrays = self._forward(params, inputs)
        if not np.all(np.isfinite(z)):
            raise NumericalError("non-finite forward activations")
        logp = log_softmax(z, axis=1)
        rows = np.arange(len(labels))
        value = float(np.sum(logp[rows, labels]))

        delta = -np.exp(logp)
        delta[rows, labels] += 1.0
        grads = [None] * (2 * self.n_layers)
        for i in reversed(range(self.n_layers)):
            grads[2 * i] = hidden[i].T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                delta = delta @ arrays[2 * i].T
                h = hidden[i]
                if self.activation == "relu":
                    delta *= h > 0
                else:
                    delta *= 1.0 - h * h
        return value, self.layout.flatten(grads)


def log_likelihood_full(model, params, inputs, labels):
    if len(labels) == 0:
        raise EmptyBatch("dataset is empty")
    return model.log_likelihood(params, inputs, labels)


@dataclass(frozen=True)
class GaussianPrior:
    """Isotropic zero-mean Gaussian prior ``N(0, variance * I)``."""

    variance: float = 1.0

    def __post_init__(self):
        if not self.variance > 0:
            raise ConfigError(f"prior variance must be positive, got {self.variance}")

    def log_density(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        d = theta.shape[-1]
        return -0.5 * d * math.log(2 * math.pi * self.variance) - 0.5 * np.sum(theta * theta, axis=-1) / self.variance

    def grad_log_density(self, theta):
        return -np.asarray(theta, dtype=np.float64) / self.variance

    def sample(self, rng, dim, size=None):
        shape = (dim,) if size is None else (size, dim)
        return rng.normal(0.0, math.sqrt(self.variance), size=shape)


def log_prior(params, prior):
    return float(prior.log_density(params))


def grad_log_prior(params, prior):
    return prior.grad_log_density(params)


@dataclass
class MiniBatch:
    inputs: np.ndarray
    labels: np.ndarray
    indices: np.ndarray
    dataset_size: int

    @property
    def size(self):
        return len(self.indices)

    @classmethod
    def from_indices(cls, inputs, labels, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return cls(inputs[indices], labels[indices], indices, len(labels))


def shuffled_batches(n, batch_size, rng):
    """Partition ``range(n)`` into shuffled batches of at most ``batch_size``.

    Each batch is a uniformly random subset drawn without replacement; the
    last one is short when ``batch_size`` does not divide ``n``.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def grad_neg_log_posterior_minibatch(model, params, batch, prior):
    """Mini-batch estimate of the gradient of the negative log-posterior."""
    m = batch.size
    if m == 0:
        raise EmptyBatch("mini-batch is empty")
    _, g = model.grad_log_likelihood(params, batch.inputs, batch.labels)
    return -(batch.dataset_size / m) * g - prior.grad_log_density(params)
