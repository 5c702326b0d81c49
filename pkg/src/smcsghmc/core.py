"""Particle containers, log-domain weight arithmetic and seeded random streams."""

from __future__ import annotations

from dataclasses import dataclass
from math import prod

import numpy as np
from scipy.special import logsumexp

from .errors import ContractViolation, DegenerateWeights, ShapeError


def normalize_log_weights(log_w):
    """Normalize log-domain weights.

    Returns ``(w, log_z)`` where ``w`` are the normalized weights and
    ``log_z = log(sum(exp(log_w)))`` is the log of the total unnormalized
    mass, i.e. the log evidence increment when ``log_w`` holds the previous
    normalized weights plus the incremental weights.
    """
    log_w = np.asarray(log_w, dtype=np.float64)
    if log_w.ndim != 1 or log_w.size == 0:
        raise ContractViolation("log_w must be a non-empty 1-d array")
    if np.any(np.isnan(log_w)) or np.any(log_w == np.inf):
        raise ContractViolation("log_w contains NaN or +inf")
    if not np.any(np.isfinite(log_w)):
        raise DegenerateWeights("all log-weights are -inf")
    log_z = float(logsumexp(log_w))
    w = np.exp(log_w - log_z)
    # absorb the last ulp of rounding so the sum is 1 to machine precision
    w /= w.sum()
    return w, log_z


def effective_sample_size(w, atol=1e-9):
    """Return ``1 / sum(w**2)`` for normalized weights ``w``.

    Evaluated as ``(sum v)^2 / sum v^2`` with ``v = w / max(w)``, which is
    the same quantity but exact (``== J``) for uniform weights.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0 or abs(w.sum() - 1.0) > atol or np.any(w < 0):
        raise ContractViolation("weights must be non-negative and sum to 1")
    v = w / w.max()
    return float(v.sum() ** 2 / np.dot(v, v))


def rng_stream(seed, stream_id):
    """Independent, reproducible generator for ``(seed, stream_id)``.

    Streams are derived with :class:`numpy.random.SeedSequence` spawn keys,
    so stream ``j`` never depends on how many other streams exist or in
    which order they are consumed.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream_id),))
    return np.random.Generator(np.random.Philox(ss))


def particle_streams(seed, count, offset=0):
    return [rng_stream(seed, offset + j) for j in range(count)]


class ParamLayout:
    """Flat-vector view over a fixed list of parameter array shapes."""

    def __init__(self, shapes):
        self.shapes = [tuple(int(d) for d in s) for s in shapes]
        self.sizes = [prod(s) for s in self.shapes]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes, dtype=np.int64)]).astype(int)
        self.dim = int(self.offsets[-1])

    def flatten(self, arrays):
        if len(arrays) != len(self.shapes):
            raise ShapeError(f"expected {len(self.shapes)} arrays, got {len(arrays)}")
        for a, s in zip(arrays, self.shapes):
            if np.shape(a) != s:
                raise ShapeError(f"array of shape {np.shape(a)} does not match {s}")
        if not arrays:
            return np.zeros(0)
        return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])

    def unflatten(self, vector):
        """Split ``vector`` into arrays of the registered shapes (views, no copy)."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.dim,):
            raise ShapeError(f"expected vector of length {self.dim}, got shape {vector.shape}")
        return [
            vector[lo:hi].reshape(s)
            for lo, hi, s in zip(self.offsets[:-1], self.offsets[1:], self.shapes)
        ]


def flatten_params(layout, arrays):
    return layout.flatten(arrays)


def unflatten_params(layout, vector):
    return layout.unflatten(vector)


@dataclass
class ParticleSet:
    """``J`` parameter vectors with natural-log importance weights."""

    params: np.ndarray
    log_weights: np.ndarray

    def __post_init__(self):
        self.params = np.atleast_2d(np.asarray(self.params, dtype=np.float64))
        self.log_weights = np.asarray(self.log_weights, dtype=np.float64).reshape(-1)
        if self.params.shape[0] != self.log_weights.shape[0]:
            raise ShapeError(
                f"{self.params.shape[0]} particles but {self.log_weights.shape[0]} weights"
            )

    @property
    def count(self):
        return self.params.shape[0]

    @property
    def dim(self):
        return self.params.shape[1]

    def normalized_weights(self):
        return normalize_log_weights(self.log_weights)[0]

    def ess(self):
        return effective_sample_size(self.normalized_weights())

    def copy(self):
        return ParticleSet(self.params.copy(), self.log_weights.copy())
