"""SMC driver: normalize -> ESS check -> resample -> propose -> tempered reweight.

All weights are kept as natural logs, so the multiplicative update
``w_k = w_{k-1} * p(D | theta)^(1/T)`` becomes an addition.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import ParticleSet, effective_sample_size, normalize_log_weights, particle_streams, rng_stream
from .errors import ConfigError, DegeneracyError, DegenerateWeights, NumericalError, ShapeError

log = logging.getLogger(__name__)

RESAMPLE_SCHEMES = ("systematic", "multinomial")

# stream ids >= this are reserved for sampler-level (non-particle) randomness
_CONTROL_STREAM = 2**62


@dataclass
class SamplerConfig:
    particles: int = 10
    epochs: int = 50
    warmup: int = 25
    step_size: float = 2e-5
    trajectory_length: int = 10
    batch_size: int = 500
    temperature_warmup: float | None = None
    temperature_sampling: float | None = None
    resample_threshold: float = 0.5
    resample_scheme: str = "systematic"
    resample_every_iteration: bool = False
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.particles < 1:
            raise ConfigError("particles must be >= 1")
        if not 0 <= self.warmup < self.epochs:
            raise ConfigError(f"need 0 <= warmup < epochs, got warmup={self.warmup}, epochs={self.epochs}")
        if not self.step_size >= 0:
            raise ConfigError("step_size must be non-negative")
        for name in ("temperature_warmup", "temperature_sampling"):
            t = getattr(self, name)
            if t is not None and not t > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.resample_threshold <= 1:
            raise ConfigError("resample_threshold must lie in (0, 1]")
        if self.resample_scheme not in RESAMPLE_SCHEMES:
            raise ConfigError(f"resample_scheme must be one of {RESAMPLE_SCHEMES}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def temperatures(self, target):
        """``(T_B, T_M)``; unset values default to the dataset size (1 for analytic targets)."""
        default = float(getattr(target, "dataset_size", 1))
        tb = default if self.temperature_warmup is None else float(self.temperature_warmup)
        tm = default if self.temperature_sampling is None else float(self.temperature_sampling)
        return tb, tm


@dataclass
class PriorInit:
    """Draw particles from ``prior`` (anything with ``sample`` and ``log_density``)."""

    prior: object


@dataclass
class PretrainedInit:
    """Replicate one parameter vector across all particles.

    ``jitter > 0`` adds ``N(0, jitter^2 * prior_variance)`` noise per copy.
    """

    params: np.ndarray
    jitter: float = 0.0
    prior_variance: float = 1.0


def initialize(config, target, init):
    """Build the initial weighted particle set.

    Prior draws get ``log w0 = log pi(theta) - log q0(theta)`` with
    ``pi = p(D | theta)^(1/T_B) * prior``; replicated checkpoints start
    with uniform weights.
    """
    J = config.particles
    rngs = particle_streams(config.seed, J)
    if isinstance(init, PretrainedInit):
        theta = np.asarray(init.params, dtype=np.float64).reshape(-1)
        if theta.shape[0] != target.dim:
            raise ShapeError(f"checkpoint has {theta.shape[0]} parameters, target expects {target.dim}")
        params = np.tile(theta, (J, 1))
        if init.jitter > 0:
            scale = init.jitter * math.sqrt(init.prior_variance)
            for j, rng in enumerate(rngs):
                params[j] += scale * rng.standard_normal(target.dim)
        return ParticleSet(params, np.full(J, -math.log(J)))
    if isinstance(init, PriorInit):
        params = np.stack([init.prior.sample(rng, target.dim) for rng in rngs])
        tb, _ = config.temperatures(target)
        log_lik = _log_likelihoods(target, params)
        log_q0 = np.asarray(init.prior.log_density(params), dtype=np.float64)
        # prior ratio first, so a target prior equal to q0 cancels exactly
        log_w = log_lik / tb + (_log_priors(target, params) - log_q0)
        log_w = np.where(np.isfinite(log_w), log_w, -np.inf)
        return ParticleSet(params, log_w)
    raise ConfigError(f"unknown init {init!r}")


def _log_likelihoods(target, params, pool=None):
    if target.vectorized:
        return np.asarray(target.log_likelihood(params), dtype=np.float64)
    def fn(theta):
        try:
            return target.log_likelihood(theta)
        except NumericalError:
            return np.nan

    vals = pool.map(fn, params) if pool is not None else map(fn, params)
    return np.fromiter(vals, dtype=np.float64, count=len(params))


def _log_priors(target, params):
    if target.vectorized:
        return np.asarray(target.log_prior(params), dtype=np.float64)
    return np.array([target.log_prior(p) for p in params])


def systematic_indices(w, rng):
    J = len(w)
    positions = (rng.random() + np.arange(J)) / J
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    return np.minimum(np.searchsorted(cdf, positions, side="right"), J - 1)


def multinomial_indices(w, rng):
    J = len(w)
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    return np.minimum(np.searchsorted(cdf, rng.random(J), side="right"), J - 1)


def resample_indices(w, scheme, rng):
    w = np.asarray(w, dtype=np.float64)
    if not np.any(w > 0):
        raise DegenerateWeights("cannot resample: all weights are zero")
    if scheme == "systematic":
        return systematic_indices(w, rng)
    if scheme == "multinomial":
        return multinomial_indices(w, rng)
    raise ConfigError(f"unknown resampling scheme {scheme!r}")


def resample(particles, scheme, rng):
    """Draw ``J`` offspring proportional to the weights and reset weights to ``1/J``."""
    w, _ = normalize_log_weights(particles.log_weights)
    idx = resample_indices(w, scheme, rng)
    J = particles.count
    return ParticleSet(particles.params[idx], np.full(J, -math.log(J)))


def weight_update(log_w, log_likelihood, temperature):
    """``log_w + log_likelihood / T``; non-finite likelihoods kill the particle.

    Accepts scalars or arrays. Callers count the ``-inf`` results.
    """
    if not temperature > 0:
        raise ConfigError("temperature must be positive")
    ll = np.asarray(log_likelihood, dtype=np.float64)
    out = np.where(np.isfinite(ll), np.asarray(log_w, dtype=np.float64) + ll / temperature, -np.inf)
    return float(out) if out.ndim == 0 else out


class SampleStore:
    """Post-warm-up ``(params, log_weight, epoch, particle_id)`` records."""

    def __init__(self, dim):
        self.dim = int(dim)
        self._params = []
        self._log_w = []
        self._epoch = []
        self._pid = []

    def add_epoch(self, params, log_weights, epoch):
        params = np.asarray(params, dtype=np.float64)
        self._params.append(params.copy())
        self._log_w.append(np.asarray(log_weights, dtype=np.float64).copy())
        self._epoch.append(np.full(len(params), epoch, dtype=np.int64))
        self._pid.append(np.arange(len(params), dtype=np.int64))

    @classmethod
    def from_arrays(cls, params, log_weights, epochs, particle_ids):
        params = np.asarray(params, dtype=np.float64)
        store = cls(params.shape[1] if params.ndim == 2 else 0)
        if len(params):
            store._params = [params]
            store._log_w = [np.asarray(log_weights, dtype=np.float64)]
            store._epoch = [np.asarray(epochs, dtype=np.int64)]
            store._pid = [np.asarray(particle_ids, dtype=np.int64)]
        return store

    def __len__(self):
        return int(sum(len(e) for e in self._epoch))

    def _cat(self, parts, dtype, shape=(0,)):
        return np.concatenate(parts) if parts else np.zeros(shape, dtype=dtype)

    @property
    def params(self):
        return self._cat(self._params, np.float64, (0, self.dim))

    @property
    def log_weights(self):
        return self._cat(self._log_w, np.float64)

    @property
    def epochs(self):
        return self._cat(self._epoch, np.int64)

    @property
    def particle_ids(self):
        return self._cat(self._pid, np.int64)

    def normalized_weights(self, mode="global"):
        """Normalized sample weights.

        ``global`` normalizes across every stored sample at once;
        ``per_epoch`` normalizes within each epoch and gives every epoch
        equal total mass.
        """
        log_w = self.log_weights
        if mode == "global":
            return normalize_log_weights(log_w)[0]
        if mode == "per_epoch":
            epochs = self.epochs
            out = np.zeros_like(log_w)
            uniq = np.unique(epochs)
            for e in uniq:
                m = epochs == e
                out[m] = normalize_log_weights(log_w[m])[0] / len(uniq)
            return out
        raise ConfigError(f"unknown normalization mode {mode!r}")


@dataclass
class EpochRecord:
    epoch: int
    ess: float
    resampled: bool
    mean_loglik: float
    mean_log_weight: float
    max_log_weight: float
    log_evidence: float
    nonfinite: int
    val_loss: float = float("nan")
    wall_time: float = 0.0


@dataclass
class Diagnostics:
    records: list = field(default_factory=list)
    nonfinite_total: int = 0

    @property
    def ess(self):
        return np.array([r.ess for r in self.records])

    @property
    def log_evidence(self):
        return self.records[-1].log_evidence if self.records else 0.0


def run(config, target, proposal, init, monitor=None, callback=None):
    """Run ``config.epochs`` SMC iterations and collect post-warm-up samples.

    ``init`` is a :class:`PriorInit`, a :class:`PretrainedInit` or an
    existing :class:`ParticleSet`. ``monitor(particles)`` may return a
    validation loss that is logged but never acted upon. ``callback`` is
    called with each :class:`EpochRecord`.

    Returns ``(store, diagnostics, particles)``.
    """
    particles = init.copy() if isinstance(init, ParticleSet) else initialize(config, target, init)
    J = particles.count
    tb, tm = config.temperatures(target)
    rngs = particle_streams(config.seed, J)
    control = rng_stream(config.seed, _CONTROL_STREAM)
    store = SampleStore(particles.dim)
    diag = Diagnostics()
    log_evidence = 0.0
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        for k in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            try:
                w, log_z = normalize_log_weights(particles.log_weights)
            except DegenerateWeights:
                raise DegeneracyError(f"all particles degenerate at epoch {k}", diag) from None
            ess = effective_sample_size(w)
            resampled = config.resample_every_iteration or ess < config.resample_threshold * J
            if resampled:
                idx = resample_indices(w, config.resample_scheme, control)
                params = particles.params[idx]
                log_w = np.full(J, -math.log(J))
            else:
                params = particles.params
                log_w = particles.log_weights - log_z

            params = proposal.propose(params, target, rngs, pool)

            temperature = tb if k <= config.warmup else tm
            ll = _log_likelihoods(target, params, pool)
            new_log_w = weight_update(log_w, ll, temperature)
            nonfinite = int(np.sum(~np.isfinite(ll)))
            diag.nonfinite_total += nonfinite
            if nonfinite:
                log.warning("epoch %d: %d particles with non-finite likelihood", k, nonfinite)
            alive = np.isfinite(new_log_w)
            if alive.any():
                log_evidence += float(logsumexp(new_log_w))
                particles = ParticleSet(params, new_log_w)
                if k > config.warmup:
                    store.add_epoch(params, new_log_w, k)

            finite = np.isfinite(ll)
            n_data = float(getattr(target, "dataset_size", 1))
            rec = EpochRecord(
                epoch=k,
                ess=ess,
                resampled=bool(resampled),
                mean_loglik=float(np.mean(ll[finite]) / n_data) if finite.any() else float("-inf"),
                mean_log_weight=float(np.mean(new_log_w[alive])) if alive.any() else float("-inf"),
                max_log_weight=float(np.max(new_log_w)),
                log_evidence=log_evidence,
                nonfinite=nonfinite,
                val_loss=float(monitor(particles)) if monitor is not None and alive.any() else float("nan"),
                wall_time=time.perf_counter() - t0,
            )
            diag.records.append(rec)
            log.debug("epoch %d ess=%.2f resampled=%s mean_loglik=%.4f", k, ess, resampled, rec.mean_loglik)
            if not alive.any():
                # the failing epoch is recorded before aborting so callers can flush it
                raise DegeneracyError(f"all particles degenerate at epoch {k}", diag)
            if callback is not None:
                callback(rec)
    finally:
        if pool is not None:
            pool.shutdown()
    return store, diag, particles
