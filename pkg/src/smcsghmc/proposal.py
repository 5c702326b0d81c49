"""Leapfrog proposals: plain HMC for analytic targets, mini-batch SGHMC for networks.

Neither proposal injects noise, applies friction or performs a
Metropolis-Hastings correction. Given the initial momentum and the batch
order, a trajectory is a deterministic map; the importance weights of the
SMC sampler absorb the discretisation bias.

Sign convention: the potential ``U`` is the negative log-posterior, so the
momentum moves *against* ``grad U`` (``r <- r - eps * grad U``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError


def _checked(g, particle):
    if not np.all(np.isfinite(g)):
        if particle is None and np.ndim(g) == 2:
            particle = int(np.flatnonzero(~np.all(np.isfinite(g), axis=1))[0])
        raise NumericalError("non-finite gradient", particle)
    return g


def leapfrog(theta, momentum, step_size, n_steps, grad_potential, particle=None):
    """Integrate ``n_steps`` leapfrog steps with identity mass.

    ``grad_potential(theta, k)`` returns the (possibly stochastic) gradient
    for batch ``k``. The opening half-step uses batch 0, the full momentum
    step after position update ``t`` uses batch ``t`` and the closing
    half-step reuses the last batch. Returns ``(theta, momentum)``.
    """
    if n_steps < 1:
        raise ConfigError("n_steps must be >= 1")
    theta = np.array(theta, dtype=np.float64)
    r = np.array(momentum, dtype=np.float64)
    # overflow surfaces as a non-finite gradient, which _checked reports
    with np.errstate(over="ignore", invalid="ignore"):
        r -= 0.5 * step_size * _checked(grad_potential(theta, 0), particle)
        for t in range(1, n_steps + 1):
            theta += step_size * r
            if t < n_steps:
                r -= step_size * _checked(grad_potential(theta, t), particle)
        r -= 0.5 * step_size * _checked(grad_potential(theta, n_steps - 1), particle)
    return theta, r


def hmc_propose(theta, target, step_size, n_steps, rng=None, momentum=None,
                return_momentum=False, particle=None):
    """One unadjusted HMC trajectory of ``n_steps`` on an exact-gradient target.

    ``theta`` may be a single point or a ``(J, dim)`` stack. A fresh
    momentum is drawn from ``rng`` unless ``momentum`` is supplied. With
    ``return_momentum=True`` returns ``(theta, initial_momentum, final_momentum)``,
    which is what reversibility checks need.
    """
    theta = np.asarray(theta, dtype=np.float64)
    r0 = rng.standard_normal(theta.shape) if momentum is None else np.asarray(momentum, dtype=np.float64)
    new, r = leapfrog(theta, r0, step_size, n_steps, lambda x, k: target.grad_potential(x), particle)
    if return_momentum:
        return new, r0, r
    return new


def sghmc_propose(theta, target, batches, step_size, rng=None, momentum=None,
                  return_momentum=False, particle=None):
    """One SGHMC trajectory: one leapfrog step per mini-batch, in order.

    ``batches`` is normally a shuffled partition of the dataset, so one
    trajectory is one pass over the data.
    """
    if len(batches) == 0:
        raise ConfigError("need at least one mini-batch")
    theta = np.asarray(theta, dtype=np.float64)
    r0 = rng.standard_normal(theta.shape) if momentum is None else np.asarray(momentum, dtype=np.float64)
    new, r = leapfrog(theta, r0, step_size, len(batches),
                      lambda x, k: target.grad_potential(x, batches[k]), particle)
    if return_momentum:
        return new, r0, r
    return new


@dataclass
class HmcProposal:
    """Fixed-length HMC move for vectorized analytic targets.

    A particle whose trajectory hits a non-finite gradient comes back as a
    row of NaN; the sampler then gives it zero weight.
    """

    step_size: float
    n_steps: int

    def _one(self, theta, target, r0, j):
        try:
            return hmc_propose(theta, target, self.step_size, self.n_steps, momentum=r0, particle=j)
        except NumericalError:
            return np.full_like(theta, np.nan)

    def propose(self, params, target, rngs, pool=None):
        momenta = np.stack([rng.standard_normal(params.shape[1]) for rng in rngs])
        if target.vectorized:
            try:
                return hmc_propose(params, target, self.step_size, self.n_steps, momentum=momenta)
            except NumericalError:
                pass  # redo one by one so only the offending particles are lost
        return np.stack([self._one(params[j], target, momenta[j], j) for j in range(len(params))])


@dataclass
class SghmcProposal:
    """Mini-batch SGHMC move; each particle shuffles its own batch order.

    Failed trajectories are returned as NaN rows, as for :class:`HmcProposal`.
    """

    step_size: float
    batch_size: int

    def _move(self, theta, target, rng, j):
        # momentum first, then batch order: fixes the per-particle draw sequence
        r0 = rng.standard_normal(theta.shape[0])
        batches = target.batches(self.batch_size, rng)
        try:
            return sghmc_propose(theta, target, batches, self.step_size, momentum=r0, particle=j)
        except NumericalError:
            return np.full_like(theta, np.nan)

    def propose(self, params, target, rngs, pool=None):
        out = np.empty_like(params)
        jobs = range(len(params))
        if pool is None:
            results = map(lambda j: self._move(params[j], target, rngs[j], j), jobs)
        else:
            results = pool.map(lambda j: self._move(params[j], target, rngs[j], j), jobs)
        for j, theta in zip(jobs, results):
            out[j] = theta
        return out
