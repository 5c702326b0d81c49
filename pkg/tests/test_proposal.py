import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from smcsghmc.core import particle_streams
from smcsghmc.data import make_two_moons
from smcsghmc.errors import NumericalError
from smcsghmc.model import GaussianPrior, MlpModel
from smcsghmc.proposal import HmcProposal, SghmcProposal, hmc_propose, leapfrog, sghmc_propose
from smcsghmc.targets import GaussianTarget, GmmTarget, TemperedPosterior


class RecordingPosterior(TemperedPosterior):
    """Remembers which dataset indices each gradient call consumed."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.seen = []

    def grad_potential(self, theta, batch=None):
        self.seen.append(np.array(batch.indices))
        return super().grad_potential(theta, batch)


def small_posterior(cls=TemperedPosterior, n=50):
    data = make_two_moons(n, 0.1, seed=1)
    return cls(MlpModel([2, 6, 2], "tanh"), GaussianPrior(1.0), data)


def oscillator_matrix(eps):
    return np.array([[1 - eps**2 / 2, eps], [-eps + eps**3 / 4, 1 - eps**2 / 2]])


def test_zero_step_leaves_theta_unchanged():
    post = small_posterior()
    theta = np.random.default_rng(0).standard_normal(post.dim)
    batches = post.batches(10, np.random.default_rng(1))
    out = sghmc_propose(theta, post, batches, 0.0, rng=np.random.default_rng(2))
    np.testing.assert_array_equal(out, theta)
    np.testing.assert_array_equal(hmc_propose(np.ones(2), GmmTarget(), 0.0, 10, rng=np.random.default_rng(3)), np.ones(2))


@pytest.mark.parametrize("eps", [0.3, 0.1, 0.05])
def test_harmonic_oscillator_recurrence(eps):
    target = GaussianTarget(1)
    steps = int(round(2 * math.pi / eps))
    th0, r0 = 0.7, -1.3
    state = np.array([th0, r0])
    mat = oscillator_matrix(eps)
    h0 = 0.5 * (th0**2 + r0**2)
    for n in range(1, steps + 1):
        theta, r, r_end = hmc_propose(np.array([th0]), target, eps, n, momentum=np.array([r0]), return_momentum=True)
        expected = np.linalg.matrix_power(mat, n) @ state
        np.testing.assert_allclose([theta[0], r_end[0]], expected, rtol=1e-12, atol=1e-13)
        h = 0.5 * (theta[0] ** 2 + r_end[0] ** 2)
        assert abs(h - h0) <= eps**2 * h0


def test_single_full_batch_sghmc_is_plain_leapfrog():
    post = small_posterior()
    theta = np.random.default_rng(4).standard_normal(post.dim)
    r0 = np.random.default_rng(5).standard_normal(post.dim)
    full = [post.batch(np.arange(post.dataset_size))]
    out = sghmc_propose(theta, post, full, 0.01, momentum=r0)
    expected, _ = leapfrog(theta, r0, 0.01, 1, lambda x, k: post.grad_potential(x))
    np.testing.assert_array_equal(out, expected)


def test_trajectory_touches_every_index_once():
    post = small_posterior(RecordingPosterior, n=53)
    theta = np.zeros(post.dim)
    SghmcProposal(1e-3, 10)._move(theta, post, np.random.default_rng(6), 0)
    # calls: opening half-step (batch 0), one per inner position step, closing half-step (last batch)
    seen = post.seen
    assert len(seen) == 6 + 1
    distinct = seen[:-1]
    np.testing.assert_array_equal(seen[-1], seen[-2])
    assert sorted(np.concatenate(distinct).tolist()) == list(range(53))


def test_batch_scaling_uses_dataset_size():
    post = small_posterior()
    batches = post.batches(7, np.random.default_rng(7))
    assert all(b.dataset_size == post.dataset_size for b in batches)
    assert sum(len(b.indices) for b in batches) == post.dataset_size


@pytest.mark.parametrize("target", [GmmTarget(), GaussianTarget(2)], ids=["gmm", "quadratic"])
def test_reversibility(target):
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        start = rng.uniform(-5, 5, 2)
        theta, _, r_end = hmc_propose(start, target, 0.2, 10, rng=rng, return_momentum=True)
        back = hmc_propose(theta, target, 0.2, 10, momentum=-r_end)
        worst = max(worst, float(np.max(np.abs(back - start))))
    assert worst < 1e-10


@pytest.mark.parametrize("target", [GmmTarget(), GaussianTarget(2)], ids=["gmm", "quadratic"])
def test_leapfrog_step_preserves_volume(target):
    def step(z):
        th, r = leapfrog(z[:2], z[2:], 0.2, 1, lambda x, k: target.grad_potential(x))
        return np.concatenate([th, r])

    rng = np.random.default_rng(10)
    h = 1e-6
    for _ in range(20):
        z = np.concatenate([rng.uniform(-5, 5, 2), rng.standard_normal(2)])
        jac = np.column_stack([(step(z + e) - step(z - e)) / (2 * h) for e in np.eye(4) * h])
        assert abs(np.linalg.det(jac) - 1.0) < 1e-6


def test_deterministic_given_momentum_and_batches():
    post = small_posterior()
    rng = np.random.default_rng(11)
    theta = rng.standard_normal(post.dim)
    r0 = rng.standard_normal(post.dim)
    batches = post.batches(8, rng)
    a = sghmc_propose(theta, post, batches, 5e-3, momentum=r0)
    b = sghmc_propose(theta, post, batches, 5e-3, momentum=r0)
    np.testing.assert_array_equal(a, b)


def test_parallel_proposal_matches_serial():
    post = small_posterior()
    params = np.random.default_rng(12).standard_normal((6, post.dim))
    prop = SghmcProposal(5e-3, 8)
    serial = prop.propose(params, post, particle_streams(3, 6))
    with ThreadPoolExecutor(4) as pool:
        parallel = prop.propose(params, post, particle_streams(3, 6), pool)
    np.testing.assert_array_equal(serial, parallel)


def test_hmc_proposal_vectorized_matches_pointwise():
    target = GmmTarget()
    params = np.random.default_rng(13).uniform(-4, 4, (5, 2))
    stacked = HmcProposal(0.2, 10).propose(params, target, particle_streams(4, 5))
    rngs = particle_streams(4, 5)
    single = [hmc_propose(params[j], target, 0.2, 10, momentum=rngs[j].standard_normal(2)) for j in range(5)]
    np.testing.assert_allclose(stacked, single, rtol=1e-14, atol=1e-14)


def test_gmm_trajectory_from_mode_is_finite():
    target = GmmTarget()
    out = hmc_propose(target.means[7], target, 0.2, 10, rng=np.random.default_rng(14))
    assert np.all(np.isfinite(out))


class NanTarget:
    vectorized = True
    dim = 2

    def grad_potential(self, theta, batch=None):
        g = np.array(theta, dtype=float)
        g[..., 0] = np.where(np.atleast_1d(theta)[..., 1] > 0, np.nan, 0.0)
        return g


def test_non_finite_gradient_reports_particle():
    params = np.array([[0.0, -1.0], [0.0, 1.0], [0.0, -2.0]])
    with pytest.raises(NumericalError) as info:
        hmc_propose(params, NanTarget(), 0.1, 3, momentum=np.zeros((3, 2)))
    assert info.value.particle == 1


def test_set_level_proposal_marks_failed_particle():
    params = np.array([[0.0, -1.0], [0.0, 1.0], [0.0, -2.0]])
    out = HmcProposal(0.1, 3).propose(params, NanTarget(), particle_streams(0, 3))
    assert np.all(np.isnan(out[1]))
    assert np.all(np.isfinite(out[[0, 2]]))
