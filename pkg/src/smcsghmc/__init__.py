"""Sequential Monte Carlo with stochastic-gradient HMC proposals for Bayesian neural networks."""

from .core import ParticleSet, effective_sample_size, normalize_log_weights, rng_stream
from .model import GaussianPrior, MiniBatch, MlpModel
from .proposal import HmcProposal, SghmcProposal, hmc_propose, sghmc_propose
from .sampler import PretrainedInit, PriorInit, SampleStore, SamplerConfig, run
from .targets import GmmTarget, TemperedPosterior

__version__ = "0.1.0"
