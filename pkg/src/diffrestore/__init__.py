"""Diffusion-based restoration of audio-like signals.

Modules: ``process`` (forward SDEs and their Gaussian kernels), ``score``
(analytic and learned scores, score matching), ``solver`` (reverse-time
samplers), ``operators`` (degradations), ``posterior`` (conditional sampling
for inverse problems), ``signal`` (STFT and WAV plumbing), ``verify``
(independent oracles) and ``cli``.
"""

from .operators import DegradationOperator
from .posterior import BlindConfig, LikelihoodConfig, blind_restore, posterior_score, project, restore, storm_restore
from .process import DiffusionProcess, kernel_moments, make_process
from .score import GaussianMixture, GmmScore, MlpScoreModel, TrainConfig, train_score
from .solver import SamplerConfig, sample

__version__ = "0.1.0"
