"""Semi-supervised structured variational autoencoders.

Declarative graphical-model specs (some variables interpretable and partially
supervised, others free-form latents) are compiled into stochastic
computation graphs and trained end-to-end with a generalized semi-supervised
variational objective based on self-normalized importance sampling.
"""

from . import data, dist, model, objective, oracle, tensor, train  # noqa: F401

__version__ = "0.1.0"
