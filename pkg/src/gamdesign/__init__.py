"""Bayesian optimal design for generalized additive (mixed) models.

Pipeline: fit pilot data with a Laplace approximation, carry the posterior
forward as a design prior, score candidate designs by the expected
Kullback-Leibler divergence from prior to posterior, and search the design
space by (approximate) coordinate exchange.
"""

__version__ = "0.1.0"
