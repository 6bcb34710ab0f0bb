"""Classifier-based calibration diagnostics for approximate Bayesian inference.

Workflow: generate or load a simulation table (S runs of prior draw theta,
synthetic data y, and M approximate posterior draws), map each run to labeled
classification examples, train a classifier, and read off a divergence
estimate with bootstrap CI plus an exact within-batch permutation p-value.
"""

__version__ = "0.1.0"
