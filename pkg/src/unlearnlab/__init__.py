"""Desk-scale laboratory for jointly fine-tuning and unlearning pruned
conditional diffusion models, with analytic oracles for every claim."""

__version__ = "0.1.0"
