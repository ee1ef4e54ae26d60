"""Residual soft actor-critic with a learned dynamics context.

Adapts a frozen offline policy online when the environment's physical
parameters shift between episodes: a context encoder summarizes the
recent transition window into a small latent, and a residual SAC agent
conditioned on that latent corrects the frozen policy's actions.
"""

__version__ = "0.1.0"
