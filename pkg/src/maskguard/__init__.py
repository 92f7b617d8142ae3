"""Detect-then-suppress concept control for a toy text-conditioned diffusion model.

Submodules: ``tensor`` (autodiff), ``diffusion`` (base model and sampler),
``detection`` (risk masks), ``suppression`` (masked safe attention),
``preference`` (DPO training), ``scenes`` (synthetic data and oracle),
``evaluation``, ``config`` and ``cli``.
"""

__version__ = "0.1.0"
