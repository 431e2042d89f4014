"""Malware classification on raw features or VAE latent codes.

Submodules: ``numcore`` (seeded RNG, linear algebra, Student-t tails),
``dataio`` (datasets, scaling, splits, synthesis), ``vae``, ``tree_models``,
``baseline_models``, ``evaluation``, ``persist``, ``pipeline``,
``score_service`` and ``cli``.
"""

__version__ = "0.1.0"
