"""Feature-distribution alignment for robust text classifiers, at desk scale.

Modules: ``diffcore`` (reverse-mode autodiff), ``distances`` (MMD, CORAL,
Sinkhorn divergence, exact Wasserstein), ``textmodel`` (embeddings and the
pooled classifier), ``attack`` (word-substitution attacks), ``training``
(offline adversarial sets and objectives), ``evaluation`` (robustness
metrics) and ``cli``.
"""
__version__ = "0.1.0"
