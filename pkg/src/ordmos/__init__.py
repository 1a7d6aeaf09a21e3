"""MOS prediction on precomputed audio/text embeddings.

Subpackages: ``tensor`` (autodiff core), ``labels`` (ordinal bin targets),
``network`` (dual-branch model), ``training`` (losses + optimizer + loop),
``metrics`` (rank correlations), ``dataio`` (file formats, splits, synthetic
data), ``ensemble`` (Ridge stacking), ``cli`` (command-line surface).
"""

__version__ = "0.1.0"
