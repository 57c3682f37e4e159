"""Align X-ray spectral embeddings with scientific-text embeddings.

The package trains two projection heads with an InfoNCE objective and
evaluates the shared space through cross-modal retrieval, k-NN regression
of physical variables and isolation-forest outlier scoring.
"""

__version__ = "0.1.0"
