"""Gaze-guided attribute attention for zero-shot image classification.

The package trains a small convolutional encoder jointly with an
attribute-query attention head, supervises the attention with class
attribute vectors (and optionally with human-gaze heatmaps matched by a
Hungarian assignment), and classifies in a scaled-cosine metric space
with calibrated stacking for the generalized setting. All gradients flow
through the in-package reverse-mode autodiff engine.
"""

__version__ = "0.1.0"
