"""Predict-update adapters for source-conditioned editing on a frozen diffusion transformer.

Pure numpy: own tensor/autodiff core, a small video DiT, rectified-flow
training and sampling, a procedural edit-pair generator, and pixel metrics.
"""

__version__ = "0.1.0"
