"""One-shot geometric stylization of face meshes.

Core pieces: a numpy-backed reverse-mode autodiff engine, triangle-mesh
utilities with Loop subdivision and quadric simplification, a procedural
blendshape face model, a latent-conditioned deformation field, a soft
rasterizer, a frozen image embedder, the training loops that tie them
together, and a point-set mesh encoder for arbitrary-topology inputs.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, no_grad, grad_check

__all__ = ["Tensor", "no_grad", "grad_check", "__version__"]
