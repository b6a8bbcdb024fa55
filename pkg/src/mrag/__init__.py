"""mrag: retrieval-augmented image captioning over a closed-form linear map."""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
