"""On-robot training-data sampling with cloud feedback, simulated end to end."""
from ._kernels import BACKEND

__all__ = ["BACKEND", "__version__"]

__version__ = "0.1.0"
