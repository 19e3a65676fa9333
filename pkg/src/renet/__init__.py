"""Region ensemble network for 3D hand pose regression from single depth images."""
from renet.kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
