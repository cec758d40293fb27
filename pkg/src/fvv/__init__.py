"""Free-viewpoint video toolkit: fit dynamic scenes with a density-grid +
tri-plane hybrid, pack them through a video codec, serve and view them."""

__version__ = "0.1.0"

from .geometry import Bbox

__all__ = ["Bbox", "__version__"]
