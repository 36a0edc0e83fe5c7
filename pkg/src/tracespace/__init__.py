"""Screen-aligned 3D trace generation: data forging, synthetic worlds and a flow-matching trace model."""

__version__ = "0.1.0"

from .core import CameraModel, GridSpec, ScreenTrace, TraceIncrements, TraceSample  # noqa: E402
from .errors import TraceSpaceError  # noqa: E402

__all__ = ["CameraModel", "GridSpec", "ScreenTrace", "TraceIncrements", "TraceSample", "TraceSpaceError",
           "__version__"]
