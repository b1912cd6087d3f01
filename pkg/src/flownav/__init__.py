"""Flow prediction, flow-aware planning and flow-compensated control for
magnetic micro-robots in channels described by a pixel mask."""

from .errors import FlownavError
from .grid import ChannelMask, FlowField, FluidProps, ObservationSet

__version__ = "0.1.0"

__all__ = ["ChannelMask", "FlowField", "FluidProps", "FlownavError", "ObservationSet", "__version__"]
