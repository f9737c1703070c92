"""Dense orthographic NRSfM with a soft shape prior."""

from . import bench, core, io_formats, occlusion, prior, solver  # noqa: F401
from .core import (  # noqa: F401
    CameraPoseSet,
    MeasurementMatrix,
    PixelGridMask,
    ShapeSequence,
    center_measurements,
    complete_rotations,
    estimate_rotations,
    full_mask,
    project_to_rotation,
    rigid_init,
)
from .solver import PriorSpec, SolveResult, SolverParams, solve  # noqa: F401

__version__ = "0.1.0"
