"""Desk-scale mixture-of-experts lab: gating, capacity dispatch, balance losses,
upcycling, training and a pipeline/mesh planner, all on numpy."""

__version__ = "0.1.0"

from .errors import (
    CheckpointFormatError,
    ConsistencyError,
    DimensionError,
    KindError,
    MoELabError,
    ParameterError,
    TrainingAborted,
)

__all__ = ["CheckpointFormatError", "ConsistencyError", "DimensionError", "KindError", "MoELabError",
           "ParameterError", "TrainingAborted", "__version__"]
