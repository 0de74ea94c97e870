"""Trajectory-controllable image-to-video diffusion at desk scale."""
from .errors import (ClientError, EmptyMask, InputError, InvalidSparsity, NumericsError, OutOfBounds,
                     PaletteExhausted, ShapeError, StepError, TrajVidError, UndefinedScore,
                     ValidationError, WeightsError)

__version__ = "0.1.0"
