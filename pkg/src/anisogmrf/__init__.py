"""GMRF approximations of 3D SPDE random fields with spatially varying anisotropy."""

from .grid import GridSpec
from .splines import Basis1D, TensorBasis, SplineField
from .anisotropy import ModelKind, AnisotropyModel
from .errors import (
    AnisoError,
    GridError,
    DomainError,
    RankDeficientError,
    NotSPDError,
    InfeasiblePoint,
    ConfigError,
)

__version__ = "0.1.0"
