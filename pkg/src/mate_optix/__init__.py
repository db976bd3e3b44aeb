"""mate-optix: 1D scattering model and coupling-rate toolkit for membrane cavities.

A membrane inside a two-mirror cavity splits it into a pair of coupled
subcavities. This package computes the resulting resonance structure,
dispersive and dissipative optomechanical couplings for membrane placements
at the cavity center and near an end mirror, full reflection spectra from
composed transfer matrices, transmission of tilted cavities probed by a
Gaussian beam, and the fitting pipelines that extract membrane and loss
parameters from measured spectra.
"""

from .constants import C, HBAR
from .core import (
    CavityGeometry,
    MechanicalMode,
    MembraneCoefficients,
    MembraneSpec,
    Mirror,
    fsr,
    slab_coefficients,
    thin_membrane_coefficients,
    zero_point_motion,
)
from .errors import (
    BranchDiscontinuityError,
    DegenerateConfigurationError,
    FitFailedError,
    ModelValidityWarning,
    RootNotFoundError,
)

__all__ = [
    "C",
    "HBAR",
    "CavityGeometry",
    "MechanicalMode",
    "MembraneCoefficients",
    "MembraneSpec",
    "Mirror",
    "fsr",
    "slab_coefficients",
    "thin_membrane_coefficients",
    "zero_point_motion",
    "BranchDiscontinuityError",
    "DegenerateConfigurationError",
    "FitFailedError",
    "ModelValidityWarning",
    "RootNotFoundError",
]

__version__ = "0.1.0"
