"""Free additive convolution by subordination, and outliers of spiked models."""

from .errors import (
    BoundaryError,
    ConfigError,
    ConvergenceError,
    DomainError,
    FamilyError,
    FreeConvError,
    InversionError,
    PoleError,
    SingularError,
    SizeError,
)
from .measure import (
    SpectralMeasure,
    SupportSet,
    cauchy_derivative,
    cauchy_transform,
    h_derivative,
    h_transform,
    quantile_sample,
    r_transform,
    reciprocal_cauchy,
    support,
)
from .outlier import OutlierPrediction, SpikeSet, outliers_infdiv, outliers_point_mass, solve_outliers
from .rmt import build_model, det_m_diagnostic, haar_unitary, hermitian_eigenvalues, run_verification
from .subordination import (
    convolution_cauchy,
    convolution_density,
    convolution_support,
    denjoy_wolff,
    omega_boundary,
    subordination_grid,
)

__version__ = "0.1.0"
