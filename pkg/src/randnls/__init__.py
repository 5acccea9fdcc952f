"""Randomized trace estimation with tight sample-size bounds, and a
stochastic Gauss-Newton solver for many-experiment inverse problems."""

from .errors import ConfigurationError, DomainError, InterfaceError, NumericalError
from .special_functions import GammaParams, reg_inc_gamma_lower, scaled_chi2_cdf, gamma_cdf
from .sample_size_bounds import ToleranceBudget, SampleSizeResult, sufficient, necessary
from .trace_estimation import ImplicitSpsdOperator, estimate_trace, empirical_coverage
from .extremal_gamma import crossing_point, extremal_envelope
from .stochastic_nls import Dataset, SolverConfig, SolveReport, solve

__version__ = "0.1.0"
