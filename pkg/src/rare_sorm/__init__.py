"""Sharp tail-probability estimates for small-noise SDEs.

The pipeline: find the instanton (most likely noise realization reaching an
outcome), extract spectra of its matrix-free second variation, assemble the
prefactor from a regularized determinant and trace, and compare against
brute-force Monte Carlo.
"""

from .core import (Convention, DimensionError, DivergenceError, ModelError, NoiseVector,
                   Observable, SdeSystem, StatePath, TimeGrid, inner_product,
                   validate_derivatives)
from .instanton import (InstantonError, InstantonSolution, OptimizerConfig, find_instanton,
                        find_instanton_mgf, rate_function_scan)
from .models import build_model
from .montecarlo import McConfig, SamplingError, compare_sweep, estimate_tail, wilson_interval
from .operators import (atilde_operator, compose_projected, hessian_operator, linearize,
                        project_perp, regularized_operator)
from .prefactor import (NondegeneracyError, PrefactorBreakdown, carleman_fredholm_det,
                        compute_mgf_prefactor, compute_prefactor, fredholm_det, hutchinson_trace,
                        log_tail_probability, naive_discrete_prefactor, tail_prefactor_via_mgf,
                        tail_probability, trace_by_eigensum)
from .propagation import gradient, sample_path, solve_forward
from .riccati import riccati_prefactor
from .spectrum import SpectrumResult, dense_spectrum, leading_eigenvalues, matvec_scaling_report

__version__ = "0.1.0"
