"""Dithered lattice quantization for latent-variable compression models."""

from .errors import (
    CheckpointError,
    ContractViolation,
    EnumerationBudgetExceeded,
    IdxFormatError,
    OutOfSupportError,
    TrainingDiverged,
)
from .lattice import (
    LATTICE_NAMES,
    CellConstants,
    LatticeBasis,
    LatticePoint,
    ScaledProductLattice,
    brute_force_nearest,
    cell_constants,
    lattice_basis,
    matched_delta,
    nearest_point,
    quantize,
    sample_dither,
    theta_coefficients,
)
from .priors import (
    GaussianProxyParams,
    LaplaceZModel,
    ThetaPrior,
    gaussian_kl_analytic,
    gaussian_kl_sample,
    laplace_pmf_log,
    laplace_rep_cost,
    theta_prior_logpmf,
)

__version__ = "0.1.0"
