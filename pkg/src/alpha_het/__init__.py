"""Heterogeneity adjustment for pooled multi-batch data.

Each batch is modelled as ``X = Lambda F' + U``.  Batch-specific factors
are removed by PCA or, when per-variable covariates explain the loadings,
by Projected-PCA; the residuals are pooled into one covariance estimate and
a sparse precision matrix is estimated with CLIME.
"""

from .aggregation import AggregateEstimate, aggregate_sigma
from .clime import ClimeSolution, EdgeSet, clime_column, clime_solve, extract_edges, select_lambda
from .data_model import BatchPanel, Dataset, FactorFit, load_manifest, load_matrix, save_matrix
from .errors import AlphaError, MatrixFileError, NumericalError, ValidationError
from .pca import fit_pca
from .pipeline import PipelineConfig, run_alpha
from .ppca import decompose_loadings, fit_ppca
from .selection import SelectionConfig, assign_regimes, bh_fdr, estimate_k, spec_test
from .sieve import BasisSpec, build_basis, build_projection, projection_from_covariates
from .synthetic import SyntheticSpec, generate, run_benchmark

__version__ = "0.1.0"
