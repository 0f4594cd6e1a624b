"""Conditional-independence testing with the generalised covariance measure."""

from .core import (
    CondCovEstimate,
    Diagnostics,
    GcmResult,
    expected_cond_cov_ci,
    gcm_statistic,
    gcm_test,
    naive_resid_corr_test,
    residual_products,
)
from .data import DataSet, read_csv
from .errors import DataError, DegenerateStatisticError, GcmError, InsufficientSampleError
from .multi import (
    FeatureLift,
    MultiGcmResult,
    feature_lift_apply,
    gcm_matrix,
    mc_quantile,
    multi_gcm_test,
    residual_correlation,
)
from .regression import (
    KNN,
    KRR,
    KernelSpec,
    Linear,
    RegressionFit,
    fit_knn,
    fit_krr,
    fit_linear,
    gram_matrix,
    select_lambda,
)

__version__ = "0.1.0"
