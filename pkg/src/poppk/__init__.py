"""Population pharmacokinetics engine.

A nonlinear mixed-effects toolkit around a one-compartment
first-order-absorption model: event-record dataset handling, FOCE-I
estimation with covariate selection, goodness-of-fit diagnostics,
population simulation, bootstrap and visual predictive checks, per-subject
exposure metrics, and the two-group comparisons used in small PK studies.
"""

from .dataset import (
    CovariateSummary,
    DatasetError,
    EventRecord,
    StudyDataset,
    Subject,
    load_dataset,
    parse_dataset,
    serialize_dataset,
    summarize_covariates,
    write_dataset,
)
from .model import (
    CovariateEffect,
    ExposureMetrics,
    IndividualParams,
    OmegaMatrix,
    SigmaParams,
    ThetaVector,
    WEIGHT_ON_CL,
    concentration,
    error_sd,
    exposure_metrics,
    individual_params,
)
from .estimate import (
    EvaluationFailure,
    FitResult,
    FitSettings,
    ModelSpec,
    ParameterSet,
    SearchResult,
    covariate_search,
    estimate_ebe,
    fit,
    foce_ofv,
    inner_objective,
    standard_errors,
)
from .diagnostics import GofRow, cwres, predictions, shrinkage
from .simulate import StudyDesign, apply_lloq, simulate_dataset, simulate_replicate
from .validate import BootstrapSummary, VpcSummary, bootstrap, vpc
from .stats import (
    ContingencyTable2x2,
    compare_groups,
    fisher_exact,
    rank_sum_test,
    welch_t_test,
)
from .exposures import subject_exposures, exposure_table

__version__ = "0.1.0"
