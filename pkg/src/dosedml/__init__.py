"""Dose-response causal estimation: residual regression, treatment
coarsening, and doubly robust bin-level counterfactual means, plus the
simulation laboratory used to quantify the residual regression's bias
under nonlinear dose-response curves."""

from .coarsen import (
    BinPartition,
    CounterfactualMeans,
    EstimateReport,
    aipw_acd,
    aipw_aie,
    aipw_bin_means,
    aipw_pipeline,
    choose_k,
    coarsened_rorr,
    coarsened_rorr_binary_plim,
    coarsened_rorr_pipeline,
    make_partition,
)
from .dataset import (
    ColumnSchema,
    FoldAssignment,
    ObservationTable,
    StandardizationSpec,
    destandardize,
    load_csv,
    make_folds,
    make_table,
    standardize,
    write_csv,
)
from .diagnostics import (
    BalanceReport,
    OverlapReport,
    balance_report,
    dose_response_export,
    overlap_report,
)
from .nuisance import (
    LearnerSpec,
    NuisanceFit,
    clip_probabilities,
    cross_fit,
    fit_insample,
    fit_multiclass,
    fit_regression,
)
from .rorr import (
    DiscreteStrataModel,
    RorrEstimate,
    binary_bias,
    binary_rorr_plim,
    ols_slope,
    residualize,
    rorr_pipeline,
)
from .simlab import (
    BiasDecomposition,
    PoissonCategoricalDGP,
    acd_analytic,
    aie_analytic,
    bias_decomposition_mc,
    bin_conditional_truth,
    canonical_dgp,
    midpoint_lemma_check,
    rorr_plim_mc,
    sample_dgp,
    tstar,
)

__version__ = "0.1.0"
