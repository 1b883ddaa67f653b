"""Two-level linear mixed models for complex-survey data.

Point estimation by design-weighted pairwise composite likelihood, with
naive maximum likelihood and stagewise pseudolikelihood as reference
estimators, sandwich and rescaling-bootstrap variance estimation, and a
simulation laboratory for design-effect experiments.
"""

from .boxmin import BoxProblem, BoxminError, MinimizeResult, minimize
from .design import (
    CheckedDesign,
    DesignError,
    SurveyDesign,
    hajek_pair_approx,
    pair_probability_srs,
    validate_design,
)
from .data import ModelFrame, ModelFrameError, build_groups, build_model_frame
from .formula import FormulaError, ModelFormula, RandomGroup, parse_formula
from .inference import (
    CombinedResult,
    ReplicateSet,
    SandwichPieces,
    VarianceError,
    bootstrap_fit,
    pair_score_beta,
    pair_scores_beta,
    rubin_combine,
    sandwich_beta,
)
from .kernels import (
    GroupData,
    GroupKernel,
    SingularPairError,
    ThetaParam,
    ThetaStructure,
    group_xi,
    pair_kernel,
    pair_xi,
    theta_to_V,
)
from .pairwise import (
    CollinearityError,
    DegenerateFitError,
    FitError,
    FitOptions,
    FitResult,
    PairSet,
    enumerate_pairs,
    fit_pairwise,
    fit_pairwise_from_pairs,
    gls_beta,
    pairwise_diagnostics,
    profile_deviance,
    profile_sigma2,
)
from .reference import (
    WeightScaling,
    cluster_loglik_weighted,
    fit_ml,
    fit_stagewise,
    scale_weights,
)
from .simlab import (
    MetricsTable,
    Population,
    SimScenario,
    StudyResult,
    draw_sample,
    generate_population,
    preset,
    run_study,
    scaled_mad,
)

__version__ = "0.1.0"
