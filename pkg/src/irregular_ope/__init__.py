"""Off-policy evaluation with irregular, outcome-dependent observation times."""

from .core import (
    CallbackPolicy,
    ContractError,
    Dataset,
    DomainError,
    LinearPolicy,
    PolicySpec,
    ReferenceDistribution,
    TabularPolicy,
    Trajectory,
    policy_prob,
    sample_reference,
    validate_trajectory,
)
from .basis import BasisSpec, FeatureMap, zeta_reference
from .io import FormatError, read_trajectories, write_trajectories
from .ope import (
    Problem,
    QModel,
    ValueEstimate,
    estimate,
    estimate_modulated,
    estimate_naive,
    estimate_standard,
    evaluate_all,
    value_with_ci,
)
from .renewal import CovariateBuilder, RenewalFit, fit_renewal, fit_renewal_arrays
from .simulate import ScenarioSpec, gen_dataset, monte_carlo_truth, scenario
