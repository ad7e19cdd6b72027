"""Nonmyopic Bayesian optimization of time-dependent oracles at a fixed horizon.

A Gaussian process over (action, time) is used to choose one decision per
scheduled time. Decisions are made either by classical myopic rules or by
a two-step lookahead that values how an observation now improves the
decision at the horizon.
"""

from .acquisition import (
    AcquisitionSpec,
    FantasyBatch,
    knowledge_gradient,
    myopic_acquisition,
    two_step_acquisition_mc,
    two_step_gradient_mc,
    two_step_ley,
    two_step_ley_gradient_dense,
)
from .engine import (
    BOConfig,
    ProtocolError,
    RunTrace,
    Schedule,
    Session,
    StepRecord,
    run_myopic,
    run_recursive_two_step,
)
from .gp import (
    Dataset,
    FactorizationError,
    FitWarning,
    FittedGP,
    Hyperparameters,
    PosteriorMoments,
    condition,
    fit_hyperparameters,
    kernel_eval,
    log_marginal_likelihood,
    posterior,
    posterior_input_gradient,
    sample_posterior,
)
from .harness import ExperimentConfig, ExperimentResult, emit_results, run_experiment
from .optimize import (
    OneShotState,
    OptimizerConfig,
    inner_value_maximize,
    multistart_maximize,
    one_shot_maximize,
    subgradient_probe,
)
from .testbed import (
    GroundTruth,
    OracleError,
    OracleSpec,
    evaluate_oracle,
    external_oracle,
    true_maximizer,
    true_value,
)
from .values import (
    TargetContext,
    ValueFunctionSpec,
    evaluate_value,
    resolve_target,
    value_gradient,
)

__version__ = "0.1.0"
