"""Feature-space drift compensation for exemplar-free class-incremental
learning: transition-operator estimation, Gaussian bank propagation, and
classifier refinement on synthetic features."""

from .classifier import (
    LinearClassifier,
    RefineConfig,
    evaluate,
    expand,
    refine,
    softmax_probs,
    train_ce,
)
from .errors import (
    ConfigError,
    CorruptionError,
    DataError,
    DriftCompError,
    FormatError,
    NumericalError,
    ShapeError,
)
from .features import FeatureMatrix, l2_normalize, load_dump, write_dump
from .gaussians import (
    ClassGaussian,
    GaussianBank,
    estimate_gaussian,
    linear_pushforward,
    reestimate,
    sample,
)
from .harness import RunConfig, RunReport, compare, joint_reference, run
from .linear_op import LinearOperator, fit_ridge, fit_with_ade, reweight_identity
from .simulate import (
    DriftOperator,
    SimConfig,
    Stream,
    TaskRecord,
    export_stream,
    gen_stream,
    load_stream,
    oracle_compensate,
    preset,
)
from .weaknl import (
    Mlp,
    OperatorTrainConfig,
    WeakNonlinearOperator,
    forward,
    init_weaknl,
    mc_compensate,
    train_mlpdc,
    train_weaknl,
)

__version__ = "0.1.0"
