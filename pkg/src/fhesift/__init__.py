"""Leveled-ciphertext simulation, deferred comparison graphs and a
branchless keypoint pipeline built on them."""

from .ckks_sim import Ciphertext, CkksContext, SecretKey, SimParams, gather
from .deferred_graph import (
    CipherEvaluator,
    Comparison,
    Expr,
    GraphBuilder,
    LoweredProgram,
    PlainEvaluator,
    Rational,
    ResidualFunction,
    SqrtRequest,
    balanced_fold,
    format_expr,
    format_normal_form,
    lower,
)
from .errors import (
    ConfigError,
    DeferralUnsupported,
    DepthExhausted,
    EmptyInput,
    FheSiftError,
    MissingAssignment,
    PgmError,
    SignUnresolvable,
)
from .kernels import (
    bin_mask,
    bin_mask_tan,
    convolve2d,
    gaussian_kernel1d,
    max2,
    running_max,
    vec_argmax_onehot,
    vec_max,
    weighted_histogram,
)
from .protocol import (
    Client,
    DecoyPolicy,
    ProtocolRun,
    RoundTrace,
    dump_package,
    parse_package,
    run_deferred,
    run_interactive,
    serialize_package,
)
from .sift_pipeline import (
    Keypoint,
    PipelineConfig,
    PipelineResult,
    RunReport,
    compare_keypoints,
    keypoints_from_text,
    keypoints_to_text,
    run_pipeline,
)

__all__ = [
    "Ciphertext",
    "CkksContext",
    "SecretKey",
    "SimParams",
    "gather",
    "CipherEvaluator",
    "Comparison",
    "Expr",
    "GraphBuilder",
    "LoweredProgram",
    "PlainEvaluator",
    "Rational",
    "ResidualFunction",
    "SqrtRequest",
    "balanced_fold",
    "format_expr",
    "format_normal_form",
    "lower",
    "ConfigError",
    "DeferralUnsupported",
    "DepthExhausted",
    "EmptyInput",
    "FheSiftError",
    "MissingAssignment",
    "PgmError",
    "SignUnresolvable",
    "bin_mask",
    "bin_mask_tan",
    "convolve2d",
    "gaussian_kernel1d",
    "max2",
    "running_max",
    "vec_argmax_onehot",
    "vec_max",
    "weighted_histogram",
    "Client",
    "DecoyPolicy",
    "ProtocolRun",
    "RoundTrace",
    "dump_package",
    "parse_package",
    "run_deferred",
    "run_interactive",
    "serialize_package",
    "Keypoint",
    "PipelineConfig",
    "PipelineResult",
    "RunReport",
    "compare_keypoints",
    "keypoints_from_text",
    "keypoints_to_text",
    "run_pipeline",
]

__version__ = "0.1.0"
