"""Python bindings for the seqrec C++ core."""

from ._seqrec import (
    TRACE_HEADER,
    CompatibilityError,
    ConfigError,
    ContractError,
    InfeasibleSamplingError,
    IoError,
    Model,
    ParseError,
    __version__,
    augment,
    cql_penalty,
    cross_entropy,
    evaluate,
    generate_synthetic,
    hr_at_k,
    info_nce,
    load_sessions,
    ndcg_at_k,
    normalize_config,
    reward_at_k,
    sample_negatives,
    td_q_loss,
    top_k,
    train,
)

__all__ = [
    "TRACE_HEADER",
    "CompatibilityError",
    "ConfigError",
    "ContractError",
    "InfeasibleSamplingError",
    "IoError",
    "Model",
    "ParseError",
    "__version__",
    "augment",
    "cql_penalty",
    "cross_entropy",
    "evaluate",
    "generate_synthetic",
    "hr_at_k",
    "info_nce",
    "load_sessions",
    "ndcg_at_k",
    "normalize_config",
    "reward_at_k",
    "sample_negatives",
    "td_q_loss",
    "top_k",
    "train",
]
