"""Candidate-answer selection engine.

Scores verified candidate answers by a forward-only student-centric
learning-cost proxy, stratifies and samples them per round, and validates
the proxy against an exact last-layer gradient oracle on a built-in tiny
language model.
"""

from .analysis import (
    AlignmentAudit,
    BlockStats,
    CorollaryOutcome,
    MeanFieldAudit,
    RankCorrelationReport,
    alignment_audit,
    blockwise_stats,
    corollary_ranking_test,
    cost_instrumentation,
    mean_field_audit,
    pearson,
    proxy_vs_oracle,
    spearman,
    zero_dispersion_pool,
)
from .errors import (
    ConfigError,
    DegenerateRankingError,
    OracleError,
    ScasError,
    TraceFormatError,
)
from .oracle import (
    BlockEnergies,
    BoundAudit,
    ForwardResult,
    RetainedEnergy,
    SynthParams,
    TinyLM,
    TokenPool,
    forward,
    grad_norm_blocks,
    grad_norm_matrix,
    grad_norm_pairwise,
    head_gradient,
    load_model,
    normalized_retained,
    residual_nll_audit,
    save_model,
    synth_pools,
    trace_from_forward,
    train_step,
)
from .sampler import (
    GroupPartition,
    SelectedSet,
    SelectionConfig,
    min_score_select,
    partition_boundaries,
    partition_groups,
    question_rng,
    run_rounds,
    sample_lowest,
    select_round,
    sort_candidates,
)
from .score import (
    ScoreBreakdown,
    ScoreConfig,
    block_aggregates,
    score_emb_only,
    score_full,
    score_nll_only,
    score_pool,
    score_token_nll,
)
from .trace import (
    CandidatePool,
    SequenceTrace,
    SpanLayout,
    TokenRecord,
    Violation,
    normalize_hidden,
    parse_pools,
    serialize_pools,
    validate_pool,
)

__version__ = "0.1.0"
