"""Late-interaction text-video retrieval over precomputed token embeddings."""

from .errors import (
    AllMasked,
    AssignmentMismatch,
    ChecksumError,
    ConfigError,
    DegenerateColumn,
    DegenerateLevel,
    DimMismatch,
    FormatError,
    LateInteractError,
    MissingTruth,
    NonSquare,
    ShapeMismatch,
    ZeroNormRow,
)
from .index import (
    FlopReport,
    IndexShard,
    RetrievalResult,
    bench,
    bench_suite,
    build_index,
    flop_count,
    flop_ratio,
    load_shard,
    query_topk,
    save_shard,
)
from .interaction import (
    HiLevels,
    MlpScorerParams,
    ScoreMatrix,
    ScoringModel,
    WeightHead,
    XtiParams,
    score_dp,
    score_hi,
    score_mlp,
    score_path,
    score_ti_batch,
    score_wti_batch,
    score_xti,
    token_weights,
)
from .losses import LossConfig, cdcr_sequential, cdcr_single, fd_check, grad_wti_heads, info_nce, total_loss
from .metrics import Metrics, evaluate
from .numerics import TokenMatrix, batch_standardize_columns, l2_normalize_rows, masked_softmax

__version__ = "0.1.0"
