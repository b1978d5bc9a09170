"""Chunked KV-cache reuse with attention-guided selective recomputation.

Precompute caches for shared text chunks, merge them into one contiguous
context (deduplicating the shared prefix and re-rotating keys into their
final positions), then repair cross-chunk attention by recomputing only
the tokens a small scoring model's attention flags as important.
"""

from .analysis import (
    AlignmentRow,
    AlignmentStats,
    alignment_study,
    arc_score,
    emit_alignment,
    jaccard_topk,
    kl_divergence,
    next_token_kl,
    topk_indices,
)
from .bench import (
    BenchCase,
    BenchReport,
    BenchRow,
    SuiteConfig,
    TASK_KINDS,
    emit_report,
    gen_niah,
    run_suite,
    scaled_chunking,
)
from .flops import (
    FlopReport,
    PipelineTrace,
    STAGES,
    count_flops,
    event_macs,
    extend_macs,
    full_prefill_macs,
)
from .kv_store import (
    BadMagicError,
    CacheConsistencyError,
    CacheFormatError,
    ChecksumError,
    ChunkCache,
    MergeLayout,
    MergedCache,
    VersionMismatchError,
    compute_positions,
    load_cache,
    merge_caches,
    save_cache,
)
from .model import (
    AttentionMaps,
    LayerCache,
    ManifestVersionError,
    MissingTensorError,
    Model,
    ModelConfig,
    PrefillResult,
    TensorShapeError,
    WeightFormatError,
    decode_step,
    extend_cache,
    init_model,
    load_weights,
    param_count,
    peek_forward,
    prefill_chunk,
    prefill_full,
    save_weights,
    selective_forward,
)
from .pipeline import (
    ApeConfig,
    PrefillOutcome,
    STRATEGIES,
    ape_prefill,
    cacheblend_prefill,
    cacheclip_prefill,
    direct_reuse_prefill,
    full_attention_prefill,
    reuse_context_ids,
)
from .presets import (
    aux_preset_config,
    aux_preset_model,
    aux_preset_tokenizer,
    primary_preset_config,
    primary_preset_model,
    primary_preset_tokenizer,
)
from .selector import (
    AuxSelection,
    ImportanceScores,
    SelectionConfig,
    SelectionPlan,
    WindowRecord,
    aux_score_tokens,
    cacheblend_select,
    map_selection,
    random_select,
    select_tokens,
    selection_budget,
    top_candidates,
)
from .tensor_core import (
    DimensionError,
    RopeParams,
    causal_attention,
    rms_norm,
    rope_apply,
    softmax_rows,
    visible_pairs,
)
from .tokenizers import (
    AUX_TOKENIZER_ID,
    PRIMARY_TOKENIZER_ID,
    AlignmentMap,
    GreedyTokenizer,
    SpanCoverageError,
    TokenSpan,
    UnknownCharacterError,
    VocabFormatError,
    align_spans,
    aux_toy_vocab,
    builtin_tokenizer,
    from_vocab_file,
    load_vocab,
    primary_toy_vocab,
    save_vocab,
)

__version__ = "0.1.0"
