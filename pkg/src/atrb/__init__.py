"""Embedding-similarity training-data attribution and its counterfactual
evaluation: support search by budgeted bisection, CDF/AUC brittleness
reports, win-rate comparison, and the linear datamodeling score."""

__version__ = "0.1.0"

from .attribution import (
    CandidateFilter,
    DegenerateInputWarning,
    Method,
    RankedIndices,
    ScoreVector,
    cosine_scores,
    esvm_scores,
    gradcos_scores,
    l2_scores,
    rank,
    signed_sparse_scores,
)
from .brittleness import (
    BrittlenessReport,
    SupportQuery,
    SupportResult,
    brute_force_support,
    cdf_and_auc,
    compute_support,
    make_prefix_probe,
    support_sweep,
    win_rate,
)
from .esvm import EsvmParams, Hyperplane, decision_values, objective, train_exemplar
from .lds import (
    LdsResult,
    SubsetMask,
    evaluate_lds,
    lds_score,
    sample_subsets,
    spearman,
    subset_margins,
)
from .oracle import (
    ModKind,
    Modification,
    Model,
    TrainConfig,
    counterfactual_test,
    derive_seed,
    highest_incorrect_class,
    margin,
    mislabel_target_class,
    predict,
    softmax_loss_grad,
    train,
    unmodified_models,
)
from .store import (
    CorruptionError,
    EmbeddingSet,
    FormatError,
    StoreError,
    SyntheticConfig,
    TargetSample,
    ValidationError,
    class_centers,
    class_indices,
    generate_synthetic,
    iter_targets,
    load_embeddings,
    save_embeddings,
    target_from_row,
    unit_normalized,
)

__all__ = [name for name in dir() if not name.startswith("_")]
