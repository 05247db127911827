"""Sparse masked task deltas merged into one backbone, with NCM evaluation."""

from ._sotu import (
    SotuError,
    SparseDelta,
    binomial_multi_collision_rate,
    cli,
    compute_delta,
    compute_metrics,
    config_keys,
    default_config,
    delta_cosine_matrix,
    fingerprint,
    load_paramset,
    load_sparse_delta,
    mask_delta,
    merge_deltas,
    multi_collision_rate,
    ncm_predict,
    run_experiment,
    save_paramset,
)

__all__ = [
    "SotuError",
    "SparseDelta",
    "binomial_multi_collision_rate",
    "cli",
    "compute_delta",
    "compute_metrics",
    "config_keys",
    "default_config",
    "delta_cosine_matrix",
    "fingerprint",
    "load_paramset",
    "load_sparse_delta",
    "mask_delta",
    "merge_deltas",
    "multi_collision_rate",
    "ncm_predict",
    "run_experiment",
    "save_paramset",
]
