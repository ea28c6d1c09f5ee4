"""Energy, BN-sensitivity and patch-entropy filtering of candidate images."""
from genq.filter.pipeline import (CSV_HEADER, FilterReport, ScoredSample, bn_filter,
                                  energy_filter, keep_count, patch_filter, read_manifest,
                                  run_pipeline, score_energy)
from genq.filter.scores import (PatchEntropy, bn_distance, bn_observe, bn_reference,
                                bn_sensitivities, bn_sensitivity, energy_score, energy_scores,
                                patch_entropy, patch_features, patch_similarity, scott_bandwidth)

__all__ = [
    "CSV_HEADER", "FilterReport", "PatchEntropy", "ScoredSample", "bn_distance", "bn_filter",
    "bn_observe", "bn_reference", "bn_sensitivities", "bn_sensitivity", "energy_filter",
    "energy_score", "energy_scores", "keep_count", "patch_entropy", "patch_features",
    "patch_filter", "patch_similarity", "read_manifest", "run_pipeline", "score_energy",
    "scott_bandwidth",
]
