#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "sotu/tensor.hpp"

namespace sotu {

/// Single-head softmax attention block with an additive weight perturbation.
/// x is [n,d]; each projection and its perturbation is [d,dk].
struct AttentionInstance {
  DenseTensor x;
  DenseTensor w_q, w_k, w_v;
  DenseTensor dw_q, dw_k, dw_v;

  std::size_t tokens() const { return x.shape()[0]; }
  void validate() const;
};

/// (X Wq)(X Wk)^T / sqrt(dk).
DenseTensor attention_scores(const DenseTensor& x, const DenseTensor& w_q, const DenseTensor& w_k);
/// Max-subtracted softmax over each row.
DenseTensor row_softmax(const DenseTensor& scores);

DenseTensor attention_map(const AttentionInstance& inst);
/// Attention map with W + dW.
DenseTensor perturbed_attention_map(const AttentionInstance& inst);

struct BoundReport {
  double delta_min = 0.0;
  double delta_max = 0.0;
  /// Largest excursion of a perturbed entry outside
  /// [(1+delta_min)/(1+delta_max) A, (1+delta_max)/(1+delta_min) A], relative to A.
  double max_violation = 0.0;
};

/// 1 + delta_ij = exp(s'_ij - s_ij) for unperturbed scores s and perturbed
/// scores s'; delta_min/delta_max are the extremes over all entries. The
/// perturbed map is evaluated directly from s', not through the factors.
BoundReport perturbation_bound_check(const AttentionInstance& inst);
/// Same check on precomputed [n,n] score matrices.
BoundReport bound_check_from_scores(const DenseTensor& scores, const DenseTensor& perturbed);

/// Random instance whose perturbation is shrunk (halving) until every score
/// moves by at most `max_score_change`.
AttentionInstance random_attention_instance(std::size_t n, std::size_t d, std::size_t dk,
                                            double max_score_change, std::uint64_t seed);

/// Fine-tuned attention weights together with the base they were tuned from.
struct MaskProbe {
  DenseTensor x;
  DenseTensor w_q, w_k, w_v;
  DenseTensor base_q, base_k, base_v;
};

MaskProbe random_mask_probe(std::size_t n, std::size_t d, std::size_t dk, double delta_scale,
                            std::uint64_t seed);

struct StabilitySummary {
  double mask_rate = 0.0;
  std::vector<double> max_rel_change;  // one per trial
  double mean = 0.0;
  double max = 0.0;
};

/// Each trial masks the fine-tuning delta W - base coordinate-wise (zeroed
/// with probability `mask_rate`, reverting that coordinate to the base) and
/// records max_ij |A'_ij / A_ij - 1| against the fine-tuned map A.
StabilitySummary mask_stability_report(const MaskProbe& probe, double mask_rate,
                                       std::uint64_t seed, std::size_t trials);

/// Columns p,trial,max_rel_change; each rate ends with `mean` and `max` rows.
void write_stability_csv(std::span<const StabilitySummary> reports,
                         const std::filesystem::path& path);

}  // namespace sotu
