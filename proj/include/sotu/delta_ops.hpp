#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "sotu/sparse_delta.hpp"
#include "sotu/tensor.hpp"

namespace sotu {

/// Dense symmetric T x T matrix indexed by task position.
struct SquareMatrix {
  std::size_t n = 0;
  std::vector<double> values;

  explicit SquareMatrix(std::size_t size = 0) : n(size), values(size * size, 0.0) {}
  double& operator()(std::size_t i, std::size_t j) { return values[i * n + j]; }
  double operator()(std::size_t i, std::size_t j) const { return values[i * n + j]; }
};

/// Coordinate overlap statistics of a set of masked deltas.
struct CollisionReport {
  /// (i,j): fraction of all coordinates kept by both i and j; (i,i) is the
  /// density of delta i.
  SquareMatrix pairwise_overlap;
  /// |kept by >= 2 deltas| / |kept by >= 1 delta|, or 0 when nothing is kept.
  double multi_collision_rate = 0.0;
  std::size_t coordinates = 0;
  std::size_t kept_any = 0;
  std::size_t kept_multi = 0;
};

/// Per-tensor difference theta_ft - theta_pre.
ParamSet compute_delta(const ParamSet& theta_ft, const ParamSet& theta_pre);

/// Zeroes each coordinate independently with probability `mask_rate` and
/// keeps it with probability 1 - mask_rate. The decision for coordinate i of
/// the t-th tensor is counter_uniform(seed, t, i) < 1 - mask_rate, so the
/// mask depends only on (seed, layout). Kept zeros are still recorded.
SparseDelta mask_delta(const ParamSet& delta, double mask_rate, std::uint64_t seed,
                       const Fingerprint& base);

/// Dense reconstruction (unkept coordinates are zero).
ParamSet to_dense(const SparseDelta& delta);

/// theta_pre plus every delta, summed left to right. Coordinates kept by
/// several deltas simply add up.
ParamSet merge_deltas(const ParamSet& theta_pre, std::span<const SparseDelta> deltas);

/// Cosine similarity between flattened dense reconstructions. The diagonal
/// is exactly 1; an all-zero delta raises ZeroDelta.
SquareMatrix delta_cosine_matrix(std::span<const SparseDelta> deltas);

CollisionReport collision_report(std::span<const SparseDelta> deltas);

/// Closed-form multi-collision rate for `tasks` independent masks that each
/// keep a coordinate with probability `keep_prob`.
double binomial_multi_collision_rate(std::size_t tasks, double keep_prob);

double mean_abs_off_diagonal(const SquareMatrix& m);

/// Row and column headers are task ids 1..n.
void write_matrix_csv(const SquareMatrix& m, const std::filesystem::path& path);
/// Pairwise overlap matrix followed by multi-collision summary lines.
void write_collisions_csv(const CollisionReport& report, const std::filesystem::path& path);

}  // namespace sotu
