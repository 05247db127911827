#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "sotu/dataset.hpp"
#include "sotu/tensor.hpp"
#include "sotu/trainer.hpp"

namespace sotu {

enum class Nonlinearity : std::uint8_t { relu = 0, none = 1 };

Nonlinearity parse_nonlinearity(std::string_view s);
const char* to_string(Nonlinearity n) noexcept;

struct ProjectionSpec {
  std::size_t out_dim = 64;
  std::uint64_t seed = 0;
  Nonlinearity nonlinearity = Nonlinearity::relu;

  friend bool operator==(const ProjectionSpec&, const ProjectionSpec&) = default;
};

/// Random feature expansion: x -> nonlinearity(P x), P ~ N(0,1) i.i.d.
struct Projection {
  ProjectionSpec spec;
  DenseTensor matrix;  // [out_dim, in_dim]
};

/// out_dim x in_dim matrix of standard-normal draws from Rng(spec.seed).
DenseTensor make_projection(const ProjectionSpec& spec, std::size_t in_dim);
Projection build_projection(const ProjectionSpec& spec, std::size_t in_dim);

std::vector<double> project(const Projection& proj, std::span<const double> embedding);

/// Backbone embedding, optionally passed through the projection.
std::vector<double> feature(const ParamSet& backbone, Activation act, std::span<const double> x,
                            const Projection* proj = nullptr);
/// Row-major n x feature_dim features; row i equals feature(rows[i]) bit for bit.
std::vector<double> feature_batch(const ParamSet& backbone, Activation act,
                                  std::span<const double> rows, std::size_t n,
                                  const Projection* proj = nullptr);

/// Per-class mean features. Classes accumulate across tasks; stored
/// prototypes are never modified once added.
class PrototypeSet {
 public:
  std::size_t size() const noexcept { return class_ids_.size(); }
  bool empty() const noexcept { return class_ids_.empty(); }
  std::size_t feature_dim() const noexcept { return feature_dim_; }
  const std::vector<ClassId>& class_ids() const noexcept { return class_ids_; }
  std::span<const double> prototype(std::size_t i) const {
    return std::span<const double>(prototypes_).subspan(i * feature_dim_, feature_dim_);
  }
  const std::optional<ProjectionSpec>& projection() const noexcept { return projection_; }
  bool contains(ClassId id) const noexcept;

  /// Fixes the projection recorded with this set. Must agree with any
  /// projection already recorded.
  void set_projection(std::optional<ProjectionSpec> spec);
  /// Appends a class; throws ClassCollision if the id is already stored.
  void add(ClassId id, std::vector<double> prototype);

  bool bit_identical(const PrototypeSet& other) const;

 private:
  std::vector<ClassId> class_ids_;
  std::vector<double> prototypes_;
  std::size_t feature_dim_ = 0;
  std::optional<ProjectionSpec> projection_;
};

/// Rows used as a class's prototype buffer: the first `buffer_per_class`
/// rows of each class in an order shuffled by `seed`.
std::vector<std::size_t> select_buffer(const LabeledDataset& data, std::size_t buffer_per_class,
                                       std::uint64_t seed);

/// Adds one prototype per class of `data` to `protos`. Throws
/// ClassCollision (leaving `protos` untouched) if any class already exists.
void build_prototypes(PrototypeSet& protos, const ParamSet& backbone, Activation act,
                      const LabeledDataset& data, std::size_t buffer_per_class,
                      const Projection* proj, std::uint64_t seed);

/// Class whose prototype has the highest cosine similarity with `feature`;
/// ties go to the lowest class id. A zero-norm prototype scores 0.
ClassId ncm_predict(const PrototypeSet& protos, std::span<const double> feature);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

void save_prototypes(const PrototypeSet& protos, const std::filesystem::path& path);
PrototypeSet load_prototypes(const std::filesystem::path& path);

}  // namespace sotu
