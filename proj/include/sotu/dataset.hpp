#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace sotu {

using ClassId = std::int64_t;

/// n x dim feature matrix with one class label per row. The declared class
/// set is sorted and unique; every label belongs to it.
class LabeledDataset {
 public:
  /// An empty `classes` declares the sorted set of distinct labels.
  LabeledDataset(std::size_t dim, std::vector<double> features, std::vector<ClassId> labels,
                 std::vector<ClassId> classes = {});

  std::size_t size() const noexcept { return labels_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(features_).subspan(i * dim_, dim_);
  }
  ClassId label(std::size_t i) const { return labels_[i]; }
  std::span<const double> features() const noexcept { return features_; }
  const std::vector<ClassId>& labels() const noexcept { return labels_; }
  const std::vector<ClassId>& classes() const noexcept { return classes_; }
  /// Position of `label` in the class set; throws InvalidArgument if absent.
  std::size_t class_index(ClassId label) const;

  /// Rows in the given order; the class set is re-declared from the kept labels.
  LabeledDataset subset(std::span<const std::size_t> rows) const;

  friend bool operator==(const LabeledDataset&, const LabeledDataset&) = default;

 private:
  std::size_t dim_;
  std::vector<double> features_;
  std::vector<ClassId> labels_;
  std::vector<ClassId> classes_;
};

/// Concatenates datasets of equal dim; the class set is the union.
LabeledDataset concat(std::span<const LabeledDataset> parts);

/// CSV with header `f0,...,f{d-1},label`. Values are written in shortest
/// round-trip form so a save/load cycle is bit-exact.
void save_dataset_csv(const LabeledDataset& ds, const std::filesystem::path& path);
LabeledDataset load_dataset_csv(const std::filesystem::path& path);

}  // namespace sotu
