#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sotu/errors.hpp"

namespace sotu {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor of doubles. Immutable once constructed; the
/// constructor enforces positive dims, matching element count and finite
/// values.
class DenseTensor {
 public:
  DenseTensor(Shape shape, std::vector<double> values);

  static DenseTensor zeros(Shape shape);
  static DenseTensor vector(std::vector<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return values_.size(); }
  std::span<const double> values() const noexcept { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }

  /// Bitwise comparison of shape and value bytes (distinguishes -0.0 from 0.0).
  bool bit_identical(const DenseTensor& other) const noexcept;

 private:
  Shape shape_;
  std::vector<double> values_;
};

enum class Combine { add, sub };

DenseTensor ew_combine(const DenseTensor& a, const DenseTensor& b, Combine kind);
DenseTensor scale(const DenseTensor& a, double c);
double dot(const DenseTensor& a, const DenseTensor& b);
double l2_norm(const DenseTensor& a);

/// Rank-2 product: [m,k] x [k,n] -> [m,n].
DenseTensor matmul(const DenseTensor& a, const DenseTensor& b);
DenseTensor transpose(const DenseTensor& a);

struct ParamEntry {
  std::string name;
  DenseTensor tensor;
};

/// Ordered, uniquely named collection of tensors (a model checkpoint).
class ParamSet {
 public:
  using const_iterator = std::vector<ParamEntry>::const_iterator;

  void add(std::string name, DenseTensor tensor);
  /// Replaces the tensor stored under an existing name; shape may change.
  void replace(std::string_view name, DenseTensor tensor);

  const DenseTensor& at(std::string_view name) const;
  const DenseTensor* find(std::string_view name) const noexcept;
  bool contains(std::string_view name) const noexcept { return find(name) != nullptr; }

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  std::size_t num_coordinates() const noexcept;
  const std::vector<ParamEntry>& entries() const noexcept { return entries_; }
  const_iterator begin() const noexcept { return entries_.begin(); }
  const_iterator end() const noexcept { return entries_.end(); }

  bool bit_identical(const ParamSet& other) const noexcept;

 private:
  std::vector<ParamEntry> entries_;
};

/// Throws NameMismatch / ShapeMismatch unless both sets carry the same names
/// in the same order with the same shapes.
void require_same_layout(const ParamSet& a, const ParamSet& b);

}  // namespace sotu
